use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use clr_mpc_core::linalg::{Matrix, Vector};
use clr_mpc_core::model::Model;
use clr_mpc_core::mpc::ControllerState;
use clr_mpc_core::sim::{self, DeltaMode};
use clr_mpc_core::synthesis::{synthesize, Certificate, SynthesisConfig, SynthesisError};
use clr_mpc_core::verify::{check_farkas, verify_certificate, VerifyOptions};

mod report;
mod svg;

const CERTIFICATE: &str = "certificate.toml";
const MODEL: &str = "model.toml";
const SYNTH_LOG: &str = "synth.log";
const VERIFICATION: &str = "verification.toml";
const SUMMARY: &str = "summary.csv";
const ENVELOPE: &str = "envelope.csv";
const ENVELOPE_SVG: &str = "envelope.svg";
const TIMING: &str = "timing.csv";
const REPORT: &str = "report.md";

#[derive(Parser)]
#[command(name = "clr-mpc", version, about = "Robust MPC with certified constraint tightening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize tightenings, gains, multipliers and terminal cost.
    Synth(SynthArgs),
    /// Check a certificate; exits 0 only if it is valid.
    Verify(VerifyArgs),
    /// Run closed-loop realizations and write CSV and SVG output.
    Simulate(SimulateArgs),
    /// Summarize the artifacts of an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model file (TOML).
    #[arg(long, conflicts_with = "builtin")]
    model: Option<PathBuf>,
    /// Built-in model instead of a file.
    #[arg(long, value_parser = ["msd"])]
    builtin: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    kprime: usize,
    #[arg(long, default_value_t = 2.0)]
    mu: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.7)]
    init_scale: f64,
    #[arg(long, default_value_t = 30)]
    max_alternations: usize,
    /// Diagonal of the state weight, comma separated; identity if omitted.
    #[arg(long, value_delimiter = ',')]
    qx: Option<Vec<f64>>,
    /// Diagonal of the input weight, comma separated; identity if omitted.
    #[arg(long, value_delimiter = ',')]
    qu: Option<Vec<f64>>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Certificate file; defaults to the one in the output directory.
    #[arg(long)]
    certificate: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 1_000)]
    lyapunov_samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    certificate: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    realizations: usize,
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `fixed`, `per-step` or `cycling`.
    #[arg(long, default_value = "fixed")]
    mode: DeltaMode,
    /// Initial state, comma separated; the example's start state for the built-in model, the origin otherwise.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x0: Option<Vec<f64>>,
    /// Skip the certificate check before simulating.
    #[arg(long)]
    no_verify: bool,
    /// Samples used by the pre-simulation check.
    #[arg(long, default_value_t = 1_000)]
    verify_samples: usize,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

/// Failures mapped to documented exit codes.
#[derive(Debug)]
enum Failure {
    InitialGuess(String),
    Solver(String),
    CheckFailed(String),
    Fingerprint(String),
    Infeasible(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::InitialGuess(_) => 2,
            Failure::Solver(_) => 3,
            Failure::CheckFailed(_) => 4,
            Failure::Fingerprint(_) => 5,
            Failure::Infeasible(_) => 6,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::InitialGuess(m)
            | Failure::Solver(m)
            | Failure::CheckFailed(m)
            | Failure::Fingerprint(m)
            | Failure::Infeasible(m) => m.clone(),
            Failure::Other(e) => format!("{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("CLR_MPC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => report::cmd_report(&a.output_dir).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_model(args: &ModelArgs, output_dir: &Path) -> anyhow::Result<Model> {
    match (&args.model, &args.builtin) {
        (Some(path), _) => Model::read(path).with_context(|| format!("reading model {}", path.display())),
        (None, Some(_)) => Ok(Model::msd()),
        (None, None) => {
            let path = output_dir.join(MODEL);
            if path.exists() {
                Model::read(&path).with_context(|| format!("reading model {}", path.display()))
            } else {
                bail!("no model given: pass --model or --builtin msd")
            }
        }
    }
}

fn load_certificate(path: Option<&PathBuf>, output_dir: &Path, model: &Model) -> Result<Certificate, Failure> {
    let path = path.cloned().unwrap_or_else(|| output_dir.join(CERTIFICATE));
    Certificate::read(&path, model).map_err(|e| match e {
        SynthesisError::FingerprintMismatch { .. } => Failure::Fingerprint(format!("{}: {e}", path.display())),
        e => Failure::Other(anyhow::anyhow!("reading certificate {}: {e}", path.display())),
    })
}

fn diagonal(values: &Option<Vec<f64>>, n: usize, name: &str) -> anyhow::Result<Matrix> {
    match values {
        None => Ok(Matrix::identity(n, n)),
        Some(v) if v.len() == n => Ok(Matrix::from_diagonal(&Vector::from_column_slice(v))),
        Some(v) => bail!("{name} has {} entries, expected {n}", v.len()),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let model = load_model(&a.model, &a.output_dir)?;
    std::fs::create_dir_all(&a.output_dir).context("creating output directory")?;
    let (nx, nu) = (model.sys.n_x(), model.sys.n_u());
    let cfg = SynthesisConfig {
        n: a.n,
        k_prime: a.kprime,
        mu: a.mu,
        epsilon: a.epsilon,
        init_scale: a.init_scale,
        max_alternations: a.max_alternations,
        q_x: diagonal(&a.qx, nx, "--qx")?,
        q_u: diagonal(&a.qu, nu, "--qu")?,
        ..SynthesisConfig::standard(nx, nu)
    };
    let start = Instant::now();
    let out = synthesize(&model, cfg).map_err(|e| match e {
        SynthesisError::InitialGuessInfeasible { .. } => Failure::InitialGuess(e.to_string()),
        SynthesisError::Solver(_) | SynthesisError::NoProgress(_) => Failure::Solver(e.to_string()),
        e => Failure::Other(e.into()),
    })?;
    let elapsed = start.elapsed().as_secs_f64();

    let cert = &out.certificate;
    let bundle = cert.bundle(&model).context("rebuilding prediction matrices")?;
    let farkas = check_farkas(cert, &bundle, &model.sys, &model.w).context("checking multipliers")?;
    let mut log = String::new();
    log.push_str(&format!("initial_scale = {}\n", out.initial_scale));
    for h in &out.history {
        log.push_str(&format!(
            "alternation {}: objective {:.9e} sigma_max {:.3e} alpha {:.6e}\n",
            h.iteration, h.objective, h.sigma_max, h.alpha
        ));
    }
    for (j, r) in farkas.iter().enumerate() {
        log.push_str(&format!(
            "vertex {j}: eq_resid {:.3e} ineq_resid {:.3e} negativity {:.3e}\n",
            r.eq_resid, r.ineq_resid, r.negativity
        ));
    }
    log.push_str(&format!("terminal_slack = {:.6e}\n", cert.cost.slack));
    if out.lmi_obstruction.is_some() {
        log.push_str("terminal decrease condition not certified\n");
    }
    log.push_str(&format!("elapsed_seconds = {elapsed:.3}\n"));

    model.write(&a.output_dir.join(MODEL)).context("writing model copy")?;
    cert.write(&a.output_dir.join(CERTIFICATE)).context("writing certificate")?;
    std::fs::write(a.output_dir.join(SYNTH_LOG), log).context("writing synthesis log")?;
    println!(
        "certificate written to {} (objective {:.6}, alpha {:.4}, {elapsed:.1} s)",
        a.output_dir.join(CERTIFICATE).display(),
        cert.objective,
        cert.alpha
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    let model = load_model(&a.model, &a.output_dir)?;
    let cert = load_certificate(a.certificate.as_ref(), &a.output_dir, &model)?;
    let opts = VerifyOptions { srf_samples: a.samples, lyapunov_samples: a.lyapunov_samples, seed: a.seed };
    let report = verify_certificate(&cert, &model, &opts).map_err(|e| Failure::Solver(e.to_string()))?;
    std::fs::create_dir_all(&a.output_dir).context("creating output directory")?;
    std::fs::write(a.output_dir.join(VERIFICATION), report.to_toml()).context("writing verification report")?;
    print!("{}", report.to_toml());
    if !report.lmi_certified {
        eprintln!("warning: terminal decrease condition not certified (slack {:.3e})", report.lmi_slack);
    }
    if report.is_valid() {
        println!("VALID");
        Ok(())
    } else {
        Err(Failure::CheckFailed("certificate failed verification".into()))
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let model = load_model(&a.model, &a.output_dir)?;
    let cert = load_certificate(a.certificate.as_ref(), &a.output_dir, &model)?;
    if !a.no_verify {
        let opts = VerifyOptions { srf_samples: a.verify_samples, lyapunov_samples: a.verify_samples / 10, seed: a.seed };
        let report = verify_certificate(&cert, &model, &opts).map_err(|e| Failure::Solver(e.to_string()))?;
        if !report.is_valid() {
            return Err(Failure::CheckFailed("certificate failed verification; pass --no-verify to simulate anyway".into()));
        }
    }
    let ctrl = ControllerState::new(cert, &model).context("building controller")?;
    let x0 = match &a.x0 {
        Some(v) if v.len() == model.sys.n_x() => Vector::from_column_slice(v),
        Some(v) => return Err(Failure::Other(anyhow::anyhow!("--x0 has {} entries, expected {}", v.len(), model.sys.n_x()))),
        None if model == Model::msd() => Vector::from_row_slice(&[1.9, 0.5, -1.7, 1.7]),
        None => Vector::zeros(model.sys.n_x()),
    };
    let runs = sim::run_batch(&ctrl, &model.sys, &model.w, &x0, a.steps, a.realizations, a.seed, a.mode)
        .map_err(|e| match e {
            sim::SimError::InitialStateOutsideRoa => Failure::Infeasible(format!("initial state {x0:?} is outside the region of attraction")),
            e => Failure::Other(e.into()),
        })?;

    let runs_dir = a.output_dir.join("runs");
    std::fs::create_dir_all(&runs_dir).context("creating output directory")?;
    for (r, t) in runs.iter().enumerate() {
        let file = std::fs::File::create(runs_dir.join(format!("run_{r:03}.csv"))).context("creating run CSV")?;
        sim::write_trajectory_csv(t, std::io::BufWriter::new(file)).context("writing run CSV")?;
    }
    let stats = sim::batch_stats(&runs).context("aggregating runs")?;
    let create = |name: &str| -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(a.output_dir.join(name))?))
    };
    sim::write_summary_csv(&runs, &stats, create(SUMMARY)?).context("writing summary")?;
    sim::write_envelope_csv(&stats, model.sys.n_x(), create(ENVELOPE)?).context("writing envelope")?;
    let bounds = svg::variable_bounds(&model);
    std::fs::write(a.output_dir.join(ENVELOPE_SVG), svg::envelope_svg(&stats, model.sys.n_x(), &bounds))
        .context("writing envelope plot")?;
    let times: Vec<f64> = runs.iter().flat_map(|t| t.solve_seconds.iter().copied()).collect();
    std::fs::write(a.output_dir.join(TIMING), report::timing_csv(&times)).context("writing timing")?;

    println!(
        "{} runs x {} steps: mean cost {:.3}, violations {}, infeasible runs {}",
        runs.len(),
        a.steps,
        stats.mean_cost,
        stats.violation_count,
        stats.infeasible_count
    );
    if stats.infeasible_count > 0 {
        return Err(Failure::Infeasible(format!("{} runs hit an infeasible online problem", stats.infeasible_count)));
    }
    Ok(())
}
