use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCALAR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/scalar.toml");

fn clr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clr-mpc"))
        .args(args)
        .env("CLR_MPC_THREADS", "2")
        .output()
        .expect("spawn clr-mpc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_scalar(dir: &Path) {
    let out = clr(&["synth", "--model", SCALAR, "--n", "3", "--kprime", "1", "--output-dir", s(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--output-dir", s(dir), "--realizations", "4", "--steps", "12", "--x0", "0.5"];
    args.extend_from_slice(extra);
    clr(&args)
}

fn edit_certificate(dir: &Path, f: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let text = std::fs::read_to_string(dir.join("certificate.toml")).unwrap();
    let mut table: toml::Table = text.parse().unwrap();
    f(&mut table);
    let path = dir.join("corrupted.toml");
    std::fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_on_scalar_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    for f in ["model.toml", "certificate.toml", "synth.log"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let out = clr(&["verify", "--output-dir", s(d), "--samples", "2000", "--lyapunov-samples", "200"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("VALID"));

    let out = simulate(d, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.csv", "envelope.csv", "envelope.svg", "timing.csv", "runs/run_000.csv", "runs/run_003.csv"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let run = std::fs::read_to_string(d.join("runs/run_000.csv")).unwrap();
    assert!(run.starts_with("# clr-mpc trajectory format v1"));
    assert_eq!(run.lines().count(), 2 + 13);

    let out = clr(&["report", "--output-dir", s(d)]);
    assert_eq!(code(&out), 0);
    let report = std::fs::read_to_string(d.join("report.md")).unwrap();
    assert!(report.contains("violation_count | 0"));
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let read_runs = |d: &Path| -> Vec<String> {
        let mut files: Vec<_> = std::fs::read_dir(d.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|p| std::fs::read_to_string(p).unwrap()).chain([std::fs::read_to_string(d.join("summary.csv")).unwrap()]).collect()
    };
    assert_eq!(code(&simulate(d, &["--no-verify", "--mode", "per-step"])), 0);
    let first = read_runs(d);
    assert_eq!(code(&simulate(d, &["--no-verify", "--mode", "per-step"])), 0);
    assert_eq!(first, read_runs(d));
    assert_eq!(code(&simulate(d, &["--no-verify", "--mode", "per-step", "--seed", "2"])), 0);
    assert_ne!(first, read_runs(d));
}

#[test]
fn synthesis_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_scalar(a.path());
    synth_scalar(b.path());
    let read = |d: &Path| std::fs::read_to_string(d.join("certificate.toml")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn fingerprint_mismatch_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let other = d.join("other.toml");
    let text = std::fs::read_to_string(SCALAR).unwrap().replace("h_w = [0.1, 0.1]", "h_w = [0.2, 0.2]");
    std::fs::write(&other, text).unwrap();
    let cert = d.join("certificate.toml");
    let out = clr(&["verify", "--model", s(&other), "--certificate", s(&cert), "--output-dir", s(d)]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn negative_multiplier_fails_verification_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let bad = edit_certificate(d, |t| {
        let lam = t["multipliers"].as_array_mut().unwrap()[0].as_array_mut().unwrap()[0].as_array_mut().unwrap();
        lam[0] = toml::Value::Float(-1.0);
    });
    let out = clr(&["verify", "--certificate", s(&bad), "--output-dir", s(d), "--samples", "500", "--lyapunov-samples", "50"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn halved_tightening_is_caught_by_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let bad = edit_certificate(d, |t| {
        for v in t["tightenings"].as_array_mut().unwrap()[1].as_array_mut().unwrap() {
            *v = toml::Value::Float(v.as_float().unwrap() * 0.5);
        }
    });
    let out = clr(&["verify", "--certificate", s(&bad), "--output-dir", s(d), "--samples", "2000", "--lyapunov-samples", "50"]);
    assert_eq!(code(&out), 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(!stdout.contains("srf_failures = 0\n"), "{stdout}");
}

#[test]
fn simulate_refuses_invalid_certificate_unless_told() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let bad = edit_certificate(d, |t| {
        let lam = t["multipliers"].as_array_mut().unwrap()[0].as_array_mut().unwrap()[0].as_array_mut().unwrap();
        lam[0] = toml::Value::Float(-1.0);
    });
    assert_eq!(code(&simulate(d, &["--certificate", s(&bad)])), 4);
    assert_eq!(code(&simulate(d, &["--certificate", s(&bad), "--no-verify"])), 0);
}

#[test]
fn zero_steps_writes_only_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let out = clr(&["simulate", "--output-dir", s(d), "--realizations", "2", "--steps", "0", "--x0", "0.5", "--no-verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::fs::read_to_string(d.join("runs/run_000.csv")).unwrap();
    assert_eq!(run.lines().count(), 3);
}

#[test]
fn initial_state_outside_region_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_scalar(d);
    let out = clr(&["simulate", "--output-dir", s(d), "--x0", "5.0", "--no-verify"]);
    assert_eq!(code(&out), 6);
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = clr(&["report", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifacts"));
}

#[test]
fn missing_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = clr(&["synth", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    let out = clr(&["synth", "--model", s(&dir.path().join("nope.toml")), "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&clr(&["synth", "--no-such-flag"])), 1);
    assert_eq!(code(&clr(&["simulate", "--mode", "sideways"])), 1);
    assert_eq!(code(&clr(&["--help"])), 0);
}
