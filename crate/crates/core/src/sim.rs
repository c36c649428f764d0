//! Closed-loop Monte-Carlo simulation under the MPC law.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::{Matrix, Vector};
use crate::model::{sample_delta, sample_disturbance, ModelError, Polytope, UncertainSystem};
use crate::mpc::{ControllerState, MpcError};

/// First line of every CSV written by this module.
pub const CSV_VERSION_LINE: &str = "# clr-mpc trajectory format v1";
const VIOLATION_TOL: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("MPC infeasible at step {step} in state {state:?}")]
    MpcInfeasible { step: usize, state: Vec<f64>, trajectory: Box<Trajectory> },
    #[error("initial state is outside the region of attraction")]
    InitialStateOutsideRoa,
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty batch or runs of unequal length")]
    BadBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMode {
    /// One draw per run.
    FixedDelta,
    /// A fresh draw every step.
    PerStepDelta,
    /// Step `k` uses vertex `k mod n_Δ`.
    VertexCycling,
}

impl std::str::FromStr for DeltaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" | "fixed_delta" => Ok(DeltaMode::FixedDelta),
            "per-step" | "per_step" | "per_step_delta" => Ok(DeltaMode::PerStepDelta),
            "cycling" | "vertex_cycling" => Ok(DeltaMode::VertexCycling),
            _ => Err(format!("unknown perturbation mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub disturbances: Vec<Vector>,
    pub delta_weights: Vec<Vector>,
    pub stage_costs: Vec<f64>,
    pub mpc_values: Vec<f64>,
    pub violations: Vec<(usize, usize)>,
    /// Wall-clock seconds of each online solve; excluded from CSV output.
    pub solve_seconds: Vec<f64>,
    /// Step at which the online problem became infeasible.
    pub infeasible_at: Option<usize>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

pub fn run_closed_loop<R: rand::Rng + ?Sized>(
    ctrl: &ControllerState,
    sys: &UncertainSystem,
    w: &Polytope,
    x0: &Vector,
    steps: usize,
    rng: &mut R,
    mode: DeltaMode,
) -> Result<Trajectory, SimError> {
    if !ctrl.roa_membership(x0)? {
        return Err(SimError::InitialStateOutsideRoa);
    }
    let (f, g, b) = constraint_rows(ctrl);
    let nd = sys.n_delta();
    let mut traj = Trajectory { states: vec![x0.clone()], ..Default::default() };
    let mut fixed = None;
    if mode == DeltaMode::FixedDelta {
        fixed = Some(sample_delta(sys, rng));
    }
    let mut x = x0.clone();
    for k in 0..steps {
        let start = Instant::now();
        let sol = match ctrl.solve_mpc(&x) {
            Ok(sol) => sol,
            Err(MpcError::Infeasible(state)) => {
                traj.infeasible_at = Some(k);
                return Err(SimError::MpcInfeasible { step: k, state, trajectory: Box::new(traj) });
            }
            Err(e) => return Err(e.into()),
        };
        traj.solve_seconds.push(start.elapsed().as_secs_f64());
        let u = sol.u;
        let (delta, weights) = match mode {
            DeltaMode::FixedDelta => fixed.clone().expect("drawn before the loop"),
            DeltaMode::PerStepDelta => sample_delta(sys, rng),
            DeltaMode::VertexCycling => {
                let mut weights = Vector::zeros(nd);
                weights[k % nd] = 1.0;
                (sys.deltas[k % nd].clone(), weights)
            }
        };
        let wk = sample_disturbance(w, rng)?;

        let lhs = &f * &x + &g * &u;
        for r in 0..b.len() {
            if lhs[r] > b[r] + VIOLATION_TOL {
                traj.violations.push((k, r));
            }
        }
        traj.stage_costs.push(x.dot(&(&ctrl.q_x * &x)) + u.dot(&(&ctrl.q_u * &u)));
        traj.mpc_values.push(sol.value);
        x = sys.step(&x, &u, &wk, &delta);
        traj.inputs.push(u);
        traj.disturbances.push(wk);
        traj.delta_weights.push(weights);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

fn constraint_rows(ctrl: &ControllerState) -> (Matrix, Matrix, Vector) {
    let b = &ctrl.bundle;
    let (nc, nx, nu) = (b.n_c, b.n_x, b.n_u);
    let f = b.h_xu.view((0, 0), (nc, nx)).into_owned();
    let g = b.h_xu.view((0, (b.n + 1) * nx), (nc, nu)).into_owned();
    (f, g, b.b_stack.rows(0, nc).into_owned())
}

/// Re-propagates a trajectory from its recorded inputs, disturbances and
/// perturbation weights.
pub fn replay(sys: &UncertainSystem, traj: &Trajectory) -> Vec<Vector> {
    let mut states = vec![traj.states[0].clone()];
    for k in 0..traj.inputs.len() {
        let delta = sys.delta_from_weights(&traj.delta_weights[k]);
        let next = sys.step(&states[k], &traj.inputs[k], &traj.disturbances[k], &delta);
        states.push(next);
    }
    states
}

/// Independent runs with per-run random streams derived from `seed`.
/// Infeasible runs are returned truncated with `infeasible_at` set.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    ctrl: &ControllerState,
    sys: &UncertainSystem,
    w: &Polytope,
    x0: &Vector,
    steps: usize,
    runs: usize,
    seed: u64,
    mode: DeltaMode,
) -> Result<Vec<Trajectory>, SimError> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            match run_closed_loop(ctrl, sys, w, x0, steps, &mut rng, mode) {
                Ok(t) => Ok(t),
                Err(SimError::MpcInfeasible { step, trajectory, .. }) => {
                    log::error!("run {r}: MPC infeasible at step {step}");
                    Ok(*trajectory)
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean_cost: f64,
    /// `steps × (n_x + n_u)`, states then inputs.
    pub envelope_min: Matrix,
    pub envelope_max: Matrix,
    pub infeasible_count: usize,
    pub violation_count: usize,
}

pub fn batch_stats(runs: &[Trajectory]) -> Result<BatchStats, SimError> {
    let first = runs.first().ok_or(SimError::BadBatch)?;
    let steps = first.steps();
    let complete = runs.iter().filter(|t| t.infeasible_at.is_none());
    if complete.clone().any(|t| t.steps() != steps) {
        return Err(SimError::BadBatch);
    }
    let nx = first.states[0].len();
    let nu = runs.iter().flat_map(|t| t.inputs.first()).map(|u| u.len()).next().unwrap_or(0);
    let mut lo = Matrix::from_element(steps, nx + nu, f64::INFINITY);
    let mut hi = Matrix::from_element(steps, nx + nu, f64::NEG_INFINITY);
    for t in runs {
        for k in 0..t.steps().min(steps) {
            for (c, v) in t.states[k].iter().chain(t.inputs[k].iter()).enumerate() {
                lo[(k, c)] = lo[(k, c)].min(*v);
                hi[(k, c)] = hi[(k, c)].max(*v);
            }
        }
    }
    Ok(BatchStats {
        mean_cost: runs.iter().map(Trajectory::total_cost).sum::<f64>() / runs.len() as f64,
        envelope_min: lo,
        envelope_max: hi,
        infeasible_count: runs.iter().filter(|t| t.infeasible_at.is_some()).count(),
        violation_count: runs.iter().map(|t| t.violations.len()).sum(),
    })
}

fn versioned_writer<W: Write>(mut out: W) -> Result<csv::Writer<W>, SimError> {
    writeln!(out, "{CSV_VERSION_LINE}")?;
    Ok(csv::Writer::from_writer(out))
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Columns: `step, x…, u…, w…, stage_cost, V`; the final state row leaves
/// the input columns empty.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<(), SimError> {
    let nx = traj.states.first().map_or(0, |x| x.len());
    let nu = traj.inputs.first().map_or(0, |u| u.len());
    let nw = traj.disturbances.first().map_or(0, |w| w.len());
    let mut wtr = versioned_writer(out)?;
    let mut header = vec!["step".to_string()];
    header.extend((1..=nx).map(|i| format!("x{i}")));
    header.extend((1..=nu).map(|i| format!("u{i}")));
    header.extend((1..=nw).map(|i| format!("w{i}")));
    header.extend(["stage_cost".into(), "V".into()]);
    wtr.write_record(&header)?;
    for (k, x) in traj.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|v| cell(Some(*v))));
        row.extend((0..nu).map(|i| cell(traj.inputs.get(k).map(|u| u[i]))));
        row.extend((0..nw).map(|i| cell(traj.disturbances.get(k).map(|w| w[i]))));
        row.push(cell(traj.stage_costs.get(k).copied()));
        row.push(cell(traj.mpc_values.get(k).copied()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row per run followed by a `mean` row.
pub fn write_summary_csv<W: Write>(runs: &[Trajectory], stats: &BatchStats, out: W) -> Result<(), SimError> {
    let mut wtr = versioned_writer(out)?;
    wtr.write_record(["run", "steps", "cumulative_cost", "violations", "infeasible_at"])?;
    for (r, t) in runs.iter().enumerate() {
        wtr.write_record([
            r.to_string(),
            t.steps().to_string(),
            format!("{:e}", t.total_cost()),
            t.violations.len().to_string(),
            t.infeasible_at.map(|k| k.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.write_record([
        "mean".to_string(),
        String::new(),
        format!("{:e}", stats.mean_cost),
        stats.violation_count.to_string(),
        stats.infeasible_count.to_string(),
    ])?;
    wtr.flush()?;
    Ok(())
}

/// Columns: `step` then `min`/`max` for each state and input.
pub fn write_envelope_csv<W: Write>(stats: &BatchStats, nx: usize, out: W) -> Result<(), SimError> {
    let mut wtr = versioned_writer(out)?;
    let mut header = vec!["step".to_string()];
    for c in 0..stats.envelope_min.ncols() {
        let name = if c < nx { format!("x{}", c + 1) } else { format!("u{}", c - nx + 1) };
        header.push(format!("{name}_min"));
        header.push(format!("{name}_max"));
    }
    wtr.write_record(&header)?;
    for k in 0..stats.envelope_min.nrows() {
        let mut row = vec![k.to_string()];
        for c in 0..stats.envelope_min.ncols() {
            row.push(format!("{:e}", stats.envelope_min[(k, c)]));
            row.push(format!("{:e}", stats.envelope_max[(k, c)]));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cost: &[f64], states: &[[f64; 1]]) -> Trajectory {
        Trajectory {
            states: states.iter().map(|s| Vector::from_row_slice(s)).collect(),
            inputs: vec![Vector::from_element(1, 0.5); states.len() - 1],
            disturbances: vec![Vector::zeros(1); states.len() - 1],
            delta_weights: vec![Vector::from_element(1, 1.0); states.len() - 1],
            stage_costs: cost.to_vec(),
            mpc_values: cost.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn single_run_envelope_is_the_run() {
        let t = run(&[1.0, 2.0], &[[1.0], [2.0], [3.0]]);
        let s = batch_stats(std::slice::from_ref(&t)).unwrap();
        assert_eq!(s.envelope_min, s.envelope_max);
        assert_eq!(s.envelope_min[(1, 0)], 2.0);
        assert_eq!(s.envelope_min[(1, 1)], 0.5);
        assert_eq!(s.mean_cost, 3.0);
    }

    #[test]
    fn mean_and_bounds() {
        let a = run(&[1.0, 1.0], &[[1.0], [-2.0], [0.0]]);
        let b = run(&[4.0, 0.0], &[[1.0], [3.0], [0.0]]);
        let s = batch_stats(&[a, b]).unwrap();
        assert_eq!(s.mean_cost, 3.0);
        assert_eq!(s.envelope_min[(1, 0)], -2.0);
        assert_eq!(s.envelope_max[(1, 0)], 3.0);
        assert!(batch_stats(&[]).is_err());
    }

    #[test]
    fn csv_carries_version_line() {
        let t = run(&[1.0], &[[1.0], [0.0]]);
        let mut buf = Vec::new();
        write_trajectory_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
        assert_eq!(lines.next(), Some("step,x1,u1,w1,stage_cost,V"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn mode_names() {
        assert_eq!("fixed".parse::<DeltaMode>().unwrap(), DeltaMode::FixedDelta);
        assert_eq!("per-step".parse::<DeltaMode>().unwrap(), DeltaMode::PerStepDelta);
        assert!("other".parse::<DeltaMode>().is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::model::{ConstraintSet, Model};
    use crate::synthesis::{synthesize, SynthesisConfig};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn controller() -> &'static (ControllerState, Model) {
        static CTRL: OnceLock<(ControllerState, Model)> = OnceLock::new();
        CTRL.get_or_init(|| {
            let s = |v: f64| Matrix::from_element(1, 1, v);
            let model = Model {
                sys: UncertainSystem {
                    a: s(1.1),
                    b: s(1.0),
                    b_p: s(0.1),
                    b_w: s(1.0),
                    d_x: s(1.0),
                    d_u: s(0.0),
                    d_w: s(0.0),
                    deltas: vec![s(1.0), s(-1.0)],
                },
                w: Polytope::boxed(1, 0.1),
                c: ConstraintSet {
                    f: Matrix::from_row_slice(4, 1, &[1.0, -1.0, 0.0, 0.0]),
                    g: Matrix::from_row_slice(4, 1, &[0.0, 0.0, 1.0, -1.0]),
                    b: Vector::from_element(4, 1.0),
                },
            };
            let cfg = SynthesisConfig { n: 3, k_prime: 1, ..SynthesisConfig::standard(1, 1) };
            let cert = synthesize(&model, cfg).unwrap().certificate;
            (ControllerState::new(cert, &model).unwrap(), model)
        })
    }

    fn mode() -> impl Strategy<Value = DeltaMode> {
        prop_oneof![Just(DeltaMode::FixedDelta), Just(DeltaMode::PerStepDelta), Just(DeltaMode::VertexCycling)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn replay_reproduces_states(seed in any::<u64>(), steps in 0usize..15, x0 in -0.3f64..0.3, mode in mode()) {
            let (ctrl, model) = controller();
            let x0 = Vector::from_element(1, x0);
            let run = |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                run_closed_loop(ctrl, &model.sys, &model.w, &x0, steps, &mut rng, mode).unwrap()
            };
            let a = run(seed);
            prop_assert_eq!(replay(&model.sys, &a), a.states.clone());
            let b = run(seed);
            prop_assert_eq!(&a.states, &b.states);
            prop_assert_eq!(&a.inputs, &b.inputs);
            prop_assert_eq!(&a.disturbances, &b.disturbances);
            prop_assert_eq!(&a.delta_weights, &b.delta_weights);
            prop_assert!(a.violations.is_empty());
        }
    }
}
