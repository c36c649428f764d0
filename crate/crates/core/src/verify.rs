//! Independent certificate checks: Farkas residuals, support-function
//! inclusion tests, sampled recursive feasibility and Lyapunov decrease.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{block_diag, hstack, stack_vectors, Matrix, Vector};
use crate::model::{sample_delta, sample_disturbance, Model, ModelError, Polytope, UncertainSystem};
use crate::mpc::{ControllerState, MpcError};
use crate::prediction::{build_gain_matrices, shifted_inputs, stage_weight, PredictionBundle, PredictionError};
use crate::solver::{check_feasible, solve_qp, QpProblem, QpStatus, SolverError};
use crate::synthesis::Certificate;

pub const RESIDUAL_TOL: f64 = 1e-6;
pub const SAMPLE_TOL: f64 = 1e-7;
pub const LYAPUNOV_TOL: f64 = 1e-6;
const CHUNK: usize = 64;
const POOL: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("solver: {0}")]
    Solver(String),
    #[error("report format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<SolverError> for VerifyError {
    fn from(e: SolverError) -> Self {
        VerifyError::Solver(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarkasResiduals {
    /// `‖ΛH₁ − H₂‖_max`.
    pub eq_resid: f64,
    /// `max(Λh₁ − h₂)`; negative values are slack.
    pub ineq_resid: f64,
    /// `max(0, −min Λ)`.
    pub negativity: f64,
}

impl FarkasResiduals {
    pub fn ok(&self) -> bool {
        self.eq_resid <= RESIDUAL_TOL && self.ineq_resid <= RESIDUAL_TOL && self.negativity <= RESIDUAL_TOL
    }
}

/// Residuals of a Farkas pair certifying `{H₁x ≤ h₁} ⊆ {H₂x ≤ h₂}`.
pub fn farkas_residuals(lambda: &Matrix, inner: &Polytope, outer: &Polytope) -> Result<FarkasResiduals, VerifyError> {
    if lambda.shape() != (outer.h.nrows(), inner.h.nrows()) || inner.dim() != outer.dim() {
        return Err(VerifyError::DimensionMismatch(format!(
            "Λ is {:?} for {} outer and {} inner rows",
            lambda.shape(),
            outer.h.nrows(),
            inner.h.nrows()
        )));
    }
    let eq = (lambda * &inner.h - &outer.h).amax();
    let ineq = lambda * &inner.rhs - &outer.rhs;
    Ok(FarkasResiduals {
        eq_resid: eq,
        ineq_resid: if ineq.is_empty() { f64::NEG_INFINITY } else { ineq.max() },
        negativity: (-lambda.min()).max(0.0),
    })
}

/// Multipliers from the duals of the row-wise support LPs, if every row is
/// bounded over `inner`.
pub fn farkas_multipliers(outer: &Polytope, inner: &Polytope) -> Result<Option<Matrix>, VerifyError> {
    let rows: Vec<Option<Vector>> = (0..outer.h.nrows())
        .into_par_iter()
        .map(|r| {
            let c = outer.h.row(r).transpose();
            let sol = solve_qp(&QpProblem::lp(-c).with_inequalities(inner.h.clone(), inner.rhs.clone()))?;
            Ok((sol.status == QpStatus::Optimal).then(|| sol.in_duals.map(|v| v.max(0.0))))
        })
        .collect::<Result<_, VerifyError>>()?;
    let mut lambda = Matrix::zeros(outer.h.nrows(), inner.h.nrows());
    for (r, row) in rows.into_iter().enumerate() {
        match row {
            Some(v) => lambda.row_mut(r).copy_from(&v.transpose()),
            None => return Ok(None),
        }
    }
    Ok(Some(lambda))
}

/// `𝐏₁ = {(𝐬, w) : 𝐇_xu𝐒𝐬 ≤ 𝐛−𝐭, H_w w ≤ h_w}`.
pub fn p1(cert: &Certificate, bundle: &PredictionBundle, w: &Polytope) -> Polytope {
    let h = block_diag(&[&bundle.constraint_matrix(), &w.h]);
    Polytope { h, rhs: stack_vectors(&[&(&bundle.b_stack - &cert.tightenings), &w.rhs]) }
}

/// `𝐏₂ʲ = {(𝐬, w) : 𝐇_xu(𝐂_Kʲ𝐬 + 𝐂_Mʲw) ≤ 𝐛−𝐭}`.
pub fn p2(cert: &Certificate, bundle: &PredictionBundle, sys: &UncertainSystem, vertex: usize) -> Result<Polytope, VerifyError> {
    let (c_k, c_m) = build_gain_matrices(bundle, &cert.gains[vertex], sys, vertex)?;
    let h = &bundle.h_xu * hstack(&[&c_k, &c_m]);
    Ok(Polytope { h, rhs: &bundle.b_stack - &cert.tightenings })
}

fn check_certificate_shapes(cert: &Certificate, bundle: &PredictionBundle, sys: &UncertainSystem) -> Result<(), VerifyError> {
    let nd = sys.n_delta();
    if cert.gains.len() != nd || cert.tightenings.len() != bundle.n_rows() {
        return Err(VerifyError::DimensionMismatch(format!(
            "certificate has {} gain sets and {} tightenings for {} vertices and {} rows",
            cert.gains.len(),
            cert.tightenings.len(),
            nd,
            bundle.n_rows()
        )));
    }
    Ok(())
}

/// Residuals of the stored multipliers, one entry per vertex.
pub fn check_farkas(
    cert: &Certificate,
    bundle: &PredictionBundle,
    sys: &UncertainSystem,
    w: &Polytope,
) -> Result<Vec<FarkasResiduals>, VerifyError> {
    check_certificate_shapes(cert, bundle, sys)?;
    if cert.multipliers.len() != sys.n_delta() {
        return Err(VerifyError::DimensionMismatch(format!("{} multiplier matrices", cert.multipliers.len())));
    }
    let inner = p1(cert, bundle, w);
    (0..sys.n_delta())
        .map(|j| farkas_residuals(&cert.multipliers[j], &inner, &p2(cert, bundle, sys, j)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Containment {
    pub included: bool,
    /// A point of the inner set violating some outer row.
    pub witness: Option<Vector>,
    /// `max_r (max_{x∈inner} [H₂]_r x − [h₂]_r)`.
    pub worst_margin: f64,
    pub empty_inner: bool,
}

/// Row-wise support-function test of `inner ⊆ outer`.
pub fn contains(outer: &Polytope, inner: &Polytope) -> Result<Containment, VerifyError> {
    if outer.dim() != inner.dim() {
        return Err(VerifyError::DimensionMismatch(format!("{} vs {}", outer.dim(), inner.dim())));
    }
    let n = inner.dim();
    let feas = check_feasible(&inner.h, &inner.rhs, &Matrix::zeros(0, n), &Vector::zeros(0))?;
    if !feas.feasible {
        return Ok(Containment { included: true, witness: None, worst_margin: f64::NEG_INFINITY, empty_inner: true });
    }
    let rows: Vec<(f64, Option<Vector>)> = (0..outer.h.nrows())
        .into_par_iter()
        .map(|r| {
            let c = outer.h.row(r).transpose();
            let sol = solve_qp(&QpProblem::lp(-&c).with_inequalities(inner.h.clone(), inner.rhs.clone()))?;
            match sol.status {
                QpStatus::Optimal => Ok((c.dot(&sol.x) - outer.rhs[r], Some(sol.x))),
                QpStatus::Unbounded => Ok((f64::INFINITY, Some(sol.x))),
                s => Err(VerifyError::Solver(format!("support LP for row {r} ended with {s:?}"))),
            }
        })
        .collect::<Result<_, VerifyError>>()?;
    let mut out = Containment { included: true, witness: None, worst_margin: f64::NEG_INFINITY, empty_inner: false };
    for (r, (margin, point)) in rows.into_iter().enumerate() {
        let tol = SAMPLE_TOL * (1.0 + outer.rhs[r].abs());
        if margin > tol && out.included {
            out.included = false;
            out.witness = point;
        }
        out.worst_margin = out.worst_margin.max(margin);
    }
    Ok(out)
}

/// `𝐏₁ ⊆ 𝐏₂ʲ` for every vertex, by the support-function oracle.
pub fn check_inclusions(
    cert: &Certificate,
    bundle: &PredictionBundle,
    sys: &UncertainSystem,
    w: &Polytope,
) -> Result<Vec<Containment>, VerifyError> {
    check_certificate_shapes(cert, bundle, sys)?;
    let inner = p1(cert, bundle, w);
    (0..sys.n_delta()).map(|j| contains(&p2(cert, bundle, sys, j)?, &inner)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub samples: usize,
    pub failures: usize,
    pub worst_margin: f64,
}

impl SampleReport {
    fn merge(self, other: SampleReport) -> SampleReport {
        SampleReport {
            samples: self.samples + other.samples,
            failures: self.failures + other.failures,
            worst_margin: self.worst_margin.max(other.worst_margin),
        }
    }

    fn empty() -> SampleReport {
        SampleReport { samples: 0, failures: 0, worst_margin: f64::NEG_INFINITY }
    }
}

fn chunked<F>(samples: usize, seed: u64, f: F) -> Result<SampleReport, VerifyError>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<SampleReport, VerifyError> + Sync,
{
    (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            f(CHUNK.min(samples - c * CHUNK), &mut rng)
        })
        .try_reduce(SampleReport::empty, |a, b| Ok(a.merge(b)))
}

/// Worst row of `𝐇_xu𝐒𝐬 − (𝐛−𝐭)`.
fn stack_margin(bundle: &PredictionBundle, rhs: &Vector, s: &Vector) -> f64 {
    (&bundle.constraint_matrix() * s - rhs).max()
}

/// Sampled check of the shifted candidate: every sampled `𝐬 ∈ 𝐏₀`,
/// `w ∈ W` and vertex must yield a feasible next decision vector.
pub fn srf_monte_carlo<R: Rng + ?Sized>(
    cert: &Certificate,
    bundle: &PredictionBundle,
    sys: &UncertainSystem,
    w: &Polytope,
    samples: usize,
    rng: &mut R,
) -> Result<SampleReport, VerifyError> {
    check_certificate_shapes(cert, bundle, sys)?;
    let rhs = &bundle.b_stack - &cert.tightenings;
    let p0 = Polytope { h: bundle.constraint_matrix(), rhs: rhs.clone() };
    let (nx, nu) = (bundle.n_x, bundle.n_u);
    let nd = sys.n_delta();
    let next = |s: &Vector, wk: &Vector, delta: &Matrix, u_next: &Vector| {
        let x = s.rows(0, nx).into_owned();
        let u = s.rows(nx, nu).into_owned();
        let x1 = sys.step(&x, &u, wk, delta);
        stack_vectors(&[&x1, u_next])
    };
    chunked(samples, rng.random(), |count, rng| {
        let mut pool: Vec<Vector> = Vec::new();
        let mut report = SampleReport::empty();
        for _ in 0..count {
            let s = if pool.len() < 2 || rng.random_bool(0.5) {
                let c = Vector::from_iterator(bundle.n_s(), (0..bundle.n_s()).map(|_| rng.sample(StandardNormal)));
                match p0.support(&c)? {
                    Some((_, v)) => v,
                    None => return Err(VerifyError::Solver("random vertex LP failed on 𝐏₀".into())),
                }
            } else {
                let a = &pool[rng.random_range(0..pool.len())];
                let b = &pool[rng.random_range(0..pool.len())];
                let theta: f64 = rng.random();
                a * theta + b * (1.0 - theta)
            };
            if pool.len() < POOL {
                pool.push(s.clone());
            } else {
                let slot = rng.random_range(0..POOL);
                pool[slot] = s.clone();
            }
            let wk = sample_disturbance(w, rng)?;
            let j = rng.random_range(0..nd);
            let u_j = shifted_inputs(bundle, &cert.gains[j], sys, &s, &wk);
            let m_vertex = stack_margin(bundle, &rhs, &next(&s, &wk, &sys.deltas[j], &u_j));

            let (delta, tau) = sample_delta(sys, rng);
            let mut u_tau = Vector::zeros(u_j.len());
            for (k, g) in cert.gains.iter().enumerate() {
                if tau[k] != 0.0 {
                    u_tau += shifted_inputs(bundle, g, sys, &s, &wk) * tau[k];
                }
            }
            let m_interior = stack_margin(bundle, &rhs, &next(&s, &wk, &delta, &u_tau));

            let margin = m_vertex.max(m_interior);
            report.samples += 1;
            report.worst_margin = report.worst_margin.max(margin);
            if margin > SAMPLE_TOL {
                report.failures += 1;
            }
        }
        Ok(report)
    })
}

/// Sampled ISS decrease `V(x⁺) − V(x) ≤ λ₂(w) − δ‖x‖²` along the closed loop.
/// With `zero_disturbance`, `w ≡ 0` and states with `‖x‖ > 1e-3` must also
/// show a strict decrease.
pub fn lyapunov_check<R: Rng + ?Sized>(
    cert: &Certificate,
    ctrl: &ControllerState,
    sys: &UncertainSystem,
    w: &Polytope,
    samples: usize,
    zero_disturbance: bool,
    rng: &mut R,
) -> Result<SampleReport, VerifyError> {
    let bundle = &ctrl.bundle;
    let nx = bundle.n_x;
    let q_s = stage_weight(&cert.q_x, &cert.cost.q_n, &cert.q_u, bundle.n);
    let c_w: Vec<Matrix> = (0..sys.n_delta())
        .map(|j| build_gain_matrices(bundle, &cert.gains[j], sys, j).map(|(_, c_m)| c_m))
        .collect::<Result<_, _>>()?;
    let factor = 1.0 + 1.0 / cert.cost.epsilon;
    let delta_p = cert.cost.p_margin;
    let r_max = 1e3 * (1.0 + bundle.b_stack.amax());
    chunked(samples, rng.random(), |count, rng| {
        let mut report = SampleReport::empty();
        for _ in 0..count {
            let dir = Vector::from_iterator(nx, (0..nx).map(|_| rng.sample(StandardNormal))).normalize();
            let extent = ctrl.roa_extent(&dir, r_max, 1e-6 * (1.0 + r_max))?;
            let radius = if rng.random_bool(0.5) { extent } else { extent * rng.random::<f64>().powf(1.0 / nx as f64) };
            let x = dir * radius;
            let wk = if zero_disturbance { Vector::zeros(sys.n_w()) } else { sample_disturbance(w, rng)? };
            let (delta, tau) = sample_delta(sys, rng);

            let now = ctrl.solve_mpc(&x)?;
            let x1 = sys.step(&x, &now.u, &wk, &delta);
            let margin = match ctrl.solve_mpc(&x1) {
                Ok(later) => {
                    let mut c_tau = Matrix::zeros(c_w[0].nrows(), c_w[0].ncols());
                    for (k, c) in c_w.iter().enumerate() {
                        c_tau += c * tau[k];
                    }
                    let cw = &c_tau * &wk;
                    let lambda2 = factor * cw.dot(&(&q_s * &cw));
                    let mut m = later.value - now.value - lambda2 + delta_p * x.norm_squared();
                    if zero_disturbance && x.norm() > 1e-3 && later.value >= now.value {
                        m = m.max(later.value - now.value + LYAPUNOV_TOL);
                    }
                    m
                }
                Err(MpcError::Infeasible(_)) => f64::INFINITY,
                Err(e) => return Err(e.into()),
            };
            report.samples += 1;
            report.worst_margin = report.worst_margin.max(margin);
            if margin > LYAPUNOV_TOL {
                report.failures += 1;
            }
        }
        Ok(report)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub srf_samples: usize,
    pub lyapunov_samples: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { srf_samples: 10_000, lyapunov_samples: 1_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationReport {
    pub farkas_residuals: Vec<FarkasResiduals>,
    pub inclusion_failures: usize,
    pub inclusion_worst_margin: f64,
    pub srf_samples: usize,
    pub srf_failures: usize,
    pub srf_worst_margin: f64,
    pub lyapunov_samples: usize,
    pub lyapunov_failures: usize,
    pub lyapunov_worst_margin: f64,
    pub worst_margin: f64,
    /// Smallest eigenvalue over the terminal decrease conditions.
    pub lmi_slack: f64,
    pub lmi_certified: bool,
}

impl VerificationReport {
    /// All residuals within tolerance and no failed samples.
    pub fn is_valid(&self) -> bool {
        self.farkas_residuals.iter().all(FarkasResiduals::ok)
            && self.inclusion_failures == 0
            && self.srf_failures == 0
            && self.lyapunov_failures == 0
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, VerifyError> {
        toml::from_str(text).map_err(|e| VerifyError::Format(e.to_string()))
    }
}

/// Runs every check on a certificate against its model.
pub fn verify_certificate(cert: &Certificate, model: &Model, opts: &VerifyOptions) -> Result<VerificationReport, VerifyError> {
    let ctrl = ControllerState::new(cert.clone(), model)?;
    let bundle = &ctrl.bundle;
    let farkas = check_farkas(cert, bundle, &model.sys, &model.w)?;
    let inclusions = check_inclusions(cert, bundle, &model.sys, &model.w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let srf = srf_monte_carlo(cert, bundle, &model.sys, &model.w, opts.srf_samples, &mut rng)?;
    let lyap = lyapunov_check(cert, &ctrl, &model.sys, &model.w, opts.lyapunov_samples, false, &mut rng)?;
    let lmi = crate::terminal::DecreaseLmi::new(bundle, &model.sys, &cert.gains, &cert.q_x, &cert.q_u, cert.cost.epsilon)?;
    let lmi_slack = (0..model.sys.n_delta())
        .map(|j| crate::linalg::min_eigenvalue(&lmi.vertex_matrix(j, &cert.cost.q_n)).unwrap_or(f64::NEG_INFINITY))
        .fold(f64::INFINITY, f64::min);
    Ok(VerificationReport {
        inclusion_failures: inclusions.iter().filter(|c| !c.included).count(),
        inclusion_worst_margin: inclusions.iter().map(|c| c.worst_margin).fold(f64::NEG_INFINITY, f64::max),
        farkas_residuals: farkas,
        srf_samples: srf.samples,
        srf_failures: srf.failures,
        srf_worst_margin: srf.worst_margin,
        lyapunov_samples: lyap.samples,
        lyapunov_failures: lyap.failures,
        lyapunov_worst_margin: lyap.worst_margin,
        worst_margin: srf.worst_margin.max(lyap.worst_margin),
        lmi_slack,
        lmi_certified: lmi_slack >= cert.cost.p_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(r: f64) -> Polytope {
        Polytope::boxed(2, r)
    }

    #[test]
    fn identity_pair() {
        let p = boxed(1.0);
        let r = farkas_residuals(&Matrix::identity(4, 4), &p, &p).unwrap();
        assert_eq!((r.eq_resid, r.ineq_resid, r.negativity), (0.0, 0.0, 0.0));
    }

    #[test]
    fn scaled_pair() {
        let inner = Polytope { h: Matrix::from_row_slice(2, 1, &[1.0, -1.0]), rhs: Vector::from_row_slice(&[1.0, 1.0]) };
        let outer = Polytope { h: Matrix::from_row_slice(2, 1, &[0.5, -0.5]), rhs: Vector::from_row_slice(&[1.0, 1.0]) };
        let r = farkas_residuals(&(Matrix::identity(2, 2) * 0.5), &inner, &outer).unwrap();
        assert_eq!(r.eq_resid, 0.0);
        assert_eq!(r.ineq_resid, -0.5);
        assert!(r.ok());
    }

    #[test]
    fn box_containment() {
        let c = contains(&boxed(2.0), &boxed(1.0)).unwrap();
        assert!(c.included && c.witness.is_none());
        let c = contains(&boxed(1.0), &boxed(2.0)).unwrap();
        assert!(!c.included);
        assert!(c.witness.unwrap().amax() > 1.0);
        let empty = Polytope { h: Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]), rhs: Vector::from_row_slice(&[-1.0, -1.0]) };
        assert!(contains(&boxed(1.0), &empty).unwrap().empty_inner);
    }

    #[test]
    fn dual_multipliers_certify_inclusion() {
        let lambda = farkas_multipliers(&boxed(2.0), &boxed(1.0)).unwrap().unwrap();
        assert!(farkas_residuals(&lambda, &boxed(1.0), &boxed(2.0)).unwrap().ok());
        let lambda = farkas_multipliers(&boxed(1.0), &boxed(2.0)).unwrap().unwrap();
        assert!(!farkas_residuals(&lambda, &boxed(2.0), &boxed(1.0)).unwrap().ok());
    }

    #[test]
    fn report_round_trip() {
        let r = VerificationReport {
            farkas_residuals: vec![FarkasResiduals { eq_resid: 1e-9, ineq_resid: -0.5, negativity: 0.0 }],
            inclusion_failures: 0,
            inclusion_worst_margin: -0.1,
            srf_samples: 10,
            srf_failures: 0,
            srf_worst_margin: -0.2,
            lyapunov_samples: 5,
            lyapunov_failures: 0,
            lyapunov_worst_margin: -0.3,
            worst_margin: -0.2,
            lmi_slack: 0.01,
            lmi_certified: true,
        };
        assert!(r.is_valid());
        assert_eq!(VerificationReport::from_toml(&r.to_toml()).unwrap(), r);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    /// Bounded polytope: random rows with positive offsets plus a box.
    fn polytope(dim: usize) -> impl Strategy<Value = Polytope> {
        (0usize..=4).prop_flat_map(move |extra| {
            (
                prop::collection::vec(-1.0f64..1.0, extra * dim),
                prop::collection::vec(0.2f64..1.5, extra),
                prop::collection::vec(0.3f64..2.0, 2 * dim),
            )
                .prop_map(move |(rows, offs, box_r)| {
                    let m = extra + 2 * dim;
                    let mut h = Matrix::zeros(m, dim);
                    let mut rhs = Vector::zeros(m);
                    for i in 0..extra {
                        for j in 0..dim {
                            h[(i, j)] = rows[i * dim + j];
                        }
                        rhs[i] = offs[i];
                    }
                    for j in 0..dim {
                        h[(extra + 2 * j, j)] = 1.0;
                        h[(extra + 2 * j + 1, j)] = -1.0;
                        rhs[extra + 2 * j] = box_r[2 * j];
                        rhs[extra + 2 * j + 1] = box_r[2 * j + 1];
                    }
                    Polytope { h, rhs }
                })
        })
    }

    fn pair() -> impl Strategy<Value = (Polytope, Polytope)> {
        (2usize..=3).prop_flat_map(|d| (polytope(d), polytope(d)))
    }

    /// Vertices by enumerating every square subsystem of the rows.
    fn vertices(p: &Polytope) -> Vec<Vector> {
        let (m, n) = (p.h.nrows(), p.dim());
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a = Matrix::from_fn(n, n, |r, c| p.h[(idx[r], c)]);
            let b = Vector::from_iterator(n, idx.iter().map(|&i| p.rhs[i]));
            if a.determinant().abs() > 1e-9 {
                if let Some(x) = a.lu().solve(&b) {
                    if p.contains_point(&x, 1e-9) {
                        out.push(x);
                    }
                }
            }
            let Some(k) = (0..n).rev().find(|&k| idx[k] < m - n + k) else { break };
            idx[k] += 1;
            for j in k + 1..n {
                idx[j] = idx[j - 1] + 1;
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn support_oracle_matches_vertex_enumeration((outer, inner) in pair()) {
            let verts = vertices(&inner);
            prop_assert!(!verts.is_empty());
            let exact = verts.iter().map(|v| (&outer.h * v - &outer.rhs).max()).fold(f64::NEG_INFINITY, f64::max);
            let c = contains(&outer, &inner).unwrap();
            prop_assert!(!c.empty_inner);
            prop_assert!((c.worst_margin - exact).abs() <= 1e-6, "{} vs {}", c.worst_margin, exact);
            if exact > 1e-5 {
                prop_assert!(!c.included);
            }
            if exact < -1e-5 {
                prop_assert!(c.included);
            }
        }

        #[test]
        fn farkas_certificate_implies_containment((outer, inner) in pair()) {
            let lambda = farkas_multipliers(&outer, &inner).unwrap().unwrap();
            let r = farkas_residuals(&lambda, &inner, &outer).unwrap();
            prop_assert!(r.eq_resid <= 1e-6 && r.negativity == 0.0);
            if r.ok() {
                for v in vertices(&inner) {
                    prop_assert!(outer.contains_point(&v, 1e-5));
                }
            }
        }
    }
}
