//! Offline synthesis of tightenings, feedback gains and Farkas multipliers.
//!
//! The bilinear design problem is solved by alternating two convex steps:
//! a multiplier step (gains and multipliers with the tightening fixed) and a
//! tightening step (tightening, ROA radius and vertex inputs with the
//! multipliers and gains fixed).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{block_diag, Matrix, Vector};
use crate::model::{from_rows, to_rows, Model, Polytope, UncertainSystem};
use crate::prediction::{build_bundle, build_gain_matrices, GainSet, PredictionBundle, PredictionError};
use crate::solver::{self, solve_block_lp, solve_qp, BlockLp, LpBlock, QpProblem, QpStatus};
use crate::terminal::{build_terminal_set, synthesize_terminal_cost, TerminalCost, TerminalError, TerminalSet};

pub const FEASIBILITY_TOL: f64 = 1e-7;
const ALPHA_MIN: f64 = 1e-9;
const BLOCK_LP_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("model fails validation: {0}")]
    InvalidModel(String),
    #[error("initial tightening infeasible (worst multiplier slack {sigma_max:.3e} at scale {scale})")]
    InitialGuessInfeasible { sigma_max: f64, scale: f64 },
    #[error("no progress: {0}")]
    NoProgress(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error("certificate file: {0}")]
    Format(String),
    #[error("certificate was produced for a different model (fingerprint {found}, expected {expected})")]
    FingerprintMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<solver::SolverError> for SynthesisError {
    fn from(e: solver::SolverError) -> Self {
        SynthesisError::Solver(e.to_string())
    }
}

impl From<crate::model::ModelError> for SynthesisError {
    fn from(e: crate::model::ModelError) -> Self {
        SynthesisError::Solver(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub n: usize,
    pub k_prime: usize,
    pub mu: f64,
    pub epsilon: f64,
    pub init_scale: f64,
    pub max_alternations: usize,
    pub convergence_tol: f64,
    pub q_x: Matrix,
    pub q_u: Matrix,
}

impl SynthesisConfig {
    /// Horizon 5, nesting depth 2, `μ = 2`, `ε = 0.1`, identity weights.
    pub fn standard(n_x: usize, n_u: usize) -> Self {
        SynthesisConfig {
            n: 5,
            k_prime: 2,
            mu: 2.0,
            epsilon: 0.1,
            init_scale: 1.7,
            max_alternations: 30,
            convergence_tol: 1e-6,
            q_x: Matrix::identity(n_x, n_x),
            q_u: Matrix::identity(n_u, n_u),
        }
    }

    pub fn check(&self) -> Result<(), SynthesisError> {
        if self.n == 0 || !(self.mu > 0.0) || !(self.epsilon > 0.0) || !(self.init_scale >= 1.0) {
            return Err(SynthesisError::InvalidModel(
                "configuration requires n ≥ 1, mu > 0, epsilon > 0, init_scale ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub n: usize,
    pub mu: f64,
    pub q_x: Matrix,
    pub q_u: Matrix,
    pub tightenings: Vector,
    pub gains: Vec<GainSet>,
    pub multipliers: Vec<Matrix>,
    pub terminal: TerminalSet,
    pub cost: TerminalCost,
    pub alpha: f64,
    pub objective: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlternationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub sigma_max: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub certificate: Certificate,
    pub history: Vec<AlternationRecord>,
    pub initial_scale: f64,
    /// Present when the terminal decrease condition could not be met; the
    /// certificate then carries the best terminal weight found.
    pub lmi_obstruction: Option<Vector>,
}

#[derive(Debug, Clone)]
pub struct MultiplierStep {
    pub gains: Vec<GainSet>,
    pub multipliers: Vec<Matrix>,
    /// Worst relaxation `σ` over vertices; `≤ 0` certifies feasibility.
    pub max_residual: f64,
}

#[derive(Debug, Clone)]
pub struct TighteningStep {
    pub t: Vector,
    pub gains: Vec<GainSet>,
    pub alpha: f64,
    pub objective: f64,
}

/// Design data shared by every step: the model, the bundle and the terminal set.
pub struct SynthesisProblem<'a> {
    pub sys: &'a UncertainSystem,
    pub w: &'a Polytope,
    pub bundle: PredictionBundle,
    pub terminal: TerminalSet,
    pub cfg: SynthesisConfig,
    jacobians: Vec<GainJacobian>,
}

/// Affine map `g ↦ 𝐇_xu[𝐂_K(g) 𝐂_M(g)]`, one row block per constraint row.
struct GainJacobian {
    offset: Matrix,
    slope: Matrix,
}

impl GainJacobian {
    fn new(bundle: &PredictionBundle, sys: &UncertainSystem, vertex: usize) -> Result<Self, PredictionError> {
        let (n, nx, nu) = (bundle.n, bundle.n_x, bundle.n_u);
        let len = GainSet::len(n, nx, nu);
        let image = |g: &GainSet| -> Result<Matrix, PredictionError> {
            let (c_k, c_m) = build_gain_matrices(bundle, g, sys, vertex)?;
            Ok(&bundle.h_xu * crate::linalg::hstack(&[&c_k, &c_m]))
        };
        let offset = image(&GainSet::zeros(n, nx, nu))?;
        let rows = offset.nrows();
        let cols = offset.ncols();
        let mut slope = Matrix::zeros(rows * cols, len);
        for k in 0..len {
            let mut e = Vector::zeros(len);
            e[k] = 1.0;
            let d = image(&GainSet::from_vec(&e, n, nx, nu))? - &offset;
            for r in 0..rows {
                for c in 0..cols {
                    slope[(r * cols + c, k)] = d[(r, c)];
                }
            }
        }
        Ok(GainJacobian { offset, slope })
    }

    fn row_offset(&self, r: usize) -> Vector {
        self.offset.row(r).transpose()
    }

    fn row_slope(&self, r: usize) -> Matrix {
        let cols = self.offset.ncols();
        self.slope.rows(r * cols, cols).into_owned()
    }
}

impl<'a> SynthesisProblem<'a> {
    pub fn new(model: &'a Model, cfg: SynthesisConfig) -> Result<Self, SynthesisError> {
        cfg.check()?;
        let report = model.validate();
        if !report.is_ok() {
            return Err(SynthesisError::InvalidModel(report.failures.join("; ")));
        }
        let terminal = build_terminal_set(&model.sys, &model.c, cfg.k_prime, &cfg.q_x, &cfg.q_u)?;
        let bundle = build_bundle(&model.sys, &model.c, &terminal.y, &terminal.z, cfg.n)?;
        let jacobians = (0..model.sys.n_delta())
            .into_par_iter()
            .map(|j| GainJacobian::new(&bundle, &model.sys, j))
            .collect::<Result<_, _>>()?;
        Ok(SynthesisProblem { sys: &model.sys, w: &model.w, bundle, terminal, cfg, jacobians })
    }

    fn n_gains(&self) -> usize {
        GainSet::len(self.bundle.n, self.bundle.n_x, self.bundle.n_u)
    }

    /// `blockdiag(𝐇_xu𝐒, H_w)` and `[𝐛 − 𝐭; h_w]`.
    fn farkas_data(&self, t: &Vector) -> (Matrix, Vector) {
        let e = block_diag(&[&self.bundle.constraint_matrix(), &self.w.h]);
        let rhs = crate::linalg::stack_vectors(&[&(&self.bundle.b_stack - t), &self.w.rhs]);
        (e, rhs)
    }
}

/// Row-wise support function `max_{w∈W} m_r w`.
fn support_rows(w: &Polytope, m: &Matrix) -> Result<Vector, SynthesisError> {
    let rows: Vec<f64> = (0..m.nrows())
        .into_par_iter()
        .map(|r| match w.support(&m.row(r).transpose()) {
            Ok(Some((v, _))) => Ok(v),
            Ok(None) => Err(SynthesisError::InvalidModel("disturbance set support is unbounded".into())),
            Err(e) => Err(e.into()),
        })
        .collect::<Result<_, _>>()?;
    Ok(Vector::from_vec(rows))
}

/// Disturbance-propagation tightening under the terminal feedback, ignoring
/// the perturbation channel, inflated by `scale`.
pub fn initial_guess(problem: &SynthesisProblem, c: &crate::model::ConstraintSet, scale: f64) -> Result<Vector, SynthesisError> {
    let b = &problem.bundle;
    let sys = problem.sys;
    let k = &problem.terminal.k_y;
    let a_k = &sys.a + &sys.b * k;
    let fg = &c.f + &c.g * k;
    let mut t = Vector::zeros(b.n_rows());
    let mut acc_fg = Vector::zeros(b.n_c);
    let mut acc_y = Vector::zeros(problem.terminal.y.nrows());
    let mut power = Matrix::identity(b.n_x, b.n_x);
    for i in 1..=b.n {
        // error propagated over l = i − 1 steps
        let e = &power * &sys.b_w;
        acc_fg += support_rows(problem.w, &(&fg * &e))?;
        acc_y += support_rows(problem.w, &(&problem.terminal.y * &e))?;
        if i < b.n {
            t.rows_mut(i * b.n_c, b.n_c).copy_from(&acc_fg);
        } else {
            t.rows_mut(b.n * b.n_c, acc_y.len()).copy_from(&acc_y);
        }
        power = &a_k * power;
    }
    Ok(t * scale)
}

/// Joint LP per vertex over multipliers, gains and a uniform relaxation `σ`
/// of the Farkas inequality, followed by per-row refinement of the
/// multipliers with the gains fixed.
pub fn solve_multiplier_step(problem: &SynthesisProblem, t: &Vector) -> Result<MultiplierStep, SynthesisError> {
    let b = &problem.bundle;
    if (&b.b_stack - t).iter().any(|&v| v < 0.0) {
        return Err(SynthesisError::NoProgress("tightening exceeds the constraint bounds".into()));
    }
    let (e, rhs) = problem.farkas_data(t);
    let et = e.transpose();
    let n_lambda = e.nrows();
    let n_eq = e.ncols();
    let n_g = problem.n_gains();
    let btr = &b.b_stack - t;

    let mut gains = Vec::new();
    let mut sigmas = Vec::new();
    for jac in &problem.jacobians {
        let blocks: Vec<LpBlock> = (0..b.n_rows())
            .map(|r| {
                let mut a = Matrix::zeros(n_eq + 1, n_lambda + 1);
                a.view_mut((0, 0), (n_eq, n_lambda)).copy_from(&et);
                a.view_mut((n_eq, 0), (1, n_lambda)).copy_from(&rhs.transpose());
                a[(n_eq, n_lambda)] = 1.0;
                let mut bm = Matrix::zeros(n_eq + 1, n_g + 1);
                bm.view_mut((0, 0), (n_eq, n_g)).copy_from(&(-jac.row_slope(r)));
                bm[(n_eq, n_g)] = -1.0;
                let mut d = Vector::zeros(n_eq + 1);
                d.rows_mut(0, n_eq).copy_from(&jac.row_offset(r));
                d[n_eq] = btr[r];
                LpBlock { a, b: bm, d, c: Vector::zeros(n_lambda + 1) }
            })
            .collect();
        let mut c_y = Vector::zeros(n_g + 1);
        c_y[n_g] = 1.0;
        let sol = solve_block_lp(&BlockLp { blocks, c_y }, BLOCK_LP_TOL)?;
        if !sol.converged {
            let level = if sol.primal_residual.max(sol.gap) > 1e-5 { log::Level::Warn } else { log::Level::Debug };
            log::log!(
                level,
                "multiplier LP stopped after {} iterations (primal {:.1e}, dual {:.1e}, gap {:.1e})",
                sol.iterations, sol.primal_residual, sol.dual_residual, sol.gap
            );
        }
        gains.push(GainSet::from_vec(&sol.y.rows(0, n_g).into_owned(), b.n, b.n_x, b.n_u));
        sigmas.push(sol.y[n_g]);
    }

    let mut multipliers = refine_multipliers(problem, t, &gains)?;
    // the refined multipliers give the exact worst relaxation for these gains
    let relaxation = |lam: &Matrix| (lam * &rhs - &btr).max();
    let mut residuals: Vec<f64> = multipliers.iter().map(relaxation).collect();
    log::debug!("joint LP relaxations {sigmas:?}, refined {residuals:?}");
    if residuals.iter().any(|&r| r > FEASIBILITY_TOL) {
        let candidate = error_feedback_gains(problem);
        let lams = refine_multipliers(problem, t, &candidate)?;
        for (j, lam) in lams.into_iter().enumerate() {
            let r = relaxation(&lam);
            if r < residuals[j] {
                residuals[j] = r;
                gains[j] = candidate[j].clone();
                multipliers[j] = lam;
            }
        }
    }
    let max_residual = residuals.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(MultiplierStep { gains, multipliers, max_residual })
}

/// Gains that feed the one-step prediction error back through the terminal
/// controller: `Kʲ = K_Y`, `M_i = K_Y A_Kⁱ`, `K_{Δ,i} = K_Y A_Kⁱ B_p Δʲ [D_x D_u]`.
pub fn error_feedback_gains(problem: &SynthesisProblem) -> Vec<GainSet> {
    let (b, sys) = (&problem.bundle, problem.sys);
    let k = &problem.terminal.k_y;
    let a_k = &sys.a + &sys.b * k;
    let dxu = crate::linalg::hstack(&[&sys.d_x, &sys.d_u]);
    sys.deltas
        .iter()
        .map(|delta| {
            let mut g = GainSet::zeros(b.n, b.n_x, b.n_u);
            g.k_term = k.clone();
            let mut power = Matrix::identity(b.n_x, b.n_x);
            for i in 0..b.n {
                let m_i = k * &power;
                g.k_delta.rows_mut(i * b.n_u, b.n_u).copy_from(&(&m_i * &sys.b_p * delta * &dxu));
                g.m_gains.rows_mut(i * b.n_u, b.n_u).copy_from(&m_i);
                power = &a_k * power;
            }
            g
        })
        .collect()
}

/// Least-cost multipliers per row: the duals of the support LPs over `𝐏₀`
/// and `W` in the direction of that row of `𝐇_xu[𝐂_K 𝐂_M]`.
pub fn refine_multipliers(problem: &SynthesisProblem, t: &Vector, gains: &[GainSet]) -> Result<Vec<Matrix>, SynthesisError> {
    let b = &problem.bundle;
    let h0 = b.constraint_matrix();
    let p0 = Polytope { h: h0.clone(), rhs: &b.b_stack - t };
    let n_s = b.n_s();
    let n_rows = b.n_rows();
    let m_w = problem.w.h.nrows();
    gains
        .par_iter()
        .enumerate()
        .map(|(j, g)| {
            let (c_k, c_m) = build_gain_matrices(b, g, problem.sys, j)?;
            let target_s = &b.h_xu * c_k;
            let target_w = &b.h_xu * c_m;
            let rows: Vec<Vector> = (0..n_rows)
                .into_par_iter()
                .map(|r| {
                    let l1 = support_duals(&p0, &target_s.row(r).transpose())?;
                    let l2 = support_duals(problem.w, &target_w.row(r).transpose())?;
                    Ok(crate::linalg::stack_vectors(&[&l1, &l2]))
                })
                .collect::<Result<_, SynthesisError>>()?;
            let mut lam = Matrix::zeros(n_rows, n_rows + m_w);
            for (r, v) in rows.iter().enumerate() {
                lam.row_mut(r).copy_from(&v.transpose());
            }
            debug_assert_eq!(h0.ncols(), n_s);
            Ok(lam)
        })
        .collect()
}

/// Optimal multipliers `λ ≥ 0` with `Hᵀλ = c` minimizing `rhsᵀλ`.
fn support_duals(p: &Polytope, c: &Vector) -> Result<Vector, SynthesisError> {
    if c.amax() == 0.0 {
        return Ok(Vector::zeros(p.h.nrows()));
    }
    let sol = solve_qp(&QpProblem::lp(-c).with_inequalities(p.h.clone(), p.rhs.clone()))?;
    if sol.status != QpStatus::Optimal {
        return Err(SynthesisError::Solver(format!(
            "support LP ended with {:?} (kkt {:.2e}, |c| {:.2e}, {} iterations)",
            sol.status, sol.kkt_residual, c.amax(), sol.iterations
        )));
    }
    let raw = sol.in_duals.map(|v| v.max(0.0));
    let scale = 1.0 + sol.x.amax();
    let score = |lam: &Vector| {
        let eq = (p.h.transpose() * lam - c).amax();
        (eq * scale).max(lam.dot(&p.rhs) - c.dot(&sol.x))
    };
    let mut best = raw.clone();
    for cand in [basis_duals(p, c, &sol.x, &raw), polish_duals(p, c, &sol.x, &raw)].into_iter().flatten() {
        if score(&cand) < score(&best) {
            best = cand;
        }
    }
    Ok(best)
}

/// Exact duals of a vertex basis chosen from the rows most active at `x`.
fn basis_duals(p: &Polytope, c: &Vector, x: &Vector, lam: &Vector) -> Option<Vector> {
    let n = p.h.ncols();
    let slack = &p.rhs - &p.h * x;
    let mut order: Vec<usize> = (0..lam.len()).collect();
    order.sort_by(|&i, &j| (slack[i] - lam[i]).total_cmp(&(slack[j] - lam[j])));
    let mut basis = Vec::with_capacity(n);
    let mut ortho: Vec<Vector> = Vec::with_capacity(n);
    for i in order {
        if basis.len() == n {
            break;
        }
        let row = p.h.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row / norm;
        for q in &ortho {
            v -= q * q.dot(&v);
        }
        let r = v.norm();
        if r > 1e-8 {
            ortho.push(v / r);
            basis.push(i);
        }
    }
    if basis.len() < n {
        return None;
    }
    let hb = Matrix::from_fn(n, n, |r, k| p.h[(basis[k], r)]);
    let lb = hb.lu().solve(c)?;
    if lb.iter().any(|&v| v < -1e-9 * (1.0 + c.amax())) {
        return None;
    }
    let mut out = Vector::zeros(lam.len());
    for (k, &i) in basis.iter().enumerate() {
        out[i] = lb[k].max(0.0);
    }
    Some(out)
}

/// Drops multipliers of rows inactive at `x` and restores `Hᵀλ = c` by the
/// minimum-norm correction on the active rows.
fn polish_duals(p: &Polytope, c: &Vector, x: &Vector, lam: &Vector) -> Option<Vector> {
    let slack = &p.rhs - &p.h * x;
    let active: Vec<usize> = (0..lam.len()).filter(|&i| lam[i] > 0.0 && slack[i] <= lam[i]).collect();
    if active.is_empty() {
        return None;
    }
    let ha = Matrix::from_fn(p.h.ncols(), active.len(), |r, k| p.h[(active[k], r)]);
    let la = Vector::from_iterator(active.len(), active.iter().map(|&i| lam[i]));
    let resid = c - &ha * &la;
    let delta = ha.svd(true, true).solve(&resid, 1e-12).ok()?;
    let mut out = Vector::zeros(lam.len());
    for (k, &i) in active.iter().enumerate() {
        out[i] = (la[k] + delta[k]).max(0.0);
    }
    Some(out)
}

/// QP over `(𝐭, α, 𝐮¹…𝐮^{2n_x})` with multipliers and gains fixed.
pub fn solve_tightening_step(
    problem: &SynthesisProblem,
    multipliers: &[Matrix],
    gains: &[GainSet],
) -> Result<Option<TighteningStep>, SynthesisError> {
    let b = &problem.bundle;
    let (nx, nc) = (b.n_x, b.n_c);
    let n_t = b.n_rows();
    let n_in = b.n * b.n_u;
    let n_vert = 2 * nx;
    let n_var = n_t + 1 + n_vert * n_in;
    let alpha_idx = n_t;
    let mu = problem.cfg.mu;
    let m_w = problem.w.h.nrows();

    let mut h = Matrix::zeros(n_var, n_var);
    for i in 0..n_t {
        h[(i, i)] = 2.0;
    }
    let mut f = Vector::zeros(n_var);
    f[alpha_idx] = -mu;

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let eye = Matrix::identity(n_t, n_t);
    for lam in multipliers {
        let l1 = lam.columns(0, n_t);
        let l2 = lam.columns(n_t, m_w);
        let lhs = &eye - l1;
        let rhs = &lhs * &b.b_stack - l2 * &problem.w.rhs;
        for r in 0..n_t {
            let coeffs = (0..n_t).filter(|&c| lhs[(r, c)] != 0.0).map(|c| (c, lhs[(r, c)])).collect();
            rows.push((coeffs, rhs[r]));
        }
    }
    for r in 0..n_t {
        rows.push((vec![(r, 1.0)], b.b_stack[r]));
    }
    for r in 0..nc {
        rows.push((vec![(r, -1.0)], 0.0));
    }
    rows.push((vec![(alpha_idx, -1.0)], -ALPHA_MIN));
    let h0 = b.constraint_matrix();
    for v in 0..n_vert {
        let coord = v / 2;
        let sign = if v % 2 == 0 { 1.0 } else { -1.0 };
        let base = n_t + 1 + v * n_in;
        for r in 0..n_t {
            let mut coeffs = vec![(r, 1.0), (alpha_idx, sign * h0[(r, coord)])];
            for k in 0..n_in {
                let a = h0[(r, nx + k)];
                if a != 0.0 {
                    coeffs.push((base + k, a));
                }
            }
            rows.push((coeffs, b.b_stack[r]));
        }
    }
    let mut a_in = Matrix::zeros(rows.len(), n_var);
    let mut b_in = Vector::zeros(rows.len());
    for (i, (coeffs, rhs)) in rows.iter().enumerate() {
        for &(c, v) in coeffs {
            a_in[(i, c)] += v;
        }
        b_in[i] = *rhs;
    }
    let sol = solve_qp(&QpProblem::new(h, f).with_inequalities(a_in, b_in))?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => return Ok(None),
        s => return Err(SynthesisError::Solver(format!("tightening QP ended with {s:?}"))),
    }
    let t = sol.x.rows(0, n_t).into_owned();
    let alpha = sol.x[alpha_idx];
    Ok(Some(TighteningStep {
        objective: t.norm_squared() - mu * alpha,
        t,
        gains: gains.to_vec(),
        alpha,
    }))
}

/// Largest `α` such that the scaled `ℓ₁` vertices `±α e_i` admit input
/// sequences inside `𝐏₀`.
pub fn roa_radius(problem: &SynthesisProblem, t: &Vector) -> Result<f64, SynthesisError> {
    let b = &problem.bundle;
    let h0 = b.constraint_matrix();
    let btr = &b.b_stack - t;
    let nx = b.n_x;
    let n_in = b.n * b.n_u;
    let mut radius = f64::INFINITY;
    for v in 0..2 * nx {
        let sign = if v % 2 == 0 { 1.0 } else { -1.0 };
        let mut a = Matrix::zeros(h0.nrows(), 1 + n_in);
        a.column_mut(0).copy_from(&(h0.column(v / 2) * sign));
        a.view_mut((0, 1), (h0.nrows(), n_in)).copy_from(&h0.columns(nx, n_in));
        let mut f = Vector::zeros(1 + n_in);
        f[0] = -1.0;
        let sol = solve_qp(&QpProblem::lp(f).with_inequalities(a, btr.clone()))?;
        if sol.status != QpStatus::Optimal {
            return Err(SynthesisError::Solver(format!("ROA radius LP ended with {:?}", sol.status)));
        }
        radius = radius.min(sol.x[0]);
    }
    Ok(radius)
}

/// Run the full offline design.
pub fn synthesize(model: &Model, cfg: SynthesisConfig) -> Result<SynthesisOutcome, SynthesisError> {
    let problem = SynthesisProblem::new(model, cfg)?;
    let cfg = &problem.cfg;

    let mut scale = cfg.init_scale;
    let mut start = None;
    let mut last_sigma = f64::INFINITY;
    while scale <= 8.0 * cfg.init_scale + 1e-12 {
        let t0 = initial_guess(&problem, &model.c, scale)?;
        if (&problem.bundle.b_stack - &t0).iter().all(|&v| v >= 0.0) {
            let step = solve_multiplier_step(&problem, &t0)?;
            log::info!("initial guess at scale {scale}: worst relaxation {:.3e}", step.max_residual);
            last_sigma = step.max_residual;
            if step.max_residual <= FEASIBILITY_TOL {
                start = Some((t0, step));
                break;
            }
        } else {
            log::info!("initial guess at scale {scale} exceeds the constraint bounds");
        }
        scale *= 2.0;
    }
    let Some((mut t, mut step)) = start else {
        return Err(SynthesisError::InitialGuessInfeasible { sigma_max: last_sigma, scale: scale / 2.0 });
    };
    let initial_scale = scale;

    let mut alpha = roa_radius(&problem, &t)?;
    let mut objective = t.norm_squared() - cfg.mu * alpha;
    let mut history = vec![AlternationRecord { iteration: 0, objective, sigma_max: step.max_residual, alpha }];
    let mut gains = step.gains.clone();

    for it in 1..=cfg.max_alternations {
        let Some(next) = solve_tightening_step(&problem, &step.multipliers, &step.gains)? else {
            log::warn!("tightening QP infeasible at alternation {it}; keeping previous iterate");
            break;
        };
        if next.objective > objective + 1e-9 * (1.0 + objective.abs()) {
            log::warn!("tightening QP did not improve the objective at alternation {it}");
            break;
        }
        let improvement = objective - next.objective;
        t = next.t;
        alpha = next.alpha;
        objective = next.objective;
        gains = next.gains;
        let candidate = solve_multiplier_step(&problem, &t)?;
        history.push(AlternationRecord { iteration: it, objective, sigma_max: candidate.max_residual, alpha });
        log::info!(
            "alternation {it}: objective {objective:.6}, alpha {alpha:.4}, worst relaxation {:.3e}",
            candidate.max_residual
        );
        if candidate.max_residual <= FEASIBILITY_TOL {
            step = candidate;
        } else {
            // keep the gains that certified the accepted tightening
            step = MultiplierStep {
                multipliers: refine_multipliers(&problem, &t, &gains)?,
                gains: gains.clone(),
                max_residual: 0.0,
            };
        }
        gains = step.gains.clone();
        if improvement < cfg.convergence_tol {
            break;
        }
    }

    let multipliers = refine_multipliers(&problem, &t, &gains)?;

    let (cost, lmi_obstruction) = match synthesize_terminal_cost(
        &problem.bundle,
        problem.sys,
        &gains,
        &cfg.q_x,
        &cfg.q_u,
        cfg.epsilon,
        &problem.terminal.p_dare,
    ) {
        Ok(cost) => (cost, None),
        Err(TerminalError::InfeasibleLmi { best, obstruction }) => {
            log::warn!(
                "terminal decrease condition infeasible; best margin {:.3e}{}",
                best.slack,
                if obstruction.is_some() { " (shift-invariant direction found)" } else { "" }
            );
            (*best, obstruction.or_else(|| Some(Vector::zeros(0))))
        }
        Err(e) => return Err(e.into()),
    };

    let certificate = Certificate {
        n: cfg.n,
        mu: cfg.mu,
        q_x: cfg.q_x.clone(),
        q_u: cfg.q_u.clone(),
        tightenings: t,
        gains,
        multipliers,
        terminal: problem.terminal.clone(),
        cost,
        alpha,
        objective,
        fingerprint: model.fingerprint(),
    };
    Ok(SynthesisOutcome { certificate, history, initial_scale, lmi_obstruction })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainFile {
    k_term: Vec<Vec<f64>>,
    m_gains: Vec<Vec<f64>>,
    k_delta: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminalFile {
    k_prime: usize,
    y: Vec<Vec<f64>>,
    z: Vec<f64>,
    k_y: Vec<Vec<f64>>,
    p_dare: Vec<Vec<f64>>,
    q_n: Vec<Vec<f64>>,
    epsilon: f64,
    p_margin: f64,
    slack: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateFile {
    fingerprint: String,
    horizon: usize,
    mu: f64,
    alpha: f64,
    objective: f64,
    q_x: Vec<Vec<f64>>,
    q_u: Vec<Vec<f64>>,
    tightenings: Vec<Vec<f64>>,
    terminal: TerminalFile,
    gains: Vec<GainFile>,
    multipliers: Vec<Vec<Vec<f64>>>,
}

fn matrix(name: &str, rows: &[Vec<f64>], ncols: usize) -> Result<Matrix, SynthesisError> {
    from_rows(name, rows, rows.len(), ncols).map_err(|e| SynthesisError::Format(e.to_string()))
}

impl Certificate {
    pub fn n_x(&self) -> usize {
        self.q_x.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.q_u.nrows()
    }

    pub fn to_toml(&self) -> String {
        let nc = (self.tightenings.len() - self.terminal.y.nrows()) / self.n;
        let mut blocks: Vec<Vec<f64>> = (0..self.n)
            .map(|i| self.tightenings.rows(i * nc, nc).iter().copied().collect())
            .collect();
        blocks.push(self.tightenings.rows(self.n * nc, self.terminal.y.nrows()).iter().copied().collect());
        let file = CertificateFile {
            fingerprint: self.fingerprint.clone(),
            horizon: self.n,
            mu: self.mu,
            alpha: self.alpha,
            objective: self.objective,
            q_x: to_rows(&self.q_x),
            q_u: to_rows(&self.q_u),
            tightenings: blocks,
            terminal: TerminalFile {
                k_prime: self.terminal.k_prime,
                y: to_rows(&self.terminal.y),
                z: self.terminal.z.iter().copied().collect(),
                k_y: to_rows(&self.terminal.k_y),
                p_dare: to_rows(&self.terminal.p_dare),
                q_n: to_rows(&self.cost.q_n),
                epsilon: self.cost.epsilon,
                p_margin: self.cost.p_margin,
                slack: self.cost.slack,
            },
            gains: self.gains.iter().map(|g| GainFile {
                k_term: to_rows(&g.k_term),
                m_gains: to_rows(&g.m_gains),
                k_delta: to_rows(&g.k_delta),
            }).collect(),
            multipliers: self.multipliers.iter().map(to_rows).collect(),
        };
        toml::to_string(&file).expect("certificate serialization cannot fail")
    }

    /// Parse a certificate and reject it unless it was made for `model`.
    pub fn from_toml(text: &str, model: &Model) -> Result<Self, SynthesisError> {
        let f: CertificateFile = toml::from_str(text).map_err(|e| SynthesisError::Format(e.to_string()))?;
        let expected = model.fingerprint();
        if f.fingerprint != expected {
            return Err(SynthesisError::FingerprintMismatch { found: f.fingerprint, expected });
        }
        let (nx, nu) = (model.sys.n_x(), model.sys.n_u());
        let n = f.horizon;
        if n == 0 || f.tightenings.len() != n + 1 {
            return Err(SynthesisError::Format("tightening blocks must number horizon + 1".into()));
        }
        let tightenings = Vector::from_vec(f.tightenings.concat());
        let n_t = tightenings.len();
        let n_lam = n_t + model.w.h.nrows();
        let gains = f.gains.iter().map(|g| {
            let gs = GainSet {
                k_term: matrix("k_term", &g.k_term, nx)?,
                m_gains: matrix("m_gains", &g.m_gains, nx)?,
                k_delta: matrix("k_delta", &g.k_delta, nx + nu)?,
            };
            gs.check(n, nx, nu).map_err(|e| SynthesisError::Format(e.to_string()))?;
            Ok(gs)
        }).collect::<Result<Vec<_>, SynthesisError>>()?;
        let multipliers = f.multipliers.iter()
            .map(|m| {
                let lam = matrix("multipliers", m, n_lam)?;
                if lam.nrows() != n_t {
                    return Err(SynthesisError::Format("multiplier rows must match the tightening length".into()));
                }
                Ok(lam)
            })
            .collect::<Result<Vec<_>, SynthesisError>>()?;
        if gains.len() != model.sys.n_delta() || multipliers.len() != model.sys.n_delta() {
            return Err(SynthesisError::Format("one gain set and multiplier matrix per vertex required".into()));
        }
        let tf = &f.terminal;
        let terminal = TerminalSet {
            y: matrix("y", &tf.y, nx)?,
            z: Vector::from_vec(tf.z.clone()),
            k_y: matrix("k_y", &tf.k_y, nx)?,
            k_prime: tf.k_prime,
            p_dare: matrix("p_dare", &tf.p_dare, nx)?,
        };
        if terminal.y.nrows() != terminal.z.len() || n_t != n * model.c.n_c() + terminal.z.len() {
            return Err(SynthesisError::Format("terminal set inconsistent with tightening length".into()));
        }
        Ok(Certificate {
            n,
            mu: f.mu,
            q_x: matrix("q_x", &f.q_x, nx)?,
            q_u: matrix("q_u", &f.q_u, nu)?,
            tightenings,
            gains,
            multipliers,
            terminal,
            cost: TerminalCost { q_n: matrix("q_n", &tf.q_n, nx)?, epsilon: tf.epsilon, p_margin: tf.p_margin, slack: tf.slack },
            alpha: f.alpha,
            objective: f.objective,
            fingerprint: f.fingerprint,
        })
    }

    pub fn read(path: &std::path::Path, model: &Model) -> Result<Self, SynthesisError> {
        Self::from_toml(&std::fs::read_to_string(path)?, model)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), SynthesisError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Prediction matrices matching this certificate.
    pub fn bundle(&self, model: &Model) -> Result<PredictionBundle, PredictionError> {
        build_bundle(&model.sys, &model.c, &self.terminal.y, &self.terminal.z, self.n)
    }
}
