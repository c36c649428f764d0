//! Terminal set and terminal cost.

use rayon::prelude::*;

use crate::linalg::{self, sym_eig, LinalgError, Matrix, SymEig, Vector};
use crate::model::{ConstraintSet, UncertainSystem};
use crate::prediction::{build_gain_matrices, stage_weight, GainSet, PredictionBundle, PredictionError};

pub const P_MARGIN: f64 = 1e-6;
const MIN_EIGENVALUE: f64 = 1e-6;
const ASCENT_ITERATIONS: usize = 5000;

#[derive(Debug, thiserror::Error)]
pub enum TerminalError {
    #[error("terminal feedback: {0}")]
    Unstabilizable(#[from] LinalgError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error("terminal cost decrease condition infeasible: best margin {:.3e} below {:.1e}", .best.slack, .best.p_margin)]
    InfeasibleLmi { best: Box<TerminalCost>, obstruction: Option<Vector> },
}

/// `{x : Y x ≤ z}` built from nested constraint rows under the LQR feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSet {
    pub y: Matrix,
    pub z: Vector,
    pub k_y: Matrix,
    pub k_prime: usize,
    pub p_dare: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub q_n: Matrix,
    pub epsilon: f64,
    pub p_margin: f64,
    /// `min_j λ_min(𝐒ᵀQ_s𝐒 − (1+ε)𝐂_KʲᵀQ_s𝐂_Kʲ)`; the decrease condition holds iff `slack ≥ p_margin`.
    pub slack: f64,
}

impl TerminalCost {
    pub fn certified(&self) -> bool {
        self.slack >= self.p_margin
    }
}

pub fn build_terminal_set(
    sys: &UncertainSystem,
    c: &ConstraintSet,
    k_prime: usize,
    q_x: &Matrix,
    q_u: &Matrix,
) -> Result<TerminalSet, TerminalError> {
    let dare = linalg::solve_dare(&sys.a, &sys.b, q_x, q_u)?;
    let k_y = -&dare.k;
    let a_k = &sys.a + &sys.b * &k_y;
    let fg = &c.f + &c.g * &k_y;
    let nc = c.n_c();
    let nx = sys.n_x();
    let mut y = Matrix::zeros((k_prime + 1) * nc, nx);
    let mut z = Vector::zeros((k_prime + 1) * nc);
    let mut power = Matrix::identity(nx, nx);
    for i in 0..=k_prime {
        y.view_mut((i * nc, 0), (nc, nx)).copy_from(&(&fg * &power));
        z.rows_mut(i * nc, nc).copy_from(&c.b);
        power = &a_k * power;
    }
    Ok(TerminalSet { y, z, k_y, k_prime, p_dare: dare.p })
}

/// The vertex matrices `G_j(Q_N)`, stored as the `Q_N`-free part plus the
/// rows of `𝐒` and `𝐂_Kʲ` that carry the terminal state.
pub struct DecreaseLmi {
    base: Vec<Matrix>,
    s_n: Matrix,
    c_n: Vec<Matrix>,
    factor: f64,
}

impl DecreaseLmi {
    pub fn new(
        bundle: &PredictionBundle,
        sys: &UncertainSystem,
        gains: &[GainSet],
        q_x: &Matrix,
        q_u: &Matrix,
        epsilon: f64,
    ) -> Result<Self, PredictionError> {
        let nx = bundle.n_x;
        let q0 = stage_weight(q_x, &Matrix::zeros(nx, nx), q_u, bundle.n);
        let sts = bundle.s_mat.transpose() * &q0 * &bundle.s_mat;
        let factor = 1.0 + epsilon;
        let mut base = Vec::new();
        let mut c_n = Vec::new();
        for (j, g) in gains.iter().enumerate() {
            let (c_k, _) = build_gain_matrices(bundle, g, sys, j)?;
            base.push(&sts - c_k.transpose() * &q0 * &c_k * factor);
            c_n.push(c_k.rows(bundle.n * nx, nx).into_owned());
        }
        Ok(DecreaseLmi { base, s_n: bundle.state_rows(bundle.n), c_n, factor })
    }

    pub fn vertex_matrix(&self, j: usize, q_n: &Matrix) -> Matrix {
        &self.base[j] + self.s_n.transpose() * q_n * &self.s_n
            - self.c_n[j].transpose() * q_n * &self.c_n[j] * self.factor
    }

    /// `φ(Q_N)` with the minimizing vertex and eigenvector.
    pub fn margin(&self, q_n: &Matrix) -> (f64, usize, Vector) {
        let eigs: Vec<SymEig> = (0..self.base.len())
            .into_par_iter()
            .map(|j| sym_eig(&symmetrize(&self.vertex_matrix(j, q_n))).expect("vertex matrix is symmetric"))
            .collect();
        let (j, e) = eigs.iter().enumerate()
            .min_by(|a, b| a.1.min().total_cmp(&b.1.min()))
            .expect("at least one vertex");
        (e.min(), j, e.eigenvectors.column(0).into_owned())
    }

    fn subgradient(&self, j: usize, v: &Vector) -> Matrix {
        let sv = &self.s_n * v;
        let cv = &self.c_n[j] * v;
        &sv * sv.transpose() - &cv * cv.transpose() * self.factor
    }
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn project(q: &Matrix) -> Matrix {
    let e = sym_eig(&symmetrize(q)).expect("symmetric");
    let clipped = SymEig {
        eigenvalues: e.eigenvalues.map(|l| l.max(MIN_EIGENVALUE)),
        eigenvectors: e.eigenvectors,
    };
    symmetrize(&clipped.reconstruct())
}

/// Projected subgradient ascent on `φ(Q_N)` from `p_init`, then a pull back
/// toward `p_init` that keeps `φ ≥ δ`.
pub fn synthesize_terminal_cost(
    bundle: &PredictionBundle,
    sys: &UncertainSystem,
    gains: &[GainSet],
    q_x: &Matrix,
    q_u: &Matrix,
    epsilon: f64,
    p_init: &Matrix,
) -> Result<TerminalCost, TerminalError> {
    let lmi = DecreaseLmi::new(bundle, sys, gains, q_x, q_u, epsilon)?;
    let start = project(p_init);
    let mut q = start.clone();
    let (mut phi, mut j, mut v) = lmi.margin(&q);
    let mut best = (phi, q.clone());
    let step0 = 0.1 * (1.0 + start.norm());
    for k in 0..ASCENT_ITERATIONS {
        if phi >= P_MARGIN {
            break;
        }
        let g = lmi.subgradient(j, &v);
        let gn = g.norm();
        if gn <= 1e-14 {
            break;
        }
        q = project(&(&q + g * (step0 / ((k + 1) as f64).sqrt() / gn)));
        (phi, j, v) = lmi.margin(&q);
        if phi > best.0 {
            best = (phi, q.clone());
        }
    }
    let (best_phi, best_q) = best;
    if best_phi < P_MARGIN {
        let (_, j, v) = lmi.margin(&best_q);
        let flat = lmi.subgradient(j, &v).norm() <= 1e-12 * (1.0 + v.norm());
        return Err(TerminalError::InfeasibleLmi {
            best: Box::new(TerminalCost { q_n: best_q, epsilon, p_margin: P_MARGIN, slack: best_phi }),
            obstruction: flat.then_some(v),
        });
    }

    // smallest θ with φ(θ Q + (1 − θ) P_init) ≥ δ; φ is concave so the feasible θ form an interval containing 1
    let blend = |theta: f64| &best_q * theta + &start * (1.0 - theta);
    let (mut lo, mut hi) = (0.0, 1.0);
    if lmi.margin(&blend(0.0)).0 >= P_MARGIN {
        hi = 0.0;
    } else {
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if lmi.margin(&blend(mid)).0 >= P_MARGIN {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    let q_n = symmetrize(&blend(hi));
    let slack = lmi.margin(&q_n).0;
    Ok(TerminalCost { q_n, epsilon, p_margin: P_MARGIN, slack })
}

/// A nonzero `s` with `𝐂_Kʲ s` a pure shift of `s` and zero terminal state,
/// which makes the decrease condition unsatisfiable for every `Q_N`.
///
/// Exists when the nominal map `(û_1, …, û_{N−1}) ↦ x̂_N` (with `x = 0`,
/// `û_0 = 0`) has a nontrivial kernel, i.e. `(N − 1)·n_u > n_x` generically.
pub fn shift_invariant_direction(bundle: &PredictionBundle) -> Option<Vector> {
    let (n, nx, nu) = (bundle.n, bundle.n_x, bundle.n_u);
    if n < 2 {
        return None;
    }
    let reach = bundle.state_rows(n).columns(nx + nu, (n - 1) * nu).into_owned();
    let gram = reach.transpose() * &reach;
    let e = sym_eig(&symmetrize(&gram)).ok()?;
    if e.eigenvalues[0] > 1e-12 * (1.0 + e.eigenvalues.amax()) {
        return None;
    }
    let mut s = Vector::zeros(bundle.n_s());
    s.rows_mut(nx + nu, (n - 1) * nu).copy_from(&e.eigenvectors.column(0));
    Some(s)
}
