//! Stacked prediction matrices over a fixed horizon.
//!
//! A decision vector `s = [x; û_0; …; û_{N−1}]` maps to the predicted
//! state-input trajectory `S s = [x̂_0; …; x̂_N; û_0; …; û_{N−1}]`.

use crate::linalg::{block_diag, hstack, kron, Matrix, Vector};
use crate::model::{ConstraintSet, UncertainSystem};

#[derive(Debug, thiserror::Error)]
pub enum PredictionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone)]
pub struct PredictionBundle {
    pub n: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_c: usize,
    pub s_mat: Matrix,
    pub s_x: Matrix,
    pub s_u: Matrix,
    pub h_xu: Matrix,
    pub b_stack: Vector,
    pub l_mat: Matrix,
    pub d_xu: Matrix,
    pub c_s: Vec<Matrix>,
    pub c_w: Vec<Matrix>,
}

/// Per-vertex feedback gains of the shifted input parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    /// Terminal state feedback `Kʲ`, `n_u × n_x`.
    pub k_term: Matrix,
    /// Disturbance feedback `[M_0; …; M_{N−1}]`, `N n_u × n_x`.
    pub m_gains: Matrix,
    /// Perturbation feedback `[K_{0,Δ}; …; K_{N−1,Δ}]`, `N n_u × (n_x + n_u)`.
    pub k_delta: Matrix,
}

impl GainSet {
    pub fn zeros(n: usize, n_x: usize, n_u: usize) -> Self {
        GainSet {
            k_term: Matrix::zeros(n_u, n_x),
            m_gains: Matrix::zeros(n * n_u, n_x),
            k_delta: Matrix::zeros(n * n_u, n_x + n_u),
        }
    }

    pub fn len(n: usize, n_x: usize, n_u: usize) -> usize {
        n_u * n_x + n * n_u * n_x + n * n_u * (n_x + n_u)
    }

    /// Row-major concatenation of `k_term`, `m_gains`, `k_delta`.
    pub fn to_vec(&self) -> Vector {
        let mut out = Vec::with_capacity(self.k_term.len() + self.m_gains.len() + self.k_delta.len());
        for m in [&self.k_term, &self.m_gains, &self.k_delta] {
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
        }
        Vector::from_vec(out)
    }

    pub fn from_vec(v: &Vector, n: usize, n_x: usize, n_u: usize) -> Self {
        let mut g = Self::zeros(n, n_x, n_u);
        let mut k = 0;
        for m in [&mut g.k_term, &mut g.m_gains, &mut g.k_delta] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)] = v[k];
                    k += 1;
                }
            }
        }
        g
    }

    pub fn check(&self, n: usize, n_x: usize, n_u: usize) -> Result<(), PredictionError> {
        if self.k_term.shape() != (n_u, n_x)
            || self.m_gains.shape() != (n * n_u, n_x)
            || self.k_delta.shape() != (n * n_u, n_x + n_u)
        {
            return Err(PredictionError::DimensionMismatch("gain set".into()));
        }
        Ok(())
    }
}

impl PredictionBundle {
    pub fn n_s(&self) -> usize {
        self.n_x + self.n * self.n_u
    }

    pub fn n_traj(&self) -> usize {
        (self.n + 1) * self.n_x + self.n * self.n_u
    }

    pub fn n_rows(&self) -> usize {
        self.h_xu.nrows()
    }

    /// Rows of `S` producing `x̂_i`.
    pub fn state_rows(&self, i: usize) -> Matrix {
        self.s_mat.rows(i * self.n_x, self.n_x).into_owned()
    }

    /// Rows of `S` producing `û_i`.
    pub fn input_rows(&self, i: usize) -> Matrix {
        self.s_mat.rows((self.n + 1) * self.n_x + i * self.n_u, self.n_u).into_owned()
    }

    /// `𝐇_xu 𝐒`, the constraint matrix of the online problem.
    pub fn constraint_matrix(&self) -> Matrix {
        &self.h_xu * &self.s_mat
    }
}

pub fn build_bundle(
    sys: &UncertainSystem,
    c: &ConstraintSet,
    y: &Matrix,
    z: &Vector,
    n: usize,
) -> Result<PredictionBundle, PredictionError> {
    let (nx, nu, nw) = (sys.n_x(), sys.n_u(), sys.n_w());
    if n == 0 {
        return Err(PredictionError::DimensionMismatch("horizon must be at least 1".into()));
    }
    if y.nrows() != z.len() || y.ncols() != nx {
        return Err(PredictionError::DimensionMismatch(format!(
            "terminal set is {}x{} with {} right-hand sides",
            y.nrows(),
            y.ncols(),
            z.len()
        )));
    }
    if c.f.ncols() != nx || c.g.ncols() != nu || c.f.nrows() != c.b.len() || c.g.nrows() != c.b.len() {
        return Err(PredictionError::DimensionMismatch("constraint set".into()));
    }
    if !sys.dimension_errors().is_empty() {
        return Err(PredictionError::DimensionMismatch(sys.dimension_errors().join("; ")));
    }

    let n_s = nx + n * nu;
    let n_traj = (n + 1) * nx + n * nu;
    let mut s_x = Matrix::zeros(n_traj, nx);
    let mut s_u = Matrix::zeros(n_traj, n * nu);
    let mut powers = vec![Matrix::identity(nx, nx)];
    for i in 1..=n + 1 {
        powers.push(&sys.a * &powers[i - 1]);
    }
    for i in 0..=n {
        s_x.view_mut((i * nx, 0), (nx, nx)).copy_from(&powers[i]);
        for l in 0..i {
            s_u.view_mut((i * nx, l * nu), (nx, nu)).copy_from(&(&powers[i - 1 - l] * &sys.b));
        }
    }
    for i in 0..n {
        s_u.view_mut(((n + 1) * nx + i * nu, i * nu), (nu, nu)).copy_from(&Matrix::identity(nu, nu));
    }
    let s_mat = hstack(&[&s_x, &s_u]);

    let nc = c.b.len();
    let ny = y.nrows();
    let mut h_xu = Matrix::zeros(n * nc + ny, n_traj);
    h_xu.view_mut((0, 0), (n * nc, n * nx)).copy_from(&kron(&Matrix::identity(n, n), &c.f));
    h_xu.view_mut((0, (n + 1) * nx), (n * nc, n * nu)).copy_from(&kron(&Matrix::identity(n, n), &c.g));
    h_xu.view_mut((n * nc, n * nx), (ny, nx)).copy_from(y);
    let mut b_stack = Vector::zeros(n * nc + ny);
    for i in 0..n {
        b_stack.rows_mut(i * nc, nc).copy_from(&c.b);
    }
    b_stack.rows_mut(n * nc, ny).copy_from(z);

    let mut ab0 = Matrix::zeros(nx, n_s);
    ab0.view_mut((0, 0), (nx, nx)).copy_from(&sys.a);
    ab0.view_mut((0, nx), (nx, nu)).copy_from(&sys.b);
    let l_mat = &s_x * &ab0;

    let mut d_xu = Matrix::zeros(sys.n_p(), n_s);
    d_xu.view_mut((0, 0), (sys.n_p(), nx)).copy_from(&sys.d_x);
    d_xu.view_mut((0, nx), (sys.n_p(), nu)).copy_from(&sys.d_u);

    let sx_bp = &s_x * &sys.b_p;
    let c_s = sys.deltas.iter().map(|d| &l_mat + &sx_bp * d * &d_xu).collect();
    let c_w = sys.deltas.iter().map(|d| &s_x * (&sys.b_w + &sys.b_p * d * &sys.d_w)).collect();

    Ok(PredictionBundle { n, n_x: nx, n_u: nu, n_w: nw, n_c: nc, s_mat, s_x, s_u, h_xu, b_stack, l_mat, d_xu, c_s, c_w })
}

/// `𝐋_K`: the nominal next-step trajectory under the shifted input sequence
/// closed with terminal feedback `k_term`.
pub fn shift_matrix(bundle: &PredictionBundle, sys: &UncertainSystem, k_term: &Matrix) -> Matrix {
    let (n, nx, nu) = (bundle.n, bundle.n_x, bundle.n_u);
    let mut l_k = Matrix::zeros(bundle.n_traj(), bundle.n_s());
    for i in 0..n {
        l_k.view_mut((i * nx, 0), (nx, bundle.n_s())).copy_from(&bundle.state_rows(i + 1));
    }
    let last = bundle.state_rows(n);
    let a_k = &sys.a + &sys.b * k_term;
    l_k.view_mut((n * nx, 0), (nx, bundle.n_s())).copy_from(&(&a_k * &last));
    let u0 = (n + 1) * nx;
    for i in 0..n - 1 {
        for c in 0..nu {
            l_k[(u0 + i * nu + c, nx + (i + 1) * nu + c)] = 1.0;
        }
    }
    l_k.view_mut((u0 + (n - 1) * nu, 0), (nu, bundle.n_s())).copy_from(&(k_term * &last));
    l_k
}

/// `(𝐂_Kʲ, 𝐂_Mʲ)` for one vertex.
pub fn build_gain_matrices(
    bundle: &PredictionBundle,
    gains: &GainSet,
    sys: &UncertainSystem,
    vertex: usize,
) -> Result<(Matrix, Matrix), PredictionError> {
    gains.check(bundle.n, bundle.n_x, bundle.n_u)?;
    if vertex >= sys.n_delta() {
        return Err(PredictionError::DimensionMismatch(format!("vertex {vertex} out of range")));
    }
    let (nx, nu) = (bundle.n_x, bundle.n_u);
    let delta = &sys.deltas[vertex];
    let mut k_pad = Matrix::zeros(bundle.n * nu, bundle.n_s());
    k_pad.view_mut((0, 0), (bundle.n * nu, nx + nu)).copy_from(&gains.k_delta);
    let c_k = shift_matrix(bundle, sys, &gains.k_term)
        + &bundle.s_x * &sys.b_p * delta * &bundle.d_xu
        + &bundle.s_u * k_pad;
    let c_m = &bundle.s_x * (&sys.b_w + &sys.b_p * delta * &sys.d_w) + &bundle.s_u * &gains.m_gains * &sys.b_w;
    Ok((c_k, c_m))
}

/// Inputs `û_{k+1}` produced by the parameterization for state-input
/// sequence `s`, disturbance `w` and vertex gains.
pub fn shifted_inputs(bundle: &PredictionBundle, gains: &GainSet, sys: &UncertainSystem, s: &Vector, w: &Vector) -> Vector {
    let (n, nx, nu) = (bundle.n, bundle.n_x, bundle.n_u);
    let traj = &bundle.s_mat * s;
    let x_n = traj.rows(n * nx, nx).into_owned();
    let y_k = s.rows(0, nx + nu).into_owned();
    let bw = &sys.b_w * w;
    let mut u = Vector::zeros(n * nu);
    for i in 0..n {
        let base = if i + 1 < n {
            s.rows(nx + (i + 1) * nu, nu).into_owned()
        } else {
            &gains.k_term * &x_n
        };
        let m_i = gains.m_gains.rows(i * nu, nu);
        let k_i = gains.k_delta.rows(i * nu, nu);
        u.rows_mut(i * nu, nu).copy_from(&(base + m_i * &bw + k_i * &y_k));
    }
    u
}

/// `Q_s = diag(I_N ⊗ Q_x, Q_N, I_N ⊗ Q_u)`, ordered like the trajectory.
pub fn stage_weight(q_x: &Matrix, q_n: &Matrix, q_u: &Matrix, n: usize) -> Matrix {
    let ix = kron(&Matrix::identity(n, n), q_x);
    let iu = kron(&Matrix::identity(n, n), q_u);
    block_diag(&[&ix, q_n, &iu])
}

/// Stacks the right-hand side blocks `[b − t]` used by the polytopes `𝐏₀`.
pub fn tightened_rhs(bundle: &PredictionBundle, t: &Vector) -> Vector {
    &bundle.b_stack - t
}

/// Row blocks `[t_0; …; t_N]` of a stacked tightening vector.
pub fn tightening_blocks(bundle: &PredictionBundle, t: &Vector) -> Vec<Vector> {
    let nc = bundle.n_c;
    let mut out: Vec<Vector> = (0..bundle.n).map(|i| t.rows(i * nc, nc).into_owned()).collect();
    out.push(t.rows(bundle.n * nc, t.len() - bundle.n * nc).into_owned());
    out
}
