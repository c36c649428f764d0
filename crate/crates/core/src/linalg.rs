//! Dense real linear algebra: Kronecker products, a cyclic Jacobi symmetric
//! eigensolver and the discrete algebraic Riccati equation.
//!
//! Storage and the LU/Cholesky factorizations come from `nalgebra`; the
//! eigensolver and the Riccati recursion are implemented here so that their
//! convergence criteria are under our control.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("Riccati recursion did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("pair (A, B) is not stabilizable: closed-loop spectral radius {0:.6}")]
    Unstabilizable(f64),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Block-diagonal matrix from a list of blocks.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stack matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack: column mismatch");
        out.view_mut((r, 0), b.shape()).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Concatenate matrices with equal row counts side by side.
pub fn hstack(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack: row mismatch");
        out.view_mut((0, c), b.shape()).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn stack_vectors(parts: &[&Vector]) -> Vector {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = Vector::zeros(n);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(*p);
        r += p.len();
    }
    out
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Largest modulus among the eigenvalues of a square matrix.
pub fn spectral_radius(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Symmetric eigendecomposition with eigenvalues in ascending order and the
/// matching orthonormal eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn min(&self) -> f64 {
        self.eigenvalues.get(0).copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> Matrix {
        let v = &self.eigenvectors;
        v * Matrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Rotations are applied sweep by sweep until the off-diagonal Frobenius norm
/// drops below `1e-12 · ‖m‖_F`.
pub fn sym_eig(m: &Matrix) -> Result<SymEig, LinalgError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(LinalgError::NotSquare(m.nrows(), m.ncols()));
    }
    let scale = m.norm();
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * (1.0 + scale) {
        return Err(LinalgError::NotSymmetric(asym));
    }

    let mut a = m.symmetric_part();
    let mut v = Matrix::identity(n, n);
    let target = 1e-12 * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off <= target || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &v.column(src));
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64, LinalgError> {
    Ok(sym_eig(m)?.min())
}

const DARE_MAX_ITER: usize = 100_000;
const DARE_TOL: f64 = 1e-10;

/// Solution of the discrete algebraic Riccati equation together with the
/// associated infinite-horizon LQR gain `k` (the control law is `u = -k x`).
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub iterations: usize,
}

/// Fixed-point Riccati recursion started from `P = Q`.
pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<DareSolution, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare(a.nrows(), a.ncols()));
    }
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(LinalgError::DimensionMismatch(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let at = a.transpose();
    let mut p = q.clone();
    for it in 1..=DARE_MAX_ITER {
        let gain = riccati_gain(&p, a, b, r)?;
        let next = (q + &at * &p * a - &at * &p * b * &gain).symmetric_part();
        let diff = (&next - &p).norm();
        p = next;
        if !diff.is_finite() {
            return Err(LinalgError::NoConvergence(it));
        }
        if diff <= DARE_TOL * (1.0 + p.norm()) {
            let k = riccati_gain(&p, a, b, r)?;
            let rho = spectral_radius(&(a - b * &k));
            if rho >= 1.0 {
                return Err(LinalgError::Unstabilizable(rho));
            }
            return Ok(DareSolution { p, k, iterations: it });
        }
    }
    Err(LinalgError::NoConvergence(DARE_MAX_ITER))
}

fn riccati_gain(p: &Matrix, a: &Matrix, b: &Matrix, r: &Matrix) -> Result<Matrix, LinalgError> {
    let bt = b.transpose();
    let lhs = r + &bt * p * b;
    let rhs = &bt * p * a;
    lhs.lu()
        .solve(&rhs)
        .ok_or(LinalgError::Singular("R + BᵀPB"))
}

/// Residual of the DARE at `p`, in Frobenius norm.
pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    let at = a.transpose();
    let bt = b.transpose();
    let inner = (r + &bt * p * b).try_inverse().expect("R + BᵀPB invertible");
    let res = p - q - &at * p * a + &at * p * b * inner * &bt * p * a;
    res.norm()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn symmetric() -> impl Strategy<Value = Matrix> {
        (1usize..=6).prop_flat_map(|n| {
            prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |v| {
                let m = Matrix::from_vec(n, n, v);
                (&m + m.transpose()) * 0.5
            })
        })
    }

    proptest! {
        #[test]
        fn sym_eig_reconstructs(m in symmetric()) {
            let e = sym_eig(&m).unwrap();
            let n = m.nrows();
            let scale = 1.0 + m.norm();
            prop_assert!((e.reconstruct() - &m).amax() <= 1e-9 * scale);
            let v = &e.eigenvectors;
            prop_assert!((v.transpose() * v - Matrix::identity(n, n)).amax() <= 1e-10);
            prop_assert!(e.eigenvalues.as_slice().windows(2).all(|w| w[0] <= w[1]));
            let mut reference: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            reference.sort_by(f64::total_cmp);
            for (a, b) in e.eigenvalues.iter().zip(&reference) {
                prop_assert!((a - b).abs() <= 1e-9 * scale);
            }
        }
    }
}
