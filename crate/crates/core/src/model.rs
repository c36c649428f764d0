//! Uncertain LFT system, disturbance and constraint sets.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{Matrix, Vector};
use crate::solver::{self, QpProblem, QpStatus};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid polytope: {0}")]
    InvalidPolytope(String),
    #[error("polytope is empty")]
    EmptyPolytope,
    #[error("model file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
}

/// `x⁺ = Ax + Bu + B_p p + B_w w`, `q = D_x x + D_u u + D_w w`, `p = Δq`,
/// with `Δ` in the convex hull of `deltas`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub b_p: Matrix,
    pub b_w: Matrix,
    pub d_x: Matrix,
    pub d_u: Matrix,
    pub d_w: Matrix,
    pub deltas: Vec<Matrix>,
}

impl UncertainSystem {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_p(&self) -> usize {
        self.b_p.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }
    pub fn n_delta(&self) -> usize {
        self.deltas.len()
    }

    /// Convex combination `Σ τ_j Δʲ`.
    pub fn delta_from_weights(&self, weights: &Vector) -> Matrix {
        let mut d = Matrix::zeros(self.n_p(), self.n_p());
        for (j, dj) in self.deltas.iter().enumerate() {
            d += dj * weights[j];
        }
        d
    }

    /// One step of the true dynamics under perturbation `delta`.
    pub fn step(&self, x: &Vector, u: &Vector, w: &Vector, delta: &Matrix) -> Vector {
        let q = &self.d_x * x + &self.d_u * u + &self.d_w * w;
        let p = delta * q;
        &self.a * x + &self.b * u + &self.b_p * p + &self.b_w * w
    }

    pub fn dimension_errors(&self) -> Vec<String> {
        let (nx, nu, np, nw) = (self.n_x(), self.n_u(), self.n_p(), self.n_w());
        let mut errs = Vec::new();
        let mut expect = |name: &str, m: &Matrix, r: usize, c: usize| {
            if m.shape() != (r, c) {
                errs.push(format!("{name} is {}x{}, expected {r}x{c}", m.nrows(), m.ncols()));
            }
        };
        expect("A", &self.a, nx, nx);
        expect("B", &self.b, nx, nu);
        expect("B_p", &self.b_p, nx, np);
        expect("B_w", &self.b_w, nx, nw);
        expect("D_x", &self.d_x, np, nx);
        expect("D_u", &self.d_u, np, nu);
        expect("D_w", &self.d_w, np, nw);
        for (j, d) in self.deltas.iter().enumerate() {
            expect(&format!("deltas[{j}]"), d, np, np);
        }
        if self.deltas.is_empty() {
            errs.push("no perturbation vertices".into());
        }
        let finite = [&self.a, &self.b, &self.b_p, &self.b_w, &self.d_x, &self.d_u, &self.d_w]
            .into_iter()
            .chain(self.deltas.iter())
            .all(crate::linalg::is_finite);
        if !finite {
            errs.push("non-finite system data".into());
        }
        errs
    }
}

/// `{x : Hx ≤ rhs}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub h: Matrix,
    pub rhs: Vector,
}

impl Polytope {
    pub fn new(h: Matrix, rhs: Vector) -> Result<Self, ModelError> {
        let p = Polytope { h, rhs };
        p.check()?;
        Ok(p)
    }

    /// `{x : |x_i| ≤ radius}`.
    pub fn boxed(dim: usize, radius: f64) -> Self {
        let mut h = Matrix::zeros(2 * dim, dim);
        for i in 0..dim {
            h[(2 * i, i)] = 1.0;
            h[(2 * i + 1, i)] = -1.0;
        }
        Polytope { h, rhs: Vector::from_element(2 * dim, radius) }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.h.nrows() == 0 {
            return Err(ModelError::InvalidPolytope("no rows".into()));
        }
        if self.h.nrows() != self.rhs.len() {
            return Err(ModelError::InvalidPolytope(format!(
                "{} rows but {} right-hand sides",
                self.h.nrows(),
                self.rhs.len()
            )));
        }
        for i in 0..self.h.nrows() {
            if self.h.row(i).amax() == 0.0 && self.rhs[i] < 0.0 {
                return Err(ModelError::InvalidPolytope(format!("row {i} is trivially empty")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn contains_point(&self, x: &Vector, tol: f64) -> bool {
        (&self.h * x - &self.rhs).iter().all(|&v| v <= tol)
    }

    /// `max cᵀx` over the polytope, `None` if empty or unbounded.
    pub fn support(&self, c: &Vector) -> Result<Option<(f64, Vector)>, ModelError> {
        let sol = solver::solve_qp(&QpProblem::lp(-c).with_inequalities(self.h.clone(), self.rhs.clone()))?;
        Ok((sol.status == QpStatus::Optimal).then(|| (c.dot(&sol.x), sol.x)))
    }

    /// Per-coordinate bounds when every row constrains a single coordinate.
    pub fn as_box(&self) -> Option<(Vector, Vector)> {
        let n = self.dim();
        let mut lo = Vector::from_element(n, f64::NEG_INFINITY);
        let mut hi = Vector::from_element(n, f64::INFINITY);
        for i in 0..self.h.nrows() {
            let nz: Vec<usize> = (0..n).filter(|&c| self.h[(i, c)] != 0.0).collect();
            match nz.as_slice() {
                [] => continue,
                [c] => {
                    let a = self.h[(i, *c)];
                    let bound = self.rhs[i] / a;
                    if a > 0.0 {
                        hi[*c] = hi[*c].min(bound);
                    } else {
                        lo[*c] = lo[*c].max(bound);
                    }
                }
                _ => return None,
            }
        }
        (lo.iter().all(|v| v.is_finite()) && hi.iter().all(|v| v.is_finite())).then_some((lo, hi))
    }

    /// Bounded iff the recession cone `{d : Hd ≤ 0}` is `{0}`.
    pub fn is_bounded(&self) -> Result<bool, ModelError> {
        let n = self.dim();
        let mut h = Matrix::zeros(self.h.nrows() + 2 * n, n);
        h.view_mut((0, 0), self.h.shape()).copy_from(&self.h);
        let mut rhs = Vector::zeros(h.nrows());
        for i in 0..n {
            h[(self.h.nrows() + 2 * i, i)] = 1.0;
            h[(self.h.nrows() + 2 * i + 1, i)] = -1.0;
            rhs[self.h.nrows() + 2 * i] = 1.0;
            rhs[self.h.nrows() + 2 * i + 1] = 1.0;
        }
        let cone = Polytope { h, rhs };
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut c = Vector::zeros(n);
                c[i] = sign;
                match cone.support(&c)? {
                    Some((v, _)) if v <= 1e-7 => {}
                    _ => return Ok(false),
                }
            }
        }
        Ok(true)
    }

    /// Center and radius of the largest inscribed ball.
    pub fn chebyshev_center(&self) -> Result<(Vector, f64), ModelError> {
        let n = self.dim();
        let m = self.h.nrows();
        let mut a = Matrix::zeros(m + 1, n + 1);
        a.view_mut((0, 0), (m, n)).copy_from(&self.h);
        for i in 0..m {
            a[(i, n)] = self.h.row(i).norm();
        }
        a[(m, n)] = -1.0;
        let mut b = Vector::zeros(m + 1);
        b.rows_mut(0, m).copy_from(&self.rhs);
        let mut f = Vector::zeros(n + 1);
        f[n] = -1.0;
        let sol = solver::solve_qp(&QpProblem::lp(f).with_inequalities(a, b))?;
        match sol.status {
            QpStatus::Optimal => Ok((sol.x.rows(0, n).into_owned(), sol.x[n].max(0.0))),
            QpStatus::Infeasible => Err(ModelError::EmptyPolytope),
            s => Err(ModelError::InvalidPolytope(format!("Chebyshev center LP ended with {s:?}"))),
        }
    }
}

/// `{(x,u) : Fx + Gu ≤ b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub f: Matrix,
    pub g: Matrix,
    pub b: Vector,
}

impl ConstraintSet {
    pub fn n_c(&self) -> usize {
        self.b.len()
    }

    pub fn as_polytope(&self) -> Polytope {
        Polytope { h: crate::linalg::hstack(&[&self.f, &self.g]), rhs: self.b.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn validate(sys: &UncertainSystem, w: &Polytope, c: &ConstraintSet) -> ValidationReport {
    let mut failures = sys.dimension_errors();
    if w.dim() != sys.n_w() {
        failures.push(format!("H_w has {} columns, expected n_w = {}", w.dim(), sys.n_w()));
    }
    if c.f.shape() != (c.n_c(), sys.n_x()) || c.g.shape() != (c.n_c(), sys.n_u()) {
        failures.push("F, G, b dimensions inconsistent".into());
    }
    if let Err(e) = w.check() {
        failures.push(format!("W: {e}"));
    }
    if c.n_c() == 0 {
        failures.push("constraint set has no rows".into());
    }
    if !failures.is_empty() {
        return ValidationReport { failures };
    }
    if w.rhs.iter().any(|&v| v < 0.0) {
        failures.push("origin not in W".into());
    }
    match w.is_bounded() {
        Ok(true) => {}
        Ok(false) => failures.push("W not compact".into()),
        Err(e) => failures.push(format!("W compactness check failed: {e}")),
    }
    if c.b.iter().any(|&v| v <= 0.0) {
        failures.push("origin not in the interior of the constraint set (b must be > 0)".into());
    }
    match c.as_polytope().is_bounded() {
        Ok(true) => {}
        Ok(false) => failures.push("constraint set not compact".into()),
        Err(e) => failures.push(format!("constraint compactness check failed: {e}")),
    }
    ValidationReport { failures }
}

/// Two masses coupled by an uncertain spring and damper.
pub fn build_msd() -> (UncertainSystem, Polytope, ConstraintSet) {
    let (m1, m2) = (0.2, 0.2);
    let (k12, c12) = (0.5, 0.5);
    let ts = 0.1;
    let wb = 0.2;
    let ku = 0.04 * k12;
    let cu = 0.02 * c12;

    let a = Matrix::from_row_slice(4, 4, &[
        1.0, ts, 0.0, 0.0,
        -k12 * ts / m1, 1.0 - c12 * ts / m1, k12 * ts / m1, c12 * ts / m1,
        0.0, 0.0, 1.0, ts,
        k12 * ts / m2, c12 * ts / m2, -k12 * ts / m2, 1.0 - c12 * ts / m2,
    ]);
    let b = Matrix::from_row_slice(4, 2, &[0.0, 0.0, ts / m1, 0.0, 0.0, 0.0, 0.0, ts / m2]);
    let b_p = Matrix::from_row_slice(4, 2, &[
        0.0, 0.0,
        ku * ts / m1, cu * ts / m1,
        0.0, 0.0,
        -ku * ts / m2, -cu * ts / m2,
    ]);
    let b_w = &b * wb;
    let d_x = Matrix::from_row_slice(2, 4, &[-1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
    let mut deltas = Vec::new();
    for s1 in [1.0, -1.0] {
        for s2 in [1.0, -1.0] {
            deltas.push(Matrix::from_diagonal(&Vector::from_row_slice(&[s1, s2])));
        }
    }
    let sys = UncertainSystem {
        a,
        b,
        b_p,
        b_w,
        d_x,
        d_u: Matrix::zeros(2, 2),
        d_w: Matrix::zeros(2, 2),
        deltas,
    };
    let w = Polytope::boxed(2, 1.0);
    let xu = Polytope::boxed(6, 2.0);
    let c = ConstraintSet {
        f: xu.h.columns(0, 4).into_owned(),
        g: xu.h.columns(4, 2).into_owned(),
        b: xu.rhs,
    };
    (sys, w, c)
}

/// Half-widths when the vertices enumerate every sign pattern of a diagonal
/// matrix.
pub fn diagonal_box(sys: &UncertainSystem) -> Option<Vector> {
    let np = sys.n_p();
    if np == 0 || np >= 30 || sys.n_delta() != 1usize << np {
        return None;
    }
    let radius = sys.deltas[0].diagonal().abs();
    if radius.iter().any(|&r| r <= 0.0) {
        return None;
    }
    let mut seen = vec![false; sys.n_delta()];
    for d in &sys.deltas {
        let mut code = 0usize;
        for r in 0..np {
            for c in 0..np {
                if r != c && d[(r, c)] != 0.0 {
                    return None;
                }
            }
            if d[(r, r)].abs() != radius[r] {
                return None;
            }
            if d[(r, r)] < 0.0 {
                code |= 1 << r;
            }
        }
        if std::mem::replace(&mut seen[code], true) {
            return None;
        }
    }
    Some(radius)
}

/// Random `Δ` in the vertex hull and convex weights reproducing it.
pub fn sample_delta<R: Rng + ?Sized>(sys: &UncertainSystem, rng: &mut R) -> (Matrix, Vector) {
    let nd = sys.n_delta();
    if nd == 1 {
        return (sys.deltas[0].clone(), Vector::from_element(1, 1.0));
    }
    let weights = if diagonal_box(sys).is_some() {
        let np = sys.n_p();
        let d: Vec<f64> = (0..np).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Vector::from_iterator(nd, sys.deltas.iter().map(|dj| {
            (0..np).map(|r| 0.5 * (1.0 + dj[(r, r)].signum() * d[r])).product::<f64>()
        }))
    } else {
        let draws: Vec<f64> = (0..nd).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        Vector::from_iterator(nd, draws.into_iter().map(|v| v / total))
    };
    (sys.delta_from_weights(&weights), weights)
}

/// Random point of `W`: exact uniform for boxes, hit-and-run otherwise.
pub fn sample_disturbance<R: Rng + ?Sized>(w: &Polytope, rng: &mut R) -> Result<Vector, ModelError> {
    if let Some((lo, hi)) = w.as_box() {
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(ModelError::EmptyPolytope);
        }
        return Ok(Vector::from_iterator(w.dim(), (0..w.dim()).map(|i| {
            if hi[i] > lo[i] { rng.random_range(lo[i]..=hi[i]) } else { lo[i] }
        })));
    }
    let (mut x, radius) = w.chebyshev_center()?;
    if radius <= 1e-12 {
        return Ok(x);
    }
    let n = w.dim();
    for _ in 0..50 {
        let d = Vector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        let hd = &w.h * &d;
        let slack = &w.rhs - &w.h * &x;
        let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..hd.len() {
            if hd[i] > 1e-14 {
                tmax = tmax.min(slack[i] / hd[i]);
            } else if hd[i] < -1e-14 {
                tmin = tmin.max(slack[i] / hd[i]);
            }
        }
        if tmin.is_finite() && tmax.is_finite() && tmax > tmin {
            x += d * rng.random_range(tmin..=tmax);
        }
    }
    Ok(x)
}

/// Convex weights `τ` with `Σ τ_j Δʲ = delta`, found by LP.
pub fn delta_weights(sys: &UncertainSystem, delta: &Matrix, tol: f64) -> Result<Option<Vector>, ModelError> {
    let nd = sys.n_delta();
    let np = sys.n_p();
    let mut a_eq = Matrix::zeros(np * np + 1, nd);
    let mut b_eq = Vector::zeros(np * np + 1);
    for (j, dj) in sys.deltas.iter().enumerate() {
        for (k, v) in dj.iter().enumerate() {
            a_eq[(k, j)] = *v;
        }
        a_eq[(np * np, j)] = 1.0;
    }
    for (k, v) in delta.iter().enumerate() {
        b_eq[k] = *v;
    }
    b_eq[np * np] = 1.0;
    let f = solver::check_feasible(&-Matrix::identity(nd, nd), &Vector::zeros(nd), &a_eq, &b_eq)?;
    Ok(f.point.filter(|_| f.min_slack <= tol))
}

/// A complete problem definition as stored in a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub sys: UncertainSystem,
    pub w: Polytope,
    pub c: ConstraintSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_x: usize,
    n_u: usize,
    n_p: usize,
    n_w: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "B_p")]
    b_p: Vec<Vec<f64>>,
    #[serde(rename = "B_w")]
    b_w: Vec<Vec<f64>>,
    #[serde(rename = "D_x")]
    d_x: Vec<Vec<f64>>,
    #[serde(rename = "D_u")]
    d_u: Vec<Vec<f64>>,
    #[serde(rename = "D_w")]
    d_w: Vec<Vec<f64>>,
    deltas: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "H_w")]
    h_w_mat: Vec<Vec<f64>>,
    h_w: Vec<f64>,
    #[serde(rename = "F")]
    f: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    #[serde(rename = "b")]
    b_rhs: Vec<f64>,
}

pub(crate) fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Matrix, ModelError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(ModelError::DimensionMismatch(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Model {
    pub fn msd() -> Self {
        let (sys, w, c) = build_msd();
        Model { sys, w, c }
    }

    pub fn validate(&self) -> ValidationReport {
        validate(&self.sys, &self.w, &self.c)
    }

    pub fn to_toml(&self) -> String {
        let s = &self.sys;
        let file = ModelFile {
            n_x: s.n_x(),
            n_u: s.n_u(),
            n_p: s.n_p(),
            n_w: s.n_w(),
            a: to_rows(&s.a),
            b: to_rows(&s.b),
            b_p: to_rows(&s.b_p),
            b_w: to_rows(&s.b_w),
            d_x: to_rows(&s.d_x),
            d_u: to_rows(&s.d_u),
            d_w: to_rows(&s.d_w),
            deltas: s.deltas.iter().map(to_rows).collect(),
            h_w_mat: to_rows(&self.w.h),
            h_w: self.w.rhs.iter().copied().collect(),
            f: to_rows(&self.c.f),
            g: to_rows(&self.c.g),
            b_rhs: self.c.b.iter().copied().collect(),
        };
        toml::to_string(&file).expect("model serialization cannot fail")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let f: ModelFile = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        let (nx, nu, np, nw) = (f.n_x, f.n_u, f.n_p, f.n_w);
        let deltas = f.deltas.iter().enumerate()
            .map(|(j, d)| from_rows(&format!("deltas[{j}]"), d, np, np))
            .collect::<Result<Vec<_>, _>>()?;
        let sys = UncertainSystem {
            a: from_rows("A", &f.a, nx, nx)?,
            b: from_rows("B", &f.b, nx, nu)?,
            b_p: from_rows("B_p", &f.b_p, nx, np)?,
            b_w: from_rows("B_w", &f.b_w, nx, nw)?,
            d_x: from_rows("D_x", &f.d_x, np, nx)?,
            d_u: from_rows("D_u", &f.d_u, np, nu)?,
            d_w: from_rows("D_w", &f.d_w, np, nw)?,
            deltas,
        };
        let w = Polytope::new(from_rows("H_w", &f.h_w_mat, f.h_w.len(), nw)?, Vector::from_vec(f.h_w))?;
        let nc = f.b_rhs.len();
        let c = ConstraintSet {
            f: from_rows("F", &f.f, nc, nx)?,
            g: from_rows("G", &f.g, nc, nu)?,
            b: Vector::from_vec(f.b_rhs),
        };
        Ok(Model { sys, w, c })
    }

    pub fn read(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
