use crate::linalg::{Matrix, Vector};

use super::SolverError;

const MAX_ITER: usize = 200;
const TOL: f64 = 1e-9;
const STALL_ITERATIONS: usize = 15;
const STALL_MERIT: f64 = 1e-6;
const ACCEPT_TOL: f64 = 1e-7;
const STEP_FRACTION: f64 = 0.99;
const FALLBACK_CENTERING: f64 = 0.1;
const REG: f64 = 1e-11;
const DIVERGENCE: f64 = 1e12;
pub const INFEASIBILITY_TOL: f64 = 1e-7;

/// `min ½xᵀHx + fᵀx  s.t.  A_eq x = b_eq,  A_in x ≤ b_in`.
///
/// A linear program is a problem with `h = 0`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: Matrix,
    pub f: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub a_in: Matrix,
    pub b_in: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vector,
    pub eq_duals: Vector,
    pub in_duals: Vector,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

impl QpProblem {
    pub fn new(h: Matrix, f: Vector) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            a_eq: Matrix::zeros(0, n),
            b_eq: Vector::zeros(0),
            a_in: Matrix::zeros(0, n),
            b_in: Vector::zeros(0),
        }
    }

    pub fn lp(f: Vector) -> Self {
        let n = f.len();
        Self::new(Matrix::zeros(n, n), f)
    }

    pub fn with_inequalities(mut self, a_in: Matrix, b_in: Vector) -> Self {
        self.a_in = a_in;
        self.b_in = b_in;
        self
    }

    pub fn with_equalities(mut self, a_eq: Matrix, b_eq: Vector) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.dim();
        let mut bad = Vec::new();
        if self.h.shape() != (n, n) {
            bad.push(format!("h is {:?}, expected {n}x{n}", self.h.shape()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            bad.push(format!("a_eq {:?} vs b_eq {}", self.a_eq.shape(), self.b_eq.len()));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            bad.push(format!("a_in {:?} vs b_in {}", self.a_in.shape(), self.b_in.len()));
        }
        if bad.is_empty() {
            let asym = (&self.h - self.h.transpose()).amax();
            if asym > 1e-10 * (1.0 + self.h.amax()) {
                bad.push(format!("h not symmetric ({asym:.2e})"));
            }
        }
        let finite = self.h.iter().chain(self.f.iter()).chain(self.a_eq.iter())
            .chain(self.b_eq.iter()).chain(self.a_in.iter()).chain(self.b_in.iter())
            .all(|v| v.is_finite());
        if !finite {
            bad.push("non-finite data".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SolverError::DimensionMismatch(bad.join("; ")))
        }
    }
}

/// Solve a convex QP with a primal-dual Mehrotra predictor-corrector method.
///
/// Infeasibility is an ordinary outcome reported through the status flag; it
/// is declared only after a phase-1 problem confirms a positive minimum slack.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, SolverError> {
    p.validate()?;
    let scaled = Scaled::new(p);
    let out = ipm(&scaled.problem);
    let mut sol = scaled.unscale(out);

    if sol.status != QpStatus::Optimal {
        let phase1 = phase_one(p)?;
        if phase1.min_slack > INFEASIBILITY_TOL {
            sol.status = QpStatus::Infeasible;
        } else if sol.x.amax() > 1e8 * (1.0 + phase1.point.amax()) {
            sol.status = QpStatus::Unbounded;
        }
    }
    sol.kkt_residual = kkt_residual(p, &sol);
    if sol.status == QpStatus::MaxIter && sol.kkt_residual <= ACCEPT_TOL {
        sol.status = QpStatus::Optimal;
    }
    Ok(sol)
}

#[derive(Debug, Clone)]
pub struct Feasibility {
    pub feasible: bool,
    pub point: Option<Vector>,
    pub min_slack: f64,
}

/// Phase-1 feasibility test: `min s ≥ 0` with `A_in x ≤ b_in + s·1` and
/// `|A_eq x − b_eq| ≤ s·1`.
pub fn check_feasible(a_in: &Matrix, b_in: &Vector, a_eq: &Matrix, b_eq: &Vector) -> Result<Feasibility, SolverError> {
    let n = a_in.ncols().max(a_eq.ncols());
    let p = QpProblem::lp(Vector::zeros(n))
        .with_inequalities(a_in.clone(), b_in.clone())
        .with_equalities(a_eq.clone(), b_eq.clone());
    p.validate()?;
    let ph = phase_one(&p)?;
    Ok(Feasibility {
        feasible: ph.min_slack <= INFEASIBILITY_TOL,
        point: (ph.min_slack <= INFEASIBILITY_TOL).then_some(ph.point),
        min_slack: ph.min_slack,
    })
}

struct PhaseOne {
    point: Vector,
    min_slack: f64,
}

fn phase_one(p: &QpProblem) -> Result<PhaseOne, SolverError> {
    let n = p.dim();
    let mi = p.a_in.nrows();
    let me = p.a_eq.nrows();
    let rows = mi + 2 * me + 1;
    let mut a = Matrix::zeros(rows, n + 1);
    let mut b = Vector::zeros(rows);
    a.view_mut((0, 0), (mi, n)).copy_from(&p.a_in);
    b.rows_mut(0, mi).copy_from(&p.b_in);
    a.view_mut((mi, 0), (me, n)).copy_from(&p.a_eq);
    b.rows_mut(mi, me).copy_from(&p.b_eq);
    a.view_mut((mi + me, 0), (me, n)).copy_from(&(-&p.a_eq));
    b.rows_mut(mi + me, me).copy_from(&(-&p.b_eq));
    // scale the slack column by the row norms so every row is relaxed evenly
    for i in 0..(mi + 2 * me) {
        let norm = a.view((i, 0), (1, n)).norm();
        a[(i, n)] = if norm > 1e-12 { -norm } else { -1.0 };
    }
    a[(rows - 1, n)] = -1.0;
    let mut f = Vector::zeros(n + 1);
    f[n] = 1.0;
    let lp = QpProblem::lp(f).with_inequalities(a.clone(), b.clone());
    let scaled = Scaled::new(&lp);
    let sol = scaled.unscale(ipm(&scaled.problem));
    if sol.status != QpStatus::Optimal {
        return Err(SolverError::Failure(format!(
            "phase-1 problem did not converge ({:?}, kkt {:.2e}, it {}, s {:.3e})",
            sol.status, kkt_residual(&lp, &sol), sol.iterations, sol.x[n]
        )));
    }
    let x = sol.x.rows(0, n).into_owned();
    // report the true worst violation rather than the scaled slack variable
    let mut viol = 0.0_f64;
    for i in 0..mi {
        viol = viol.max(p.a_in.row(i).dot(&x.transpose()) - p.b_in[i]);
    }
    for i in 0..me {
        viol = viol.max((p.a_eq.row(i).dot(&x.transpose()) - p.b_eq[i]).abs());
    }
    Ok(PhaseOne {
        point: x,
        min_slack: viol.max(0.0),
    })
}

/// Largest of the scaled primal, dual and complementarity residuals.
pub fn kkt_residual(p: &QpProblem, sol: &QpSolution) -> f64 {
    let x = &sol.x;
    let data = 1.0
        + p.h.amax().max(p.f.amax()).max(p.a_eq.amax()).max(p.a_in.amax())
            .max(p.b_eq.amax()).max(p.b_in.amax());
    let mut grad = &p.h * x + &p.f;
    if p.a_eq.nrows() > 0 {
        grad += p.a_eq.transpose() * &sol.eq_duals;
    }
    if p.a_in.nrows() > 0 {
        grad += p.a_in.transpose() * &sol.in_duals;
    }
    let stat = grad.amax();
    let eq = if p.a_eq.nrows() > 0 { (&p.a_eq * x - &p.b_eq).amax() } else { 0.0 };
    let mut ineq = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut neg = 0.0_f64;
    if p.a_in.nrows() > 0 {
        let slack = &p.b_in - &p.a_in * x;
        for i in 0..slack.len() {
            ineq = ineq.max(-slack[i]);
            comp = comp.max((slack[i] * sol.in_duals[i]).abs());
            neg = neg.max(-sol.in_duals[i]);
        }
    }
    [stat, eq, ineq, comp, neg].into_iter().fold(0.0, f64::max) / data
}

/// Row-equilibrated copy of a problem, with the scale factors needed to map
/// duals back.
struct Scaled {
    problem: QpProblem,
    eq_scale: Vector,
    in_scale: Vector,
}

impl Scaled {
    fn new(p: &QpProblem) -> Self {
        let mut problem = p.clone();
        let eq_scale = row_norms(&p.a_eq);
        let in_scale = row_norms(&p.a_in);
        for i in 0..eq_scale.len() {
            problem.a_eq.row_mut(i).scale_mut(1.0 / eq_scale[i]);
            problem.b_eq[i] /= eq_scale[i];
        }
        for i in 0..in_scale.len() {
            problem.a_in.row_mut(i).scale_mut(1.0 / in_scale[i]);
            problem.b_in[i] /= in_scale[i];
        }
        Scaled { problem, eq_scale, in_scale }
    }

    fn unscale(&self, mut sol: QpSolution) -> QpSolution {
        sol.eq_duals.component_div_assign(&self.eq_scale);
        sol.in_duals.component_div_assign(&self.in_scale);
        sol
    }
}

fn row_norms(a: &Matrix) -> Vector {
    Vector::from_iterator(a.nrows(), (0..a.nrows()).map(|i| {
        let n = a.row(i).norm();
        if n > 0.0 { n } else { 1.0 }
    }))
}

fn max_step(v: &Vector, dv: &Vector) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

fn ipm(p: &QpProblem) -> QpSolution {
    let n = p.dim();
    let me = p.a_eq.nrows();
    let mi = p.a_in.nrows();
    let a_in_t = p.a_in.transpose();
    let a_eq_t = p.a_eq.transpose();

    let mut x = Vector::zeros(n);
    let mut y = Vector::zeros(me);
    let mut s = Vector::from_iterator(mi, (0..mi).map(|i| p.b_in[i].max(1.0)));
    let mut z = Vector::from_element(mi, 1.0);

    let scale_p = 1.0 + p.b_in.amax().max(p.b_eq.amax());
    let scale_d = 1.0 + p.f.amax().max(p.h.amax());

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut best = (f64::INFINITY, 0, x.clone(), y.clone(), z.clone());
    for it in 0..MAX_ITER {
        iterations = it;
        let mut rd = &p.h * &x + &p.f;
        if me > 0 {
            rd += &a_eq_t * &y;
        }
        if mi > 0 {
            rd += &a_in_t * &z;
        }
        let re = if me > 0 { &p.a_eq * &x - &p.b_eq } else { Vector::zeros(0) };
        let ri = if mi > 0 { &p.a_in * &x + &s - &p.b_in } else { Vector::zeros(0) };
        let mu = if mi > 0 { s.dot(&z) / mi as f64 } else { 0.0 };
        let obj = p.objective(&x).abs();

        let pres = re.amax().max(ri.amax());
        let dres = rd.amax();
        if pres <= TOL * scale_p && dres <= TOL * scale_d && mu <= TOL * (1.0 + obj) {
            status = QpStatus::Optimal;
            break;
        }
        let merit = (pres / scale_p).max(dres / scale_d).max(mu / (1.0 + obj));
        if merit < best.0 {
            best = (merit, it, x.clone(), y.clone(), z.clone());
        } else if best.0 <= STALL_MERIT && it - best.1 > STALL_ITERATIONS {
            break;
        }
        if x.amax() > DIVERGENCE || z.amax() > DIVERGENCE || !x.iter().all(|v| v.is_finite()) {
            break;
        }

        let w = Vector::from_iterator(mi, (0..mi).map(|i| z[i] / s[i]));
        let mut k = Matrix::zeros(n + me, n + me);
        let mut top = p.h.clone();
        if mi > 0 {
            let mut wa = p.a_in.clone();
            for i in 0..mi {
                wa.row_mut(i).scale_mut(w[i]);
            }
            top += &a_in_t * &wa;
        }
        for i in 0..n {
            top[(i, i)] += REG;
        }
        k.view_mut((0, 0), (n, n)).copy_from(&top);
        if me > 0 {
            k.view_mut((n, 0), (me, n)).copy_from(&p.a_eq);
            k.view_mut((0, n), (n, me)).copy_from(&a_eq_t);
            for i in 0..me {
                k[(n + i, n + i)] = -REG;
            }
        }
        let lu = k.clone().lu();

        let solve = |rc: &Vector| -> Option<(Vector, Vector, Vector, Vector)> {
            // dz = S⁻¹(−rc + Z ri) + W A_in dx
            let tmp = Vector::from_iterator(mi, (0..mi).map(|i| (-rc[i] + z[i] * ri[i]) / s[i]));
            let mut rhs = Vector::zeros(n + me);
            let mut r1 = -&rd;
            if mi > 0 {
                r1 -= &a_in_t * &tmp;
            }
            rhs.rows_mut(0, n).copy_from(&r1);
            if me > 0 {
                rhs.rows_mut(n, me).copy_from(&(-&re));
            }
            let mut sol = lu.solve(&rhs)?;
            // one step of iterative refinement against the unregularized system
            let mut resid = &rhs - &k * &sol;
            for i in 0..n {
                resid[i] += REG * sol[i];
            }
            for i in 0..me {
                resid[n + i] -= REG * sol[n + i];
            }
            if let Some(corr) = lu.solve(&resid) {
                sol += corr;
            }
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let adx = if mi > 0 { &p.a_in * &dx } else { Vector::zeros(0) };
            let ds = -&ri - &adx;
            let dz = Vector::from_iterator(mi, (0..mi).map(|i| tmp[i] + w[i] * adx[i]));
            Some((dx, dy, ds, dz))
        };

        let rc_aff = s.component_mul(&z);
        let Some((dx_a, _, ds_a, dz_a)) = solve(&rc_aff) else { break };
        let _ = dx_a;
        let (dx, dy, ds, dz) = if mi > 0 {
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a)).min(1.0);
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / mi as f64;
            let mut sigma = (mu_aff / mu).powi(3);
            if !sigma.is_finite() || a_aff < 1e-8 {
                sigma = FALLBACK_CENTERING;
            }
            let sigma = sigma.min(1.0);
            let rc = Vector::from_iterator(mi, (0..mi).map(|i| {
                s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu
            }));
            let Some(step) = solve(&rc) else { break };
            step
        } else {
            let Some(step) = solve(&rc_aff) else { break };
            step
        };

        let alpha = if mi > 0 {
            (STEP_FRACTION * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0)
        } else {
            1.0
        };
        x += &dx * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
        iterations = it + 1;
    }

    if status != QpStatus::Optimal && best.0 <= STALL_MERIT {
        // best iterate seen
        (x, y, z) = (best.2, best.3, best.4);
    }
    QpSolution {
        x,
        eq_duals: y,
        in_duals: z,
        status,
        kkt_residual: f64::NAN,
        iterations,
    }
}
