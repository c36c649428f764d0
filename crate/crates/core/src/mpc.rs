//! Online tightened nominal MPC and its control law.

use crate::linalg::{Matrix, Vector};
use crate::model::Model;
use crate::prediction::{stage_weight, PredictionBundle, PredictionError};
use crate::solver::{check_feasible, solve_qp, QpProblem, QpStatus, SolverError};
use crate::synthesis::Certificate;

#[derive(Debug, thiserror::Error)]
pub enum MpcError {
    #[error("state {0:?} is outside the region of attraction")]
    Infeasible(Vec<f64>),
    #[error("state has length {found}, expected {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("state is not finite")]
    NonFinite,
    #[error("QP solver: {0}")]
    Solver(String),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error("certificate fingerprint {found} does not match model {expected}")]
    FingerprintMismatch { found: String, expected: String },
}

impl From<SolverError> for MpcError {
    fn from(e: SolverError) -> Self {
        MpcError::Solver(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u: Vector,
    /// `V(x) = 𝐬*ᵀ𝐒ᵀQ_s𝐒𝐬*`.
    pub value: f64,
    pub status: QpStatus,
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub iterations: usize,
}

/// Condensed QP data for one certificate.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub certificate: Certificate,
    pub bundle: PredictionBundle,
    pub q_x: Matrix,
    pub q_u: Matrix,
    q_s: Matrix,
    hessian: Matrix,
    linear: Matrix,
    a_in: Matrix,
    a_x: Matrix,
    rhs: Vector,
}

impl ControllerState {
    pub fn new(certificate: Certificate, model: &Model) -> Result<Self, MpcError> {
        let expected = model.fingerprint();
        if certificate.fingerprint != expected {
            return Err(MpcError::FingerprintMismatch { found: certificate.fingerprint.clone(), expected });
        }
        let bundle = certificate.bundle(model)?;
        let q_x = certificate.q_x.clone();
        let q_u = certificate.q_u.clone();
        let q_s = stage_weight(&q_x, &certificate.cost.q_n, &q_u, bundle.n);
        let qsu = &q_s * &bundle.s_u;
        let mut hessian = bundle.s_u.transpose() * &qsu * 2.0;
        hessian = (&hessian + hessian.transpose()) * 0.5;
        let linear = bundle.s_u.transpose() * &q_s * &bundle.s_x * 2.0;
        let a_in = &bundle.h_xu * &bundle.s_u;
        let a_x = &bundle.h_xu * &bundle.s_x;
        let rhs = &bundle.b_stack - &certificate.tightenings;
        Ok(ControllerState { certificate, bundle, q_x, q_u, q_s, hessian, linear, a_in, a_x, rhs })
    }

    pub fn n_x(&self) -> usize {
        self.bundle.n_x
    }

    pub fn n_u(&self) -> usize {
        self.bundle.n_u
    }

    fn check_state(&self, x: &Vector) -> Result<(), MpcError> {
        if x.len() != self.n_x() {
            return Err(MpcError::DimensionMismatch { found: x.len(), expected: self.n_x() });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(MpcError::NonFinite);
        }
        Ok(())
    }

    /// Value `sᵀ𝐒ᵀQ_s𝐒s` of a stacked decision vector.
    pub fn value_of(&self, s: &Vector) -> f64 {
        let traj = &self.bundle.s_mat * s;
        traj.dot(&(&self.q_s * &traj))
    }

    /// Solves the online problem at `x` and returns the first input.
    pub fn solve_mpc(&self, x: &Vector) -> Result<MpcSolution, MpcError> {
        self.check_state(x)?;
        let f = &self.linear * x;
        let b_in = &self.rhs - &self.a_x * x;
        let qp = QpProblem::new(self.hessian.clone(), f).with_inequalities(self.a_in.clone(), b_in);
        let sol = solve_qp(&qp)?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Err(MpcError::Infeasible(x.iter().copied().collect())),
            s => return Err(MpcError::Solver(format!("online QP ended with {s:?} (kkt {:.2e})", sol.kkt_residual))),
        }
        let (n, nx, nu) = (self.bundle.n, self.n_x(), self.n_u());
        let mut s = Vector::zeros(self.bundle.n_s());
        s.rows_mut(0, nx).copy_from(x);
        s.rows_mut(nx, n * nu).copy_from(&sol.x);
        let traj = &self.bundle.s_mat * &s;
        let states = (0..=n).map(|i| traj.rows(i * nx, nx).into_owned()).collect();
        let inputs: Vec<Vector> = (0..n).map(|i| sol.x.rows(i * nu, nu).into_owned()).collect();
        Ok(MpcSolution {
            u: inputs[0].clone(),
            value: traj.dot(&(&self.q_s * &traj)),
            status: sol.status,
            states,
            inputs,
            iterations: sol.iterations,
        })
    }

    /// Membership of `x` in the state projection of the feasible set.
    pub fn roa_membership(&self, x: &Vector) -> Result<bool, MpcError> {
        self.check_state(x)?;
        let b_in = &self.rhs - &self.a_x * x;
        let n = self.a_in.ncols();
        let feas = check_feasible(&self.a_in, &b_in, &Matrix::zeros(0, n), &Vector::zeros(0))?;
        Ok(feas.feasible)
    }

    /// Largest `r` with `r·dir` inside the region of attraction, by bisection.
    pub fn roa_extent(&self, dir: &Vector, r_max: f64, tol: f64) -> Result<f64, MpcError> {
        if !self.roa_membership(&Vector::zeros(self.n_x()))? {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0, r_max);
        if self.roa_membership(&(dir * hi))? {
            return Ok(hi);
        }
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.roa_membership(&(dir * mid))? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }
}
