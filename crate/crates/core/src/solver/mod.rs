//! Interior point solvers for the convex subproblems.

mod block;
mod qp;

pub use block::{solve_block_lp, BlockLp, BlockLpSolution, LpBlock};
pub use qp::{check_feasible, kkt_residual, solve_qp, Feasibility, QpProblem, QpSolution, QpStatus, INFEASIBILITY_TOL};

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("solver failure: {0}")]
    Failure(String),
}
