//! Robust tube-free model predictive control for systems with linear
//! fractional uncertainty and bounded additive disturbances.
//!
//! The offline step synthesizes constraint tightenings, affine feedback gains
//! and Farkas multipliers that make a nominal MPC recursively feasible; the
//! online step solves a small QP per sample.

pub mod linalg;
pub mod solver;
pub mod model;
pub mod prediction;
pub mod terminal;
pub mod synthesis;
pub mod mpc;
pub mod sim;
pub mod verify;
