//! Sparse lifted linear models of controlled nonlinear systems, identified
//! from input/output data, and model predictive control built on them.

pub mod baseline;
pub mod error;
pub mod lifting;
pub mod linalg;
pub mod mpc;
pub mod plants;
pub mod prediction;
pub mod qp;
pub mod regression;
pub mod trajectory;

pub use error::{Error, Result};
