//! Dense-form MPC quadratic programs and their solver.

mod condense;
mod solver;

pub use condense::{condense, DenseQp, MpcProblemSpec, StageConstraint, StateRecovery, PSD_TOLERANCE};
pub use solver::{kkt_residuals, solve_qp, KktResiduals, QpSettings, QpSolution, QpSolver, QpStatus, WarmStart};
