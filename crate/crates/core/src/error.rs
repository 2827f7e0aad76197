use thiserror::Error;

/// Errors raised across the identification, prediction and control pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("non-uniform sampling at row {row}: step {step} s, expected {expected} s")]
    NonUniformSampling { row: usize, step: f64, expected: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },

    #[error("rank-deficient regressor (rank {rank} of {cols}); collect more or richer data")]
    RankDeficient { rank: usize, cols: usize },

    #[error("no converged candidate model: {0}")]
    NoConvergedCandidate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
