use thiserror::Error;

use crate::training::LossBreakdown;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data could not be used (non-finite entries, malformed files).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter is valid in isolation but not for the operator it is used with.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An iterative method stopped without meeting its tolerance.
    #[error("{message} (best estimate {estimate:e})")]
    Numerical { message: String, estimate: f64 },

    /// Gradient descent could not find a non-increasing step.
    #[error("training stalled at epoch {epoch} after {halvings} step halvings")]
    TrainingStalled {
        epoch: usize,
        halvings: usize,
        history: Vec<LossBreakdown>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized artifact does not belong to the operator it is paired with.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
