//! Shared error type for the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid controls: {0}")]
    InvalidControls(String),

    #[error(
        "linear solve failed at step {step}, column {column}: \
         residual {residual:.3e} above tolerance {tol:.3e} after {iterations} iterations"
    )]
    SolveFailed {
        step: usize,
        column: usize,
        residual: f64,
        tol: f64,
        iterations: usize,
    },

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("optimization failed: {0}")]
    Optimize(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("verification: {0}")]
    Verify(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
