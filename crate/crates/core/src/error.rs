//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by panel loading, inference, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file (CSV panel, mask overlay, config).
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// An input violated a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Matrices or vectors with inconsistent shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Numerical breakdown (non-SPD solve, non-finite value) with the
    /// timestep or iteration it occurred at.
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    /// An evaluation window that cannot be masked or scored.
    #[error("window error: {0}")]
    Window(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical<S: Into<String>>(step: usize, msg: S) -> Self {
        Error::Numerical { step, msg: msg.into() }
    }
}
