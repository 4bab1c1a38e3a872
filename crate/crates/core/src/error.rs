//! Crate-wide error types.

use thiserror::Error;

/// Errors raised by the differentiation tape and optimizer.
#[derive(Debug, Error)]
pub enum AdError {
    /// Operands do not satisfy the shape contract of a primitive.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A primitive produced NaN or Inf.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A precondition of the tape API was violated.
    #[error("contract violation: {0}")]
    Contract(String),
}

impl AdError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AdError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// Top-level error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),

    /// Invalid configuration (dimensions, fractions, hyperparameter values).
    #[error("configuration error: {0}")]
    Config(String),

    /// An input set is empty or otherwise unusable (empty arm, all-zero weights).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An API precondition was violated (length mismatch, wrong scope).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset file could not be parsed.
    #[error("parse error in {path}{}: {msg}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Parse {
        path: String,
        row: Option<usize>,
        msg: String,
    },

    /// Splitting produced an unusable partition.
    #[error("split error: {0}")]
    Split(String),

    /// Training aborted.
    #[error("training failed at iteration {iteration}: non-finite {term}")]
    NonFiniteLoss { iteration: usize, term: String },

    /// A model file has an unknown or corrupt format.
    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
