//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix dimensions do not admit the requested operation.
    #[error("shape error in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// Invalid argument or violated precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Configuration is internally inconsistent or malformed.
    #[error("configuration error: {0}")]
    Config(String),

    /// Gradient check diagnostics (non-finite loss, bad step size).
    #[error("gradient check failed on parameter `{param}`: {reason}")]
    GradCheck { param: String, reason: String },

    /// Recoverable response-parsing failure; callers substitute a no-impact record.
    #[error("response parse error: {0}")]
    Parse(String),

    /// Event provider failure after retries are exhausted.
    #[error("provider error: {0}")]
    Provider(String),

    /// Checkpoint file is corrupt, truncated, or version-incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}, batch {batch} (lr={lr}): loss is not finite")]
    Diverged { epoch: usize, batch: usize, lr: f64 },

    #[error("no evaluable entries")]
    EmptyMask,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
