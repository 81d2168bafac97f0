//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An object was used in an invalid state (e.g. backward run twice).
    #[error("invalid state: {0}")]
    State(String),

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or inconsistent data (labels, pools, corpora).
    #[error("data error: {0}")]
    Data(String),

    /// A file did not match its expected format.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// A training regime was asked to run without the pools it requires.
    #[error("regime error: {0}")]
    Regime(String),

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
