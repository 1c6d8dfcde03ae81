//! Error types shared across the crate.

use crate::records::TrainRecord;

/// Machine-readable description of a detected training divergence.
///
/// Divergence is detected, never silently propagated: the first non-finite
/// loss or parameter aborts the run and this struct carries everything the
/// caller needs to report it, including the records of all steps that
/// completed before the failure.
#[derive(Debug, Clone)]
pub struct Divergence {
    /// Global step index at which the non-finite value was detected.
    pub step: u64,
    /// Layer name (or `"loss"`) where the first non-finite value appeared.
    pub location: String,
    /// Short human-readable cause, e.g. `"non-finite minibatch loss"`.
    pub reason: String,
    /// Per-iteration records up to (excluding) the failed step.
    pub records: Vec<TrainRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("batch-norm fold residual {residual:.3e} exceeds {limit:.1e}")]
    Fold { residual: f64, limit: f64 },

    #[error("divergence at step {} ({}): {}", .0.step, .0.location, .0.reason)]
    Divergence(Box<Divergence>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
