//! Crate-wide error type.

/// Errors surfaced by the public API.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its invariant.
    #[error("config error: {0}")]
    Config(String),

    /// A trajectory left the finite range of f64.
    #[error("integration produced a non-finite state at step {step} (t = {t})")]
    Integration { step: usize, t: f64 },

    /// Training aborted (typically a non-finite loss).
    #[error("training error: {0}")]
    Train(String),

    /// Dataset construction or lookup failure.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed or truncated checkpoint bytes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Metric preconditions not met (e.g. single-class AUROC input).
    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
