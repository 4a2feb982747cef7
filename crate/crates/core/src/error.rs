//! Error type shared across the engine.

use thiserror::Error;

/// Errors produced by tensor ops, transforms, datasets and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not satisfy an op's precondition.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numeric-domain precondition was violated (division by zero, NaN, ...).
    #[error("numeric domain: {0}")]
    Numeric(String),

    /// An API contract was violated (non-scalar loss, double backward, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (class label, transform id, ...) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration: {0}")]
    Config(String),

    /// A dataset file could not be parsed; carries the offending row when known.
    #[error("ingestion failed at row {row}: {msg}")]
    Ingest { row: usize, msg: String },

    /// Checkpoint or dataset binary layout mismatch.
    #[error("format: {0}")]
    Format(String),

    /// Training diverged (non-finite loss).
    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
