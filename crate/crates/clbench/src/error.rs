use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for an operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A class label is outside the valid range for the head.
    #[error("label {label} out of range (< {num_classes}) at batch index {index}")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        index: usize,
    },

    /// A numeric input violates a documented domain constraint.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was invoked with an empty batch where one is required.
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid experiment or stream configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
