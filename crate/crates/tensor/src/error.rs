use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Element count does not match the product of the extents.
    #[error("shape {shape:?} wants {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    /// Operand shapes are incompatible for an operation. `detail` names the
    /// offending dimension.
    #[error("{op}: incompatible shapes, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operand has the wrong rank.
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    /// A non-finite value (NaN or infinity) appeared in an op's output.
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Invalid configuration of an operation (zero stride, empty window, ...).
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// Serialization to or from the on-disk tensor format failed.
    #[error("tensor dump: {0}")]
    Dump(String),

    /// Underlying I/O failure while reading or writing a dump.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
