use std::path::PathBuf;

use panofuse_tensor::TensorError;

/// Error type shared by every module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// A caller-supplied value violates an operation's contract.
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// Two inputs that must agree (shapes, modality sets, class counts) do not.
    #[error("{op}: {detail}")]
    Mismatch { op: &'static str, detail: String },

    /// Filesystem failure, annotated with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// An image file exists but cannot be decoded as the expected format.
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Training aborted; names the iteration so the log can be correlated.
    #[error("training aborted at iteration {iteration}: {reason}")]
    Train { iteration: usize, reason: String },
}

impl CoreError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Mismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CoreError::Image {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
