use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    /// A tensor extent does not match what the operation requires.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        TensorError::Dimension {
            op,
            axis,
            expected,
            actual,
        }
    }
}
