use std::path::PathBuf;

use msdet_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A layer failed; carries the layer name and the shape it was fed.
    #[error("{node} (input {shape:?}): {source}")]
    Node {
        node: String,
        shape: Vec<usize>,
        #[source]
        source: TensorError,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while
    /// running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Validation(_) => true,
            Error::Tensor(e) | Error::Node { source: e, .. } => {
                matches!(e, TensorError::Config(_) | TensorError::Dimension { .. } | TensorError::Rank { .. })
            }
            _ => false,
        }
    }
}
