use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error in field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("non-finite loss in epoch {epoch}, batch {batch} ({loss})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: String,
    },

    #[error("backward called before forward")]
    NoForwardCache,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
