use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("no forward pass cached; run forward before backward")]
    MissingCache,

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
