use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DopError>;

#[derive(Debug, Error)]
pub enum DopError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error: {0}")]
    Index(String),

    /// A documented precondition of an operation was violated.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DopError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DopError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        DopError::Contract(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DopError::Io {
            path: path.into(),
            source,
        }
    }
}
