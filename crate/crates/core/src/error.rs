use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed PNG {path}: {reason}")]
    MalformedPng { path: PathBuf, reason: String },

    #[error("unsupported PNG {path}: expected 8-bit RGB, found {found}")]
    UnsupportedPng { path: PathBuf, found: String },

    #[error("invalid bounding box {bbox:?} for {width}x{height} image")]
    InvalidBox {
        bbox: [i64; 4],
        width: usize,
        height: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate augmentation: {0}")]
    Degenerate(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),

    #[error("numerical failure at {stage}: {detail}")]
    Numerical { stage: String, detail: String },

    #[error("rare token {0:?} is already bound in this bundle's lineage")]
    TokenCollision(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema violation at {field}: {reason}")]
    Schema { field: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by caller input rather than by the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numerical { .. } | Error::Io { .. })
    }
}
