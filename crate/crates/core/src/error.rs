use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("record already active")]
    RecordActive,

    #[error("loss must have exactly one element, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("tensor was produced by a different record")]
    ForeignRecord,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed image {path}: {msg} (byte offset {offset})")]
    Image { path: PathBuf, offset: usize, msg: String },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("checkpoint truncated at byte offset {0}")]
    Truncated(usize),

    #[error("checkpoint inventory mismatch: {0}")]
    Inventory(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::Invalid(_) => 1,
            _ => 2,
        }
    }
}
