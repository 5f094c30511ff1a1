use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("propagation error between `{from}` and `{to}`: {reason}")]
    Propagation { from: String, to: String, reason: String },

    #[error("joint enumeration refused: {candidates} candidates exceeds the limit of {limit}")]
    EnumerationLimit { candidates: f64, limit: u64 },

    #[error("bad magic: expected \"ICWEIGHT\"")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated tensor {0}")]
    TruncatedTensor(String),

    #[error("truncated header")]
    TruncatedHeader,

    #[error("invalid container: {0}")]
    InvalidContainer(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn geom_err(msg: impl Into<String>) -> Error {
    Error::Geometry(msg.into())
}
