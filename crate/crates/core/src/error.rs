use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{first} and {second} are incompatible: {reason}")]
    IncompatibleLayers {
        first: String,
        second: String,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(#[from] DataError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{what} needs {needed} evaluations but the cap is {cap}; {advice}")]
    CapExceeded {
        what: &'static str,
        needed: usize,
        cap: usize,
        advice: &'static str,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(#[from] crate::grid::GridError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

/// Dataset file failures. Each malformation has its own variant so callers
/// (and tests) can tell them apart.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is out of range 0..=9")]
    LabelOutOfRange { label: u8, index: usize },

    #[error("file length {len} is not a multiple of the {record}-byte record size")]
    RecordMisaligned { len: usize, record: usize },

    #[error("dataset file not found: {0}")]
    Missing(PathBuf),

    #[error("empty dataset: {0}")]
    Empty(String),
}
