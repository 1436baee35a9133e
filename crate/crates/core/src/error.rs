use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CorError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("empty retrieval text")]
    EmptyText,

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("parse error at record {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("unsupported setting {positives}p{negatives}n")]
    UnsupportedSetting { positives: usize, negatives: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("VLM protocol error: expected \"1\" or \"0\", got {0:?}")]
    VlmProtocol(String),

    #[error("VLM format error: {0}")]
    VlmFormat(String),

    #[error("VLM request failed after {attempts} attempts: {last}")]
    RetryExhausted { attempts: usize, last: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CorError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        CorError::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorError::Io { path: path.into(), source }
    }
}
