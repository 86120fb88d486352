use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prototype matrix is singular (smallest Gram eigenvalue {min_eigenvalue:e})")]
    SingularPrototypeMatrix { min_eigenvalue: f64 },

    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("truncated tensor payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask weights sum below threshold")]
    EmptyMask,

    #[error("no valid prototypes for self-matching")]
    NoValidPrototypes,

    #[error("prototype or anchor vector has (near) zero norm")]
    ZeroPrototype,

    #[error("forward cache does not match current parameters")]
    StaleCache,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("insufficient data: need {needed} items of class, found {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
