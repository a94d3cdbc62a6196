use std::path::PathBuf;

use thiserror::Error;

use crate::nets::checkpoint::CheckpointError;

pub type Result<T> = std::result::Result<T, NeatError>;

#[derive(Debug, Error)]
pub enum NeatError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("config: {0}")]
    Config(String),

    #[error("data error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NeatError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NeatError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NeatError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
