use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtoError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown variant `{0}` (expected one of cnn, cnn+vit, cnn+vit+cbm, cnn+vit+bem, full)")]
    UnknownVariant(String),
    #[error("missing pair: no mask found for image `{stem}`")]
    MissingPair { stem: String },
    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("size mismatch for `{stem}`: image {image:?} vs mask {mask:?}")]
    SizeMismatch {
        stem: String,
        image: (u32, u32),
        mask: (u32, u32),
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite loss in component `{component}` at step {step}")]
    NonFinite { component: String, step: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CtoError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CtoError::Shape(msg.into()))
}
