use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("eroded mask is not contained in the dilated mask ({outside} pixels outside)")]
    MaskOrder { outside: usize },

    #[error("IoU is undefined for two empty masks")]
    UndefinedIoU,

    #[error("masked region is empty: {0}")]
    EmptyRegion(String),

    #[error("hole covers the entire image; nothing to diffuse from")]
    InpaintUnderdetermined,

    #[error("unknown feature level {level} (extractor has levels 1..={max})")]
    Level { level: usize, max: usize },

    #[error("landmark error: {0}")]
    Landmark(String),

    #[error("manifest error: {message} ({path})")]
    Manifest { message: String, path: PathBuf },

    #[error("optimization diverged at {stage} iteration {iteration}: {detail}")]
    Divergence {
        stage: u8,
        iteration: usize,
        detail: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
