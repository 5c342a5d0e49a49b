//! Binary surgical-tool segmentation learnt from unpaired images and
//! error-laden synthetic annotations.
//!
//! The training signal is set-level: a pool of scene images and a pool of
//! corrupted annotation masks, never paired. Two generators and two PatchGAN
//! discriminators are optimized adversarially with a cycle-consistency term,
//! plus an edge-consistency term that pulls annotation gradients onto image
//! gradients. After training, the image-to-annotation generator is the
//! segmentation model.

mod container;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod synthdata;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("empty score map")]
    EmptyScoreMap,
    #[error("grid of {h}x{w} is smaller than the 3x3 gradient kernel")]
    GridTooSmall { h: usize, w: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("negative loss weight: {0}")]
    NegativeWeight(f64),
    #[error("{what} requires spatial dims divisible by {multiple}, got {h}x{w}")]
    IndivisibleDims {
        what: &'static str,
        multiple: usize,
        h: usize,
        w: usize,
    },
    #[error("discriminator input must be at least 16x16, got {h}x{w}")]
    InputTooSmall { h: usize, w: usize },
    #[error("non-finite loss term `{term}` at epoch {epoch} step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("manifest has {got} samples, need at least {need}")]
    ManifestTooSmall { got: usize, need: usize },
    #[error("checkpoint version `{got}` not supported (expected `{expected}`)")]
    CheckpointVersion { got: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
