use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("output directory {0} is not empty (pass overwrite to replace it)")]
    OutputNotEmpty(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image {width}x{height} is smaller than the feature stride {stride}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        stride: usize,
    },

    #[error("non-finite value in loss component `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("parameter `{0}` is missing")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter name sets differ: {0}")]
    NameMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run failed: {0}")]
    RunFailed(String),

    #[error("class count mismatch: checkpoint has {checkpoint}, dataset has {dataset}")]
    ClassCountMismatch { checkpoint: usize, dataset: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
