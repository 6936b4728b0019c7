use std::path::PathBuf;

use picat_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: unsupported color type {color}")]
    UnsupportedColorType { path: PathBuf, color: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("coordinate {0:?} out of bounds for {1}x{2} image")]
    OutOfBounds((usize, usize), usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
