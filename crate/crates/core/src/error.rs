use std::path::PathBuf;

use twingan_autograd::{AutogradError, Shape};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("resolution mismatch: expected {expected}x{expected}, got {actual}x{actual}")]
    ResolutionMismatch { expected: usize, actual: usize },
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("no renormalization parameters for domain {0}")]
    UnknownDomain(String),
    #[error("resolution {0} is not part of the configured ladder")]
    UnknownResolution(usize),
    #[error("cannot grow to {requested}: maximum resolution is {max}")]
    GrowBeyondMax { requested: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure at step {step}: term `{term}` is not finite")]
    NumericalFailure { step: u64, term: String },
    #[error("dataset directory {0} contains no readable images")]
    EmptyDataset(PathBuf),
    #[error("output path {0} exists and is not empty")]
    PathNotEmpty(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
