use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incomplete dataset: {0}")]
    IncompleteDataset(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("region mask is empty")]
    EmptyRegion,

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("level {level} too extreme for {n} samples (fewer than one exceedance)")]
    LevelTooExtreme { level: f64, n: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite activation in layer {layer} ({kind})")]
    NumericOverflow { layer: usize, kind: &'static str },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("non-finite gradient in tensor {tensor} at element {index}")]
    NonFiniteGradient { tensor: usize, index: usize },

    #[error("dataset cannot be split: {0}")]
    Unsplittable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transfer chain order error: {0}")]
    ChainOrder(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("test-set leakage: sample from test year {year} reached a training batch")]
    Leakage { year: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
