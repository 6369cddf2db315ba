//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the laboratory.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid user-supplied structure: names, splits, policies, weights.
    #[error("validation error: {0}")]
    Validation(String),

    /// Array or vocabulary dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An id fell outside the space it indexes.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// A required collection was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A loss term stopped being finite during training.
    #[error("non-finite value in `{term}` at step {step}; aborting")]
    NonFinite { term: String, step: usize },

    /// A prompt word is neither a function word nor a known primitive.
    #[error("unknown prompt word {0:?}")]
    UnknownWord(String),

    /// Scene placement could not satisfy the overlap constraints.
    #[error("scene placement failed: {0}")]
    Placement(String),

    /// Checkpoint file is malformed or inconsistent with expectations.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Experiment configuration is malformed or references missing paths.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
