use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Pattern functions in the number basis are unbounded for eta <= 1/2.
    #[error(
        "quantum efficiency eta = {eta} is at or below the tomographic bound 1/2: \
         number-basis pattern functions are unbounded for eta <= 1/2"
    )]
    EtaBelowBound { eta: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset arity mismatch: expected {expected}-mode records, found {found}-mode")]
    ArityMismatch { expected: u8, found: u8 },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("invalid file {path}: {reason}")]
    InvalidFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
