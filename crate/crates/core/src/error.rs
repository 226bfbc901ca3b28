use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("not found: {0}")]
    Lookup(String),

    #[error("backend failure on input `{input_id}`: {message}")]
    Backend { input_id: String, message: String },

    #[error("retryable client failure: {0}")]
    Retryable(String),

    #[error("no usable output: {0}")]
    EmptyResult(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
