use std::io;

use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] clbd_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact `{path}`; run `{stage}` first")]
    MissingArtifact { path: String, stage: &'static str },

    #[error("manifest chain broken: {0}")]
    Chain(String),

    #[error("store error: {0}")]
    Store(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
