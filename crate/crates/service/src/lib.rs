//! Command-line pipeline and HTTP service for the discovery workbench.
//!
//! [`stages`] holds one function per CLI command, [`manifest`] links their
//! outputs into a verifiable chain, and [`api`] serves retrieval, blinded
//! generation and the rating protocol over `/v1`.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod protocol;
pub mod stages;
pub mod store;

pub use config::Config;
pub use error::{Result, ServiceError};
