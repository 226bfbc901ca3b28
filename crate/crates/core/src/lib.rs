//! Contextual literature-based discovery workbench.
//!
//! The crate turns IE-annotated paper corpora into hypothesis-generation
//! tasks, retrieves heterogeneous inspirations for each task (semantic
//! neighbours, knowledge-graph neighbours and cited-paper titles), defines the
//! contracts generation backends plug into, implements the in-context
//! contrastive objectives, and evaluates sentence and node predictions.
//!
//! Module map:
//!
//! - [`corpus`]: ingestion, per-document graphs, task instances, temporal splits
//! - [`kgraph`]: background knowledge graph, one-hop neighbours, coreference clusters, entity bank
//! - [`embedding`]: text embedding provider contract, deterministic stubs, on-disk cache
//! - [`inspiration`]: query construction and the three neighbour retrievers
//! - [`prompting`]: seed prompts, model-input composition, few-shot prompts
//! - [`genmodels`]: generator / bi-encoder / completion contracts, decoding, reranking
//! - [`contrastive`]: in-context negatives and the two InfoNCE objectives
//! - [`evalsuite`]: ROUGE-L, MRR/HIT@k, AvgM/MaxM, subsets, multi-choice, significance
//! - [`synthetic`]: deterministic toy corpora for demos and tests
//! - [`workflow`]: stage glue, prediction and report assembly, the synthetic end-to-end run

pub mod contrastive;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evalsuite;
pub mod genmodels;
pub mod inspiration;
pub mod kgraph;
pub mod prompting;
pub mod synthetic;
pub mod text;
pub mod workflow;

pub use error::{Error, Result};

/// Crate version recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
