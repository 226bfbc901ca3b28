//! Generation-module contracts, decoding configuration, backends and the
//! operations built on them.
//!
//! * [`Generator`]: conditional text generator with beam, diverse and
//!   bank-constrained decoding.
//! * [`BiEncoder`]: two-tower scorer returning unit vectors.
//! * [`CompletionClient`]: remote few-shot completion endpoint.

mod biencoder;
mod decoding;
mod ngram;
mod optim;
mod pipeline;
mod registry;
mod remote;
mod stubs;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::evalsuite::ScoredText;
use crate::kgraph::EntityBank;
use crate::text::normalize;
use crate::{Error, Result};

pub use biencoder::{EncodedBank, HashedBiEncoder, HashedBiEncoderConfig};
pub use decoding::{search, BankTrie, Hypothesis, SearchParams, StepScorer};
pub use ngram::{NgramSeq2Seq, NgramSeq2SeqConfig};
pub use optim::Adam;
pub use pipeline::{
    BiEncoderNodes, EchoRetrieve, FewShotNodes, GeneratorNodes, NeighborProvider, NodePredictor, PipelineOutput,
    RerankPipeline, RetrievalSpy, StaticNeighbors,
};
pub use registry::{
    config_digest, load_model, read_predictions, write_predictions, LoadedModel, ModelRegistry, PredictionRecord,
    RegistryEntry,
};
pub use remote::{complete_fewshot, FewShotSampling, RetryPolicy, RetryingClient, ScriptedClient};
pub use stubs::{AdversarialGenerator, EchoGenerator, FailingGenerator, ScriptedGenerator, StubBiEncoder};

/// Node predictions are capped at this many outputs.
pub const MAX_NODE_OUTPUTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub beam_size: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    pub repetition_penalty: f64,
    pub constrained: bool,
    #[serde(skip)]
    pub constraint_bank: Option<Arc<EntityBank>>,
    pub num_return: usize,
    pub max_length: usize,
}

impl DecodingConfig {
    /// Beam 5, repetition penalty 1.5.
    pub fn sentence() -> Self {
        Self {
            beam_size: 5,
            num_groups: 1,
            diversity_penalty: 0.0,
            repetition_penalty: 1.5,
            constrained: false,
            constraint_bank: None,
            num_return: 1,
            max_length: 64,
        }
    }

    /// Beam 10 in 10 groups with diversity penalty 15; ten outputs.
    pub fn node() -> Self {
        Self {
            beam_size: 10,
            num_groups: 10,
            diversity_penalty: 15.0,
            repetition_penalty: 1.0,
            constrained: false,
            constraint_bank: None,
            num_return: MAX_NODE_OUTPUTS,
            max_length: 16,
        }
    }

    pub fn with_bank(mut self, bank: Arc<EntityBank>) -> Self {
        self.constrained = true;
        self.constraint_bank = Some(bank);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.num_groups == 0 || self.num_return == 0 || self.max_length == 0 {
            return Err(Error::Config("beam size, groups, num_return and max_length must be positive".into()));
        }
        if self.num_groups > 1 && !self.beam_size.is_multiple_of(self.num_groups) {
            return Err(Error::Config(format!(
                "{} beam groups do not divide beam size {}",
                self.num_groups, self.beam_size
            )));
        }
        if self.constrained && self.constraint_bank.is_none() {
            return Err(Error::Config("constrained decoding needs an entity bank".into()));
        }
        if self.repetition_penalty <= 0.0 || self.diversity_penalty < 0.0 {
            return Err(Error::Config("penalties must be non-negative (repetition > 0)".into()));
        }
        Ok(())
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            beam_size: self.beam_size,
            num_groups: self.num_groups,
            diversity_penalty: self.diversity_penalty,
            repetition_penalty: self.repetition_penalty,
            max_length: self.max_length,
            num_return: self.num_return,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub margin: f64,
    pub pre_batches: usize,
    pub max_input_tokens: usize,
    pub tau: f64,
    /// Weight of the contrastive term next to cross-entropy.
    pub lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn seq2seq() -> Self {
        Self {
            learning_rate: 6e-6,
            epsilon: 1e-6,
            batch_size: 8,
            max_epochs: 10,
            patience: 4,
            margin: 0.0,
            pre_batches: 0,
            max_input_tokens: crate::prompting::TRAINABLE_TOKEN_BUDGET,
            tau: crate::contrastive::SEQ2SEQ_TAU,
            lambda: crate::contrastive::DEFAULT_LAMBDA,
            seed: 0,
        }
    }

    pub fn dual_encoder() -> Self {
        Self {
            learning_rate: 2.5e-6,
            epsilon: 1e-6,
            batch_size: 150,
            max_epochs: 100,
            patience: 4,
            margin: crate::contrastive::DEFAULT_MARGIN,
            pre_batches: crate::contrastive::DEFAULT_PREBATCH_DEPTH,
            max_input_tokens: crate::prompting::TRAINABLE_TOKEN_BUDGET,
            tau: crate::contrastive::DUAL_ENCODER_TAU,
            lambda: crate::contrastive::DEFAULT_LAMBDA,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.epsilon > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.max_input_tokens > 0
            && self.tau > 0.0;
        if !positive || self.margin < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(format!("invalid training configuration: {self:?}")));
        }
        Ok(())
    }
}

/// One supervised example with optional contrastive negatives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub input: String,
    pub target: String,
    #[serde(default)]
    pub negatives: Vec<String>,
    /// Seed term, used as a self-negative by the dual encoder.
    #[serde(default)]
    pub seed: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochStats>,
}

/// Tracks the best validation loss and signals when patience runs out.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStopping {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, bad: 0 }
    }

    /// Returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best - 1e-12 {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.bad >= self.patience)
        }
    }
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    /// Ranked outputs, at most `config.num_return`, scores non-increasing.
    fn generate(&self, input: &str, config: &DecodingConfig) -> Result<Vec<ScoredText>>;
}

pub trait TrainableGenerator: Generator {
    fn train(&mut self, train: &[TrainPair], valid: &[TrainPair], config: &TrainConfig) -> Result<TrainReport>;
}

pub trait BiEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn encode_query(&self, text: &str) -> Result<Vec<f32>>;
    fn encode_candidate(&self, text: &str) -> Result<Vec<f32>>;
}

pub trait CompletionClient: Send + Sync {
    fn id(&self) -> &str;
    /// Up to `n` sampled completions in sample order.
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>>;
}

impl<G: Generator + ?Sized> Generator for Arc<G> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, input: &str, config: &DecodingConfig) -> Result<Vec<ScoredText>> {
        (**self).generate(input, config)
    }
}

impl<B: BiEncoder + ?Sized> BiEncoder for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn encode_query(&self, text: &str) -> Result<Vec<f32>> {
        (**self).encode_query(text)
    }
    fn encode_candidate(&self, text: &str) -> Result<Vec<f32>> {
        (**self).encode_candidate(text)
    }
}

impl<C: CompletionClient + ?Sized> CompletionClient for Arc<C> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        (**self).complete(prompt, n)
    }
}

pub(crate) fn backend_error(input_id: &str, err: Error) -> Error {
    match err {
        Error::Backend { .. } => err,
        other => Error::Backend { input_id: input_id.to_string(), message: other.to_string() },
    }
}

fn sort_desc(outputs: &mut [ScoredText]) {
    outputs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)));
}

/// Sentence decoding with the sentence defaults; `num_return` outputs at most.
pub fn generate_sentence(gen: &dyn Generator, input_id: &str, input: &str, num_return: usize) -> Result<Vec<ScoredText>> {
    let config = DecodingConfig { num_return: num_return.max(1), ..DecodingConfig::sentence() };
    let mut out = gen.generate(input, &config).map_err(|e| backend_error(input_id, e))?;
    sort_desc(&mut out);
    out.truncate(config.num_return);
    Ok(out)
}

/// Node decoding: normalize, dedup keeping the best-scored copy, keep only
/// bank members when constrained, then cut to ten.
pub fn generate_nodes(gen: &dyn Generator, input_id: &str, input: &str, config: &DecodingConfig) -> Result<Vec<ScoredText>> {
    config.validate()?;
    let bank = config.constraint_bank.as_deref().filter(|_| config.constrained);
    if bank.is_some_and(|b| b.is_empty()) {
        log::warn!("constrained decoding for `{input_id}` with an empty entity bank");
        return Ok(Vec::new());
    }
    let raw = gen.generate(input, config).map_err(|e| backend_error(input_id, e))?;
    Ok(postprocess_nodes(raw, bank, config.num_return))
}

pub(crate) fn postprocess_nodes(mut raw: Vec<ScoredText>, bank: Option<&EntityBank>, num_return: usize) -> Vec<ScoredText> {
    sort_desc(&mut raw);
    let mut seen = std::collections::HashSet::new();
    raw.into_iter()
        .filter_map(|o| {
            let text = normalize(&o.text);
            let ok = !text.is_empty() && bank.is_none_or(|b| b.contains(&text)) && seen.insert(text.clone());
            ok.then_some(ScoredText { text, score: o.score })
        })
        .take(num_return.min(MAX_NODE_OUTPUTS))
        .collect()
}

/// Bank entries ranked by query/candidate dot product; ties by text.
pub fn dual_encoder_rank(be: &dyn BiEncoder, input: &str, candidates: &EntityBank, k: usize) -> Result<Vec<ScoredText>> {
    EncodedBank::build(be, candidates)?.rank(be, input, k)
}

pub(crate) fn few_shot_task_counts(task: TaskKind, sampling: &FewShotSampling) -> (usize, usize) {
    match task {
        TaskKind::Node => (sampling.node_samples, sampling.node_keep),
        TaskKind::Sentence => (sampling.sentence_samples, 1),
    }
}
