//! Deterministic stand-ins used by tests, examples and the toy pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BiEncoder, DecodingConfig, Generator};
use crate::embedding::EmbeddingProvider;
use crate::evalsuite::ScoredText;
use crate::text::stable_hash;
use crate::{Error, Result};

/// Returns its input as the only output.
#[derive(Clone, Debug)]
pub struct EchoGenerator {
    id: String,
}

impl Default for EchoGenerator {
    fn default() -> Self {
        Self { id: "echo".into() }
    }
}

impl Generator for EchoGenerator {
    fn id(&self) -> &str {
        &self.id
    }
    fn generate(&self, input: &str, _config: &DecodingConfig) -> Result<Vec<ScoredText>> {
        Ok(vec![ScoredText::new(input, 0.0)])
    }
}

/// Returns a fixed list, best first, cut to `num_return`.
#[derive(Clone, Debug)]
pub struct ScriptedGenerator {
    id: String,
    outputs: Vec<ScoredText>,
}

impl ScriptedGenerator {
    pub fn new(id: impl Into<String>, outputs: Vec<ScoredText>) -> Self {
        Self { id: id.into(), outputs }
    }
}

impl Generator for ScriptedGenerator {
    fn id(&self) -> &str {
        &self.id
    }
    fn generate(&self, _input: &str, config: &DecodingConfig) -> Result<Vec<ScoredText>> {
        let mut out = self.outputs.clone();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(config.num_return);
        Ok(out)
    }
}

/// Ignores any constraint and emits a mix of bank-like and junk strings.
#[derive(Clone, Debug)]
pub struct AdversarialGenerator {
    seed: u64,
}

impl AdversarialGenerator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Generator for AdversarialGenerator {
    fn id(&self) -> &str {
        "adversarial"
    }
    fn generate(&self, input: &str, config: &DecodingConfig) -> Result<Vec<ScoredText>> {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), input.as_bytes()]));
        let mut pool: Vec<String> = config
            .constraint_bank
            .as_deref()
            .map(|b| b.iter().take(5).cloned().collect())
            .unwrap_or_default();
        pool.extend(["not in bank", "", "A.", "zz top", input].iter().map(|s| s.to_string()));
        let n = config.beam_size.max(config.num_return) * 2;
        let mut out: Vec<ScoredText> = (0..n)
            .map(|_| {
                let base = &pool[rng.random_range(0..pool.len())];
                let text = if rng.random_bool(0.3) { format!("{base} {}", rng.random_range(0..100)) } else { base.clone() };
                ScoredText::new(text, -rng.random::<f64>())
            })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }
}

/// Always fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct FailingGenerator;

impl Generator for FailingGenerator {
    fn id(&self) -> &str {
        "failing"
    }
    fn generate(&self, _input: &str, _config: &DecodingConfig) -> Result<Vec<ScoredText>> {
        Err(Error::Io(std::io::Error::other("backend unavailable")))
    }
}

/// Bi-encoder whose towers are one shared embedding provider.
#[derive(Clone, Debug)]
pub struct StubBiEncoder<P> {
    provider: P,
    id: String,
}

impl<P: EmbeddingProvider> StubBiEncoder<P> {
    pub fn new(provider: P) -> Self {
        let id = format!("stub-bi:{}", provider.name());
        Self { provider, id }
    }
}

impl<P: EmbeddingProvider> BiEncoder for StubBiEncoder<P> {
    fn id(&self) -> &str {
        &self.id
    }
    fn encode_query(&self, text: &str) -> Result<Vec<f32>> {
        self.provider.embed(text)
    }
    fn encode_candidate(&self, text: &str) -> Result<Vec<f32>> {
        self.provider.embed(text)
    }
}
