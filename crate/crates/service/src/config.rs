//! TOML configuration shared by every command. Relative paths resolve
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use clbd_core::corpus::{CorpusFormat, SplitYears, TaskKind};
use clbd_core::embedding::{CharNgramProvider, EmbeddingProvider, HashingProvider};
use clbd_core::genmodels::{ModelRegistry, RegistryEntry, TrainConfig};
use clbd_core::inspiration::{NeighborCaps, NeighborSource};
use clbd_core::text::sha256_hex;

use crate::error::{Result, ServiceError};

/// Environment variable consulted when `--config` is not given.
pub const CONFIG_ENV: &str = "CLBD_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub workdir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub serve: ServeSection,
    #[serde(default)]
    pub models: Vec<RegistryEntry>,
    /// Directory of the config file; filled in by [`Config::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    17
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Annotated corpus. Without one, a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub format: String,
    pub synthetic_papers: usize,
    pub valid_from: i32,
    pub test_from: i32,
}

impl Default for DataConfig {
    fn default() -> Self {
        let years = SplitYears::default();
        Self {
            corpus: None,
            format: "jsonl".into(),
            synthetic_papers: 30,
            valid_from: years.valid_from,
            test_from: years.test_from,
        }
    }
}

impl DataConfig {
    pub fn years(&self) -> SplitYears {
        SplitYears { valid_from: self.valid_from, test_from: self.test_from }
    }

    pub fn corpus_format(&self) -> Result<CorpusFormat> {
        Ok(self.format.parse()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// `char-ngram` or `hashing`.
    pub provider: String,
    pub dimension: usize,
    pub semantic_cap: usize,
    pub citation_cap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let caps = NeighborCaps::default();
        Self { provider: "char-ngram".into(), dimension: 256, semantic_cap: caps.semantic, citation_cap: caps.citation }
    }
}

impl RetrievalConfig {
    pub fn caps(&self) -> NeighborCaps {
        NeighborCaps { semantic: self.semantic_cap, citation: self.citation_cap }
    }

    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        if self.dimension == 0 {
            return Err(ServiceError::Config("retrieval.dimension must be positive".into()));
        }
        Ok(match self.provider.as_str() {
            "char-ngram" => Arc::new(CharNgramProvider::new(self.dimension)),
            "hashing" => Arc::new(HashingProvider::new(self.dimension, 0)),
            other => return Err(ServiceError::Config(format!("unknown embedding provider `{other}`"))),
        })
    }
}

/// Optional overrides on top of the backend's default training config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub margin: Option<f64>,
    pub pre_batches: Option<usize>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut base: TrainConfig, seed: u64) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { base.$f = v; })* };
        }
        set!(learning_rate, batch_size, max_epochs, patience, margin, pre_batches, tau, lambda);
        base.seed = seed;
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub model: String,
    pub task: TaskKind,
    #[serde(default = "default_source")]
    pub neighbor_source: NeighborSource,
    #[serde(default)]
    pub overrides: TrainOverrides,
}

fn default_source() -> NeighborSource {
    NeighborSource::None
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub runs: Vec<TrainRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRun {
    pub model: String,
    pub task: TaskKind,
    #[serde(default = "default_source")]
    pub neighbor_source: NeighborSource,
    /// Second model of a reranking pipeline; `model` is the first stage.
    #[serde(default)]
    pub rerank_with: Option<String>,
    #[serde(default)]
    pub no_finetune: bool,
}

impl PredictRun {
    pub fn name(&self) -> String {
        let base = match &self.rerank_with {
            Some(second) => format!("{}>{}", self.model, second),
            None => self.model.clone(),
        };
        let base = if self.no_finetune { format!("{base}+nf") } else { base };
        match self.neighbor_source {
            NeighborSource::None => base,
            s => format!("{base}+{}", source_tag(s)),
        }
    }
}

pub fn source_tag(s: NeighborSource) -> &'static str {
    match s {
        NeighborSource::None => "none",
        NeighborSource::Semantic => "sn",
        NeighborSource::Kg => "kg",
        NeighborSource::Citation => "ct",
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    #[serde(default)]
    pub runs: Vec<PredictRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Soft-match scorers: `exact`, `token-f1`, `rouge-l`, `cosine`.
    pub scorers: Vec<String>,
    pub challenging_percentile: f64,
    pub challenging_threshold: Option<f64>,
    pub bootstrap_seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            scorers: vec!["cosine".into(), "token-f1".into()],
            challenging_percentile: clbd_core::evalsuite::CHALLENGING_PERCENTILE,
            challenging_threshold: None,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub bind: String,
    /// Concurrent generation requests.
    pub workers: usize,
    pub store: PathBuf,
    pub snapshot_every: usize,
    /// Shuffle seed for generations outside a session.
    pub shuffle_seed: u64,
    pub admin_token: Option<String>,
    /// Rater id to bearer token.
    pub raters: BTreeMap<String, String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            workers: 4,
            store: PathBuf::from("store"),
            snapshot_every: 100,
            shuffle_seed: 0,
            admin_token: None,
            raters: BTreeMap::new(),
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(ServiceError::Config(format!("model `{n}` registered twice")));
            }
        }
        let known = |n: &str, what: &str| {
            if names.contains(&n) {
                Ok(())
            } else {
                Err(ServiceError::Config(format!("{what} refers to unregistered model `{n}`")))
            }
        };
        for r in &self.train.runs {
            known(&r.model, "train run")?;
        }
        for r in &self.predict.runs {
            known(&r.model, "predict run")?;
            if let Some(s) = &r.rerank_with {
                known(s, "predict run")?;
            }
        }
        if !(0.0..=1.0).contains(&self.evaluate.challenging_percentile) {
            return Err(ServiceError::Config("evaluate.challenging_percentile must lie in [0, 1]".into()));
        }
        if self.serve.workers == 0 {
            return Err(ServiceError::Config("serve.workers must be positive".into()));
        }
        if self.data.valid_from > self.data.test_from {
            return Err(ServiceError::Config("data.valid_from must not exceed data.test_from".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.workdir)
    }

    pub fn store_dir(&self) -> PathBuf {
        let s = &self.serve.store;
        if s.is_absolute() {
            s.clone()
        } else {
            self.workdir().join(s)
        }
    }

    /// Registry with checkpoints resolved; trainable backends without an
    /// explicit checkpoint default to `models/<name>.json` in the workdir.
    pub fn registry(&self) -> ModelRegistry {
        let models = self
            .models
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.checkpoint = match m.checkpoint.take() {
                    Some(p) => Some(self.resolve(&p)),
                    None if trainable(&m.backend) => Some(self.workdir().join("models").join(format!("{}.json", m.name))),
                    None => None,
                };
                m
            })
            .collect();
        ModelRegistry { models }
    }

    /// SHA-256 of the canonical JSON form (the base directory excluded).
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn trainable(backend: &str) -> bool {
    matches!(backend, "ngram-seq2seq" | "hashed-biencoder")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"workdir = "out""#;

    #[test]
    fn defaults_fill_in() {
        let c = Config::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 17);
        assert_eq!(c.data.years(), SplitYears::default());
        assert_eq!(c.retrieval.caps(), NeighborCaps::default());
        assert_eq!(c.serve.workers, 4);
    }

    #[test]
    fn unknown_keys_and_models_rejected() {
        assert!(Config::parse("workdir = \"x\"\nbogus = 1").is_err());
        let bad = r#"
workdir = "x"
[[predict.runs]]
model = "ghost"
task = "node"
"#;
        let err = Config::parse(bad).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn checkpoints_resolve_under_workdir() {
        let mut c = Config::parse(
            r#"
workdir = "out"
[[models]]
name = "s2s"
backend = "ngram-seq2seq"
[[models]]
name = "stub"
backend = "stub-biencoder"
"#,
        )
        .unwrap();
        c.base_dir = PathBuf::from("/cfg");
        let r = c.registry();
        assert_eq!(r.get("s2s").unwrap().checkpoint.as_deref(), Some(Path::new("/cfg/out/models/s2s.json")));
        assert_eq!(r.get("stub").unwrap().checkpoint, None);
        assert_eq!(c.store_dir(), PathBuf::from("/cfg/out/store"));
    }

    #[test]
    fn overrides_apply() {
        let o = TrainOverrides { learning_rate: Some(0.1), tau: Some(0.5), ..Default::default() };
        let t = o.apply(TrainConfig::seq2seq(), 9);
        assert_eq!((t.learning_rate, t.tau, t.seed), (0.1, 0.5, 9));
        assert_eq!(t.batch_size, TrainConfig::seq2seq().batch_size);
    }

    #[test]
    fn run_names() {
        let r = PredictRun {
            model: "a".into(),
            task: TaskKind::Node,
            neighbor_source: NeighborSource::Kg,
            rerank_with: Some("b".into()),
            no_finetune: true,
        };
        assert_eq!(r.name(), "a>b+nf+kg");
    }
}
