//! Node predictors over composed model inputs, and the two-stage reranking
//! pipeline that feeds one model's top ten into another's retrieve block.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{complete_fewshot, generate_nodes, BiEncoder, CompletionClient, DecodingConfig, EncodedBank, FewShotSampling, Generator, MAX_NODE_OUTPUTS};
use crate::corpus::{TaskInstance, TaskKind};
use crate::embedding::EmbeddingProvider;
use crate::evalsuite::ScoredText;
use crate::inspiration::{NeighborSet, NeighborSource, Retriever};
use crate::kgraph::EntityBank;
use crate::prompting::{
    compose_model_input, fewshot_prompt, seed_prompt, FewShotMode, FewShotPool, ModelInput, Tokenizer, WhitespaceTokenizer,
    REMOTE_TOKEN_BUDGET, TRAINABLE_TOKEN_BUDGET,
};
use crate::Result;

/// A model that ranks candidate nodes for one instance.
pub trait NodePredictor: Send + Sync {
    fn id(&self) -> &str;
    fn predict(&self, instance: &TaskInstance, input: &ModelInput) -> Result<Vec<ScoredText>>;
}

pub struct GeneratorNodes<G> {
    pub generator: G,
    pub config: DecodingConfig,
}

impl<G: Generator> NodePredictor for GeneratorNodes<G> {
    fn id(&self) -> &str {
        self.generator.id()
    }
    fn predict(&self, instance: &TaskInstance, input: &ModelInput) -> Result<Vec<ScoredText>> {
        generate_nodes(&self.generator, &instance.instance_id, &input.text, &self.config)
    }
}

pub struct BiEncoderNodes<B> {
    encoder: B,
    bank: EncodedBank,
    k: usize,
}

impl<B: BiEncoder> BiEncoderNodes<B> {
    pub fn new(encoder: B, bank: &EntityBank, k: usize) -> Result<Self> {
        let bank = EncodedBank::build(&encoder, bank)?;
        Ok(Self { encoder, bank, k })
    }
}

impl<B: BiEncoder> NodePredictor for BiEncoderNodes<B> {
    fn id(&self) -> &str {
        self.encoder.id()
    }
    fn predict(&self, _instance: &TaskInstance, input: &ModelInput) -> Result<Vec<ScoredText>> {
        self.bank.rank(&self.encoder, &input.text, self.k)
    }
}

/// Remote few-shot completion as a node predictor. Examples that push the
/// prompt over the token budget are dropped from the end.
pub struct FewShotNodes<C> {
    pub client: C,
    pub pool: Arc<FewShotPool>,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub mode: FewShotMode,
    pub examples: usize,
    pub seed: u64,
    pub sampling: FewShotSampling,
}

impl<C: CompletionClient> NodePredictor for FewShotNodes<C> {
    fn id(&self) -> &str {
        self.client.id()
    }
    fn predict(&self, instance: &TaskInstance, input: &ModelInput) -> Result<Vec<ScoredText>> {
        let mut examples = self.pool.select(instance, self.mode, self.examples, self.provider.as_ref(), self.seed)?;
        let neighbors = (!input.neighbors.is_empty()).then_some(input.neighbors.as_slice());
        let prompt = loop {
            let p = fewshot_prompt(instance, &examples, self.mode, TaskKind::Node, neighbors);
            if examples.is_empty() || WhitespaceTokenizer.count(&p) <= REMOTE_TOKEN_BUDGET {
                break p;
            }
            examples.pop();
        };
        let out = complete_fewshot(&self.client, &prompt, TaskKind::Node, &self.sampling)?;
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(i, t)| ScoredText::new(t, -(i as f64)))
            .collect())
    }
}

/// Returns its retrieve block in order; an identity second stage.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoRetrieve;

impl NodePredictor for EchoRetrieve {
    fn id(&self) -> &str {
        "echo-retrieve"
    }
    fn predict(&self, _instance: &TaskInstance, input: &ModelInput) -> Result<Vec<ScoredText>> {
        Ok(input
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| ScoredText::new(n.clone(), -(i as f64)))
            .collect())
    }
}

pub trait NeighborProvider: Send + Sync {
    fn neighbors(&self, instance: &TaskInstance) -> Result<NeighborSet>;
}

impl NeighborProvider for Retriever<'_> {
    fn neighbors(&self, instance: &TaskInstance) -> Result<NeighborSet> {
        self.retrieve(instance)
    }
}

/// Precomputed neighbour sets keyed by instance id; missing ids are empty.
#[derive(Clone, Debug, Default)]
pub struct StaticNeighbors(pub HashMap<String, NeighborSet>);

impl NeighborProvider for StaticNeighbors {
    fn neighbors(&self, instance: &TaskInstance) -> Result<NeighborSet> {
        Ok(self.0.get(&instance.instance_id).cloned().unwrap_or_default())
    }
}

/// Counts and records every retrieval it forwards.
pub struct RetrievalSpy<N> {
    inner: N,
    calls: AtomicUsize,
    seen: Mutex<Vec<String>>,
}

impl<N: NeighborProvider> RetrievalSpy<N> {
    pub fn new(inner: N) -> Self {
        Self { inner, calls: AtomicUsize::new(0), seen: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn instance_ids(&self) -> Vec<String> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl<N: NeighborProvider> NeighborProvider for RetrievalSpy<N> {
    fn neighbors(&self, instance: &TaskInstance) -> Result<NeighborSet> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).push(instance.instance_id.clone());
        self.inner.neighbors(instance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub first: Vec<ScoredText>,
    pub second_input: ModelInput,
    pub outputs: Vec<ScoredText>,
    pub variant: String,
}

/// Two-stage reranking. The first model sees the retrieved neighbours of
/// `first_source` (none by default); the second sees the first model's top
/// ten in place of retrieved neighbours and is never given the original
/// neighbour set. `no_finetune` marks a second model that was not adapted
/// to this input shape; it only changes the reported variant id.
pub struct RerankPipeline<'a> {
    pub first: &'a dyn NodePredictor,
    pub second: &'a dyn NodePredictor,
    pub first_source: NeighborSource,
    pub no_finetune: bool,
    pub token_budget: usize,
}

impl<'a> RerankPipeline<'a> {
    pub fn new(first: &'a dyn NodePredictor, second: &'a dyn NodePredictor) -> Self {
        Self { first, second, first_source: NeighborSource::None, no_finetune: false, token_budget: TRAINABLE_TOKEN_BUDGET }
    }

    pub fn variant(&self) -> String {
        let base = format!("{}>{}", self.first.id(), self.second.id());
        if self.no_finetune {
            format!("{base}+nf")
        } else {
            base
        }
    }

    pub fn run(&self, instance: &TaskInstance, retrieval: &dyn NeighborProvider) -> Result<PipelineOutput> {
        let prompt = seed_prompt(&instance.seed, instance.target_type, instance.direction);
        let first_neighbors = match self.first_source {
            NeighborSource::None => Vec::new(),
            src => retrieval.neighbors(instance)?.get(src).to_vec(),
        };
        let tok = WhitespaceTokenizer;
        let first_input = compose_model_input(&prompt, &first_neighbors, &instance.background, self.token_budget, &tok);
        let mut first = self.first.predict(instance, &first_input)?;
        first.truncate(MAX_NODE_OUTPUTS);
        let top: Vec<String> = first.iter().map(|o| o.text.clone()).collect();
        let second_input = compose_model_input(&prompt, &top, &instance.background, self.token_budget, &tok);
        let mut outputs = self.second.predict(instance, &second_input)?;
        outputs.truncate(MAX_NODE_OUTPUTS);
        Ok(PipelineOutput { first, second_input, outputs, variant: self.variant() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Direction, NodeType};
    use crate::genmodels::ScriptedGenerator;

    fn instance() -> TaskInstance {
        TaskInstance {
            instance_id: "p:0:fw".into(),
            task: TaskKind::Node,
            seed: "seed".into(),
            target_type: NodeType::Method,
            direction: Direction::Forward,
            background: "some background.".into(),
            background_sentences: vec!["some background.".into()],
            background_terms: vec![],
            target_node: "gold".into(),
            target_sentence: None,
            paper_id: "p".into(),
            year: 2022,
        }
    }

    fn scripted(n: usize) -> GeneratorNodes<ScriptedGenerator> {
        let outs = (0..n).map(|i| ScoredText::new(format!("cand {i}"), -(i as f64))).collect();
        GeneratorNodes { generator: ScriptedGenerator::new("first", outs), config: DecodingConfig::node() }
    }

    #[test]
    fn identity_second_stage_returns_first_top_ten() {
        let first = scripted(14);
        let spy = RetrievalSpy::new(StaticNeighbors::default());
        let out = RerankPipeline::new(&first, &EchoRetrieve).run(&instance(), &spy).unwrap();
        assert_eq!(out.outputs, out.first);
        assert_eq!(out.second_input.neighbors.len(), 10);
        assert!(out.second_input.text.contains("| retrieve: cand 0, cand 1,"));
        assert_eq!(spy.calls(), 0);
    }

    #[test]
    fn short_first_list_is_passed_as_is() {
        let first = scripted(3);
        let out = RerankPipeline::new(&first, &EchoRetrieve).run(&instance(), &StaticNeighbors::default()).unwrap();
        assert_eq!(out.second_input.neighbors, vec!["cand 0", "cand 1", "cand 2"]);
    }

    #[test]
    fn retrieval_only_feeds_the_first_stage() {
        let first = EchoRetrieve;
        let mut m = HashMap::new();
        m.insert("p:0:fw".to_string(), NeighborSet { semantic: vec!["n1".into(), "n2".into()], ..Default::default() });
        let spy = RetrievalSpy::new(StaticNeighbors(m));
        let mut p = RerankPipeline::new(&first, &EchoRetrieve);
        p.first_source = NeighborSource::Semantic;
        p.no_finetune = true;
        let out = p.run(&instance(), &spy).unwrap();
        assert_eq!(spy.calls(), 1);
        assert_eq!(out.second_input.neighbors, vec!["n1", "n2"]);
        assert!(out.variant.ends_with("+nf"));
    }
}
