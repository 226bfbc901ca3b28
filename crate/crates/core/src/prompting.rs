//! Textual templates: seed prompts, model inputs and few-shot prompts.
//!
//! Every literal here is fixed; only the placeholders change. Inputs are
//! carried structurally in [`ModelInput`] next to the rendered string so that
//! a seed containing `| context:` never has to be parsed back out.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, NodeType, TaskInstance, TaskKind};
use crate::embedding::{dot, EmbeddingProvider};
use crate::inspiration::build_query;
use crate::text::stable_hash;
use crate::Result;

/// Token budget of the trainable generators and encoders.
pub const TRAINABLE_TOKEN_BUDGET: usize = 512;
/// Token budget of the remote completion client.
pub const REMOTE_TOKEN_BUDGET: usize = 2048;
/// Number of few-shot examples drawn from the training split.
pub const FEWSHOT_EXAMPLES: usize = 5;

const NEIGHBOR_SEPARATOR: &str = ", ";

/// `"{v} is used for {p}"` (forward) or `"{v} is done by using {p}"` (backward).
pub fn seed_prompt(seed: &str, target_type: NodeType, direction: Direction) -> String {
    match direction {
        Direction::Forward => format!("{seed} is used for {target_type}"),
        Direction::Backward => format!("{seed} is done by using {target_type}"),
    }
}

/// Token counting contract used for budget enforcement.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// The longest prefix of `text` with at most `max_tokens` tokens.
    fn truncate(&self, text: &str, max_tokens: usize) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate(&self, text: &str, max_tokens: usize) -> String {
        text.split_whitespace().take(max_tokens).collect::<Vec<_>>().join(" ")
    }
}

/// A composed model input with its parts kept alongside the rendered text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub prompt: String,
    pub neighbors: Vec<String>,
    pub background: String,
    pub text: String,
}

impl ModelInput {
    pub fn plain(prompt: &str, background: &str) -> Self {
        Self {
            prompt: prompt.to_string(),
            neighbors: Vec::new(),
            background: background.to_string(),
            text: render_input(prompt, &[], background),
        }
    }
}

fn render_input(prompt: &str, neighbors: &[String], background: &str) -> String {
    if neighbors.is_empty() {
        format!("{prompt} | context: {background}")
    } else {
        format!(
            "{prompt} | retrieve: {} | context: {background}",
            neighbors.join(NEIGHBOR_SEPARATOR)
        )
    }
}

/// `"P | retrieve: n_1, ..., n_k | context: B"`, or `"P | context: B"` with no
/// neighbours, fitted to `token_budget`.
///
/// Over budget, the context is cut from its tail first, then whole
/// neighbours are dropped from the tail of the retrieval list. The prompt is
/// never cut: if the prompt alone exceeds the budget it is returned bare.
pub fn compose_model_input(
    prompt: &str,
    neighbors: &[String],
    background: &str,
    token_budget: usize,
    tokenizer: &dyn Tokenizer,
) -> ModelInput {
    let full = render_input(prompt, neighbors, background);
    if tokenizer.count(&full) <= token_budget {
        return ModelInput {
            prompt: prompt.to_string(),
            neighbors: neighbors.to_vec(),
            background: background.to_string(),
            text: full,
        };
    }
    for keep in (0..=neighbors.len()).rev() {
        let kept = &neighbors[..keep];
        let header = tokenizer.count(&render_input(prompt, kept, ""));
        if header <= token_budget {
            let context = tokenizer.truncate(background, token_budget - header);
            return ModelInput {
                prompt: prompt.to_string(),
                neighbors: kept.to_vec(),
                text: render_input(prompt, kept, &context),
                background: context,
            };
        }
    }
    ModelInput {
        prompt: prompt.to_string(),
        neighbors: Vec::new(),
        background: String::new(),
        text: prompt.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FewShotMode {
    Random,
    Retrieved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub instance: TaskInstance,
    pub gold: String,
    #[serde(default)]
    pub neighbors: Option<Vec<String>>,
    /// Cosine similarity of the example's query to the target's query.
    #[serde(default)]
    pub similarity: Option<f64>,
}

fn starting_prompt(target: &TaskInstance) -> String {
    let (p, v) = (target.target_type, &target.seed);
    match target.direction {
        Direction::Forward => format!("Suggest a {p} that can be used for a natural language processing {v}"),
        Direction::Backward => format!("Suggest a {p} that for a natural language processing {v}"),
    }
}

fn render_example(inst: &TaskInstance, task: TaskKind, neighbors: Option<&[String]>, gold: Option<&str>) -> String {
    let mut context = inst.background.clone();
    if let Some(ns) = neighbors.filter(|ns| !ns.is_empty()) {
        if !context.is_empty() {
            context.push(' ');
        }
        context.push_str("The retrieval results are: ");
        context.push_str(&ns.join(NEIGHBOR_SEPARATOR));
    }
    let (p, v) = (inst.target_type, &inst.seed);
    let question = match (task, inst.direction) {
        (TaskKind::Sentence, Direction::Forward) => format!("which {p} can be used for {v}, and why?"),
        (TaskKind::Sentence, Direction::Backward) => format!("which {p} do we use {v}, and why?"),
        (TaskKind::Node, Direction::Forward) => format!("which {p} can be used for {v}?"),
        (TaskKind::Node, Direction::Backward) => format!("which {p} do we use {v}?"),
    };
    let mut out = format!("Consider the following context: {context} In that context, {question}");
    if let Some(g) = gold {
        out.push(' ');
        out.push_str(g);
    }
    out
}

/// Few-shot prompt for the remote completion baseline.
///
/// Node prompts open with a starting instruction; each example is rendered
/// with its gold answer and the final query without one. Blocks are
/// separated by blank lines. In retrieved mode the examples are ordered by
/// descending similarity (ties by instance id).
pub fn fewshot_prompt(
    target: &TaskInstance,
    examples: &[FewShotExample],
    mode: FewShotMode,
    task: TaskKind,
    neighbors: Option<&[String]>,
) -> String {
    let mut ordered: Vec<&FewShotExample> = examples.iter().collect();
    if mode == FewShotMode::Retrieved {
        ordered.sort_by(|a, b| {
            let (sa, sb) = (a.similarity.unwrap_or(f64::NEG_INFINITY), b.similarity.unwrap_or(f64::NEG_INFINITY));
            sb.total_cmp(&sa).then_with(|| a.instance.instance_id.cmp(&b.instance.instance_id))
        });
    }
    let mut blocks = Vec::with_capacity(examples.len() + 2);
    if task == TaskKind::Node {
        blocks.push(starting_prompt(target));
    }
    for ex in ordered {
        blocks.push(render_example(&ex.instance, task, ex.neighbors.as_deref(), Some(&ex.gold)));
    }
    blocks.push(render_example(target, task, neighbors, None));
    blocks.join("\n\n")
}

/// Training-split instances with their query embeddings, used to pick
/// few-shot examples.
pub struct FewShotPool {
    instances: Vec<TaskInstance>,
    vectors: Vec<Vec<f32>>,
}

impl FewShotPool {
    pub fn build(train: &[TaskInstance], provider: &dyn EmbeddingProvider) -> Result<Self> {
        let vectors = train
            .iter()
            .map(|i| provider.embed(&build_query(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instances: train.to_vec(),
            vectors,
        })
    }

    pub fn instances(&self) -> &[TaskInstance] {
        &self.instances
    }

    /// Up to `k` examples from other papers than the target's. Random mode
    /// samples uniformly under `seed`; retrieved mode takes the most similar
    /// queries.
    pub fn select(
        &self,
        target: &TaskInstance,
        mode: FewShotMode,
        k: usize,
        provider: &dyn EmbeddingProvider,
        seed: u64,
    ) -> Result<Vec<FewShotExample>> {
        let eligible: Vec<usize> = (0..self.instances.len())
            .filter(|&i| self.instances[i].paper_id != target.paper_id)
            .collect();
        let picked: Vec<(usize, Option<f64>)> = match mode {
            FewShotMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
                    &seed.to_le_bytes(),
                    target.instance_id.as_bytes(),
                ]));
                let n = k.min(eligible.len());
                sample(&mut rng, eligible.len(), n)
                    .into_iter()
                    .map(|j| (eligible[j], None))
                    .collect()
            }
            FewShotMode::Retrieved => {
                let q = provider.embed(&build_query(target))?;
                let mut scored: Vec<(usize, f64)> =
                    eligible.iter().map(|&i| (i, dot(&q, &self.vectors[i]))).collect();
                scored.sort_by(|a, b| {
                    b.1.total_cmp(&a.1).then_with(|| {
                        self.instances[a.0].instance_id.cmp(&self.instances[b.0].instance_id)
                    })
                });
                scored.truncate(k);
                scored.into_iter().map(|(i, s)| (i, Some(s))).collect()
            }
        };
        Ok(picked
            .into_iter()
            .map(|(i, similarity)| {
                let instance = self.instances[i].clone();
                FewShotExample {
                    gold: instance.gold().to_string(),
                    instance,
                    neighbors: None,
                    similarity,
                }
            })
            .collect())
    }
}

/// Every template with its placeholders, for golden tests in other languages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateReference {
    pub forward_seed: String,
    pub backward_seed: String,
    pub enriched_input: String,
    pub plain_input: String,
    pub neighbor_separator: String,
    pub query: String,
    pub sentence_forward_example: String,
    pub sentence_backward_example: String,
    pub node_forward_example: String,
    pub node_backward_example: String,
    pub node_forward_start: String,
    pub node_backward_start: String,
    pub retrieval_suffix: String,
    pub fewshot_block_separator: String,
}

impl TemplateReference {
    pub fn current() -> Self {
        let placeholder = |task, direction| {
            let inst = TaskInstance {
                instance_id: String::new(),
                task,
                seed: "{v}".into(),
                target_type: NodeType::Task,
                direction,
                background: "{B}".into(),
                background_sentences: vec![],
                background_terms: vec![],
                target_node: String::new(),
                target_sentence: None,
                paper_id: String::new(),
                year: 0,
            };
            render_example(&inst, task, None, Some(if task == TaskKind::Node { "{u}" } else { "{s}" }))
                .replace("Task", "{p}")
        };
        let start = |direction| {
            let inst = TaskInstance {
                instance_id: String::new(),
                task: TaskKind::Node,
                seed: "{v}".into(),
                target_type: NodeType::Task,
                direction,
                background: String::new(),
                background_sentences: vec![],
                background_terms: vec![],
                target_node: String::new(),
                target_sentence: None,
                paper_id: String::new(),
                year: 0,
            };
            starting_prompt(&inst).replace("Task", "{p}")
        };
        Self {
            forward_seed: "{v} is used for {p}".into(),
            backward_seed: "{v} is done by using {p}".into(),
            enriched_input: "{P} | retrieve: {n_1, ..., n_k} | context: {B}".into(),
            plain_input: "{P} | context: {B}".into(),
            neighbor_separator: NEIGHBOR_SEPARATOR.into(),
            query: "{P} Context: {B}".into(),
            sentence_forward_example: placeholder(TaskKind::Sentence, Direction::Forward),
            sentence_backward_example: placeholder(TaskKind::Sentence, Direction::Backward),
            node_forward_example: placeholder(TaskKind::Node, Direction::Forward),
            node_backward_example: placeholder(TaskKind::Node, Direction::Backward),
            node_forward_start: start(Direction::Forward),
            node_backward_start: start(Direction::Backward),
            retrieval_suffix: " The retrieval results are: {n_1, ..., n_k}".into(),
            fewshot_block_separator: "\n\n".into(),
        }
    }
}
