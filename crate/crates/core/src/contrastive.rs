//! In-context negative sampling and the two contrastive objectives: a
//! decoder-hidden-state InfoNCE for the seq2seq generator and an
//! additive-margin InfoNCE for the dual encoder.

use std::collections::{HashSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskInstance, TaskKind};
use crate::prompting::seed_prompt;
use crate::text::{normalize, stable_hash};
use crate::{Error, Result};

pub const SEQ2SEQ_TAU: f64 = 1.0;
pub const DUAL_ENCODER_TAU: f64 = 0.05;
pub const DEFAULT_MARGIN: f64 = 0.02;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_PREBATCH_DEPTH: usize = 2;

pub const SENTENCE_NEGATIVES: usize = 2;
pub const SEQ2SEQ_NODE_NEGATIVES: usize = 10;
pub const DUAL_ENCODER_NEGATIVES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Seq2Seq,
    DualEncoder,
}

/// Number of in-context negatives drawn per training instance.
pub fn incontext_count(task: TaskKind, kind: ModelKind) -> usize {
    match (task, kind) {
        (TaskKind::Sentence, _) => SENTENCE_NEGATIVES,
        (TaskKind::Node, ModelKind::Seq2Seq) => SEQ2SEQ_NODE_NEGATIVES,
        (TaskKind::Node, ModelKind::DualEncoder) => DUAL_ENCODER_NEGATIVES,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingOptions {
    /// Treat the seed prompt line as one more candidate sentence.
    pub include_prompt_line: bool,
}

/// Uniform sample without replacement of context sentences (sentence task)
/// or background term mentions (node task). The gold target never appears.
/// Results keep document order.
pub fn sample_incontext_negatives(instance: &TaskInstance, kind: ModelKind, seed: u64) -> Vec<String> {
    sample_incontext_negatives_with(instance, kind, seed, SamplingOptions::default())
}

pub fn sample_incontext_negatives_with(
    instance: &TaskInstance,
    kind: ModelKind,
    seed: u64,
    options: SamplingOptions,
) -> Vec<String> {
    if instance.background.trim().is_empty() {
        return Vec::new();
    }
    let gold = normalize(instance.gold());
    let mut seen = HashSet::new();
    let mut pool: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        let n = normalize(s);
        if !n.is_empty() && n != gold && seen.insert(n) {
            pool.push(s.to_string());
        }
    };
    match instance.task {
        TaskKind::Sentence => {
            if options.include_prompt_line {
                push(&seed_prompt(&instance.seed, instance.target_type, instance.direction));
            }
            instance.background_sentences.iter().for_each(|s| push(s));
        }
        TaskKind::Node => instance.background_terms.iter().for_each(|s| push(s)),
    }
    let k = incontext_count(instance.task, kind).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), instance.instance_id.as_bytes()]));
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

/// Projection and temperature for the hidden-state loss, plus the margin
/// used by the dual-encoder loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// `W_y`, one weight per hidden unit.
    pub weight: Vec<f64>,
    /// `b_y`, shared across positions.
    pub bias: f64,
    pub tau: f64,
    pub margin: f64,
}

impl LossParams {
    pub fn new(weight: Vec<f64>, bias: f64, tau: f64, margin: f64) -> Result<Self> {
        let p = Self { weight, bias, tau, margin };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::Parameter(format!("margin must be non-negative, got {}", self.margin)));
        }
        if self.weight.is_empty() {
            return Err(Error::Shape("projection weight is empty".into()));
        }
        Ok(())
    }
}

/// Hidden states of one target sequence, positions × hidden.
pub type Hidden = [Vec<f64>];

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqLoss {
    pub loss: f64,
    pub ratio: f64,
    pub y_pos: f64,
    pub y_neg: Vec<f64>,
    pub grad_pos: Vec<Vec<f64>>,
    pub grad_neg: Vec<Vec<Vec<f64>>>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_hidden(h: &Hidden, dim: usize, what: &str) -> Result<()> {
    if h.is_empty() {
        return Err(Error::Shape(format!("{what} has no positions")));
    }
    if let Some(row) = h.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape(format!("{what}: hidden size {} != projection size {dim}", row.len())));
    }
    Ok(())
}

/// `σ(Avg_t(W_y·h_t + b_y))` and the mean hidden vector.
fn project(h: &Hidden, p: &LossParams) -> (f64, Vec<f64>) {
    let t = h.len() as f64;
    let mut mean = vec![0.0; p.weight.len()];
    for row in h {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / t;
        }
    }
    let z = mean.iter().zip(&p.weight).map(|(m, w)| m * w).sum::<f64>() + p.bias;
    (sigmoid(z), mean)
}

/// Projection output `y` of one sequence under the head, with shape checks.
pub fn projection_score(h: &Hidden, params: &LossParams) -> Result<f64> {
    params.validate()?;
    check_hidden(h, params.weight.len(), "sequence")?;
    Ok(project(h, params).0)
}

/// Softmax over `[pos, neg...]` logits and `-log p(pos)`.
fn infonce(pos_logit: f64, neg_logits: &[f64]) -> (f64, Vec<f64>) {
    let mut logits = Vec::with_capacity(neg_logits.len() + 1);
    logits.push(pos_logit);
    logits.extend_from_slice(neg_logits);
    let lse = log_sum_exp(&logits);
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    (lse - pos_logit, probs)
}

/// `exp(y⁺/τ) / (exp(y⁺/τ) + Σ exp(y⁻/τ))` for already pooled scores.
pub fn contrastive_ratio(y_pos: f64, y_neg: &[f64], tau: f64) -> f64 {
    let neg: Vec<f64> = y_neg.iter().map(|y| y / tau).collect();
    infonce(y_pos / tau, &neg).1[0]
}

/// InfoNCE over pooled, projected decoder states: the ratio is
/// `exp(y⁺/τ) / (Σ exp(y⁻/τ) + exp(y⁺/τ))` and the loss is `-ln ratio`.
/// Gradients are taken with respect to every hidden entry, `W_y` and `b_y`.
pub fn seq2seq_contrastive_loss(pos: &Hidden, negs: &[&Hidden], params: &LossParams) -> Result<Seq2SeqLoss> {
    params.validate()?;
    let dim = params.weight.len();
    check_hidden(pos, dim, "positive")?;
    for (i, n) in negs.iter().enumerate() {
        check_hidden(n, dim, &format!("negative {i}"))?;
    }
    if negs.is_empty() {
        log::warn!("contrastive loss evaluated with zero negatives");
    }
    let tau = params.tau;
    let (y_pos, mean_pos) = project(pos, params);
    let projected: Vec<(f64, Vec<f64>)> = negs.iter().map(|n| project(n, params)).collect();
    let y_neg: Vec<f64> = projected.iter().map(|(y, _)| *y).collect();
    let neg_logits: Vec<f64> = y_neg.iter().map(|y| y / tau).collect();
    let (loss, probs) = infonce(y_pos / tau, &neg_logits);

    // dL/dz for each sequence, z being the pre-sigmoid pooled projection.
    let dz_pos = (probs[0] - 1.0) / tau * y_pos * (1.0 - y_pos);
    let dz_neg: Vec<f64> = probs[1..]
        .iter()
        .zip(&y_neg)
        .map(|(p, y)| p / tau * y * (1.0 - y))
        .collect();

    let row_grad = |dz: f64, t: usize| -> Vec<f64> { params.weight.iter().map(|w| dz * w / t as f64).collect() };
    let grad_pos = vec![row_grad(dz_pos, pos.len()); pos.len()];
    let grad_neg = negs
        .iter()
        .zip(&dz_neg)
        .map(|(n, dz)| vec![row_grad(*dz, n.len()); n.len()])
        .collect();
    let mut grad_weight: Vec<f64> = mean_pos.iter().map(|m| dz_pos * m).collect();
    for ((_, mean), dz) in projected.iter().zip(&dz_neg) {
        for (g, m) in grad_weight.iter_mut().zip(mean) {
            *g += dz * m;
        }
    }
    let grad_bias = dz_pos + dz_neg.iter().sum::<f64>();
    Ok(Seq2SeqLoss {
        loss,
        ratio: probs[0],
        y_pos,
        y_neg,
        grad_pos,
        grad_neg,
        grad_weight,
        grad_bias,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualLoss {
    pub loss: f64,
    pub ratio: f64,
    pub grad_pos: f64,
    pub grad_neg: Vec<f64>,
}

/// Additive-margin InfoNCE: the margin is subtracted from the positive
/// score only.
pub fn dual_encoder_infonce(pos_score: f64, neg_scores: &[f64], margin: f64, tau: f64) -> Result<DualLoss> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let in_range = |s: f64| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&s);
    if !in_range(pos_score) || !neg_scores.iter().all(|s| in_range(*s)) {
        return Err(Error::Parameter("scores must lie in [-1, 1]".into()));
    }
    if neg_scores.is_empty() {
        log::warn!("contrastive loss evaluated with zero negatives");
    }
    let neg_logits: Vec<f64> = neg_scores.iter().map(|s| s / tau).collect();
    let (loss, probs) = infonce((pos_score - margin) / tau, &neg_logits);
    Ok(DualLoss {
        loss,
        ratio: probs[0],
        grad_pos: (probs[0] - 1.0) / tau,
        grad_neg: probs[1..].iter().map(|p| p / tau).collect(),
    })
}

/// Generation cross-entropy plus the weighted contrastive term.
pub fn total_loss(cross_entropy: f64, contrastive: f64, lambda: f64) -> f64 {
    cross_entropy + lambda * contrastive
}

/// A candidate entity with its cached encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub vector: Vec<f32>,
}

/// Cached candidate encodings of the most recent batches.
#[derive(Clone, Debug, PartialEq)]
pub struct PreBatchRing {
    depth: usize,
    batches: VecDeque<Vec<Candidate>>,
}

impl Default for PreBatchRing {
    fn default() -> Self {
        Self::new(DEFAULT_PREBATCH_DEPTH)
    }
}

impl PreBatchRing {
    pub fn new(depth: usize) -> Self {
        Self { depth, batches: VecDeque::with_capacity(depth + 1) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn push(&mut self, batch: Vec<Candidate>) {
        if self.depth == 0 {
            return;
        }
        self.batches.push_back(batch);
        while self.batches.len() > self.depth {
            self.batches.pop_front();
        }
    }

    pub fn batches(&self) -> impl Iterator<Item = &Vec<Candidate>> {
        self.batches.iter()
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.batches.iter().flatten()
    }

    pub fn clear(&mut self) {
        self.batches.clear();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub in_context: Vec<String>,
    pub in_batch: Vec<Candidate>,
    pub pre_batch: Vec<Candidate>,
    pub self_negative: Option<Candidate>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.in_context.len() + self.in_batch.len() + self.pre_batch.len() + usize::from(self.self_negative.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> impl Iterator<Item = &Candidate> {
        self.self_negative.iter().chain(&self.in_batch).chain(&self.pre_batch)
    }
}

/// Union of in-batch, pre-batch, self and in-context negatives for the
/// anchor at `anchor` in `batch`. Candidates equal to the gold (by id, or by
/// normalized text for in-context strings) are dropped, and each identity
/// is kept once, in the order self, in-batch, pre-batch, in-context.
pub fn assemble_negatives(
    batch: &[Candidate],
    anchor: usize,
    ring: &PreBatchRing,
    self_negative: Option<Candidate>,
    in_context: &[String],
) -> NegativeSet {
    let Some(gold) = batch.get(anchor) else {
        return NegativeSet::default();
    };
    let gold_key = normalize(&gold.id);
    let mut seen: HashSet<String> = HashSet::from([gold_key]);
    let mut keep = |c: &Candidate| seen.insert(normalize(&c.id));
    let self_negative = self_negative.filter(|c| keep(c));
    let in_batch = batch.iter().filter(|c| keep(c)).cloned().collect();
    let pre_batch = ring.candidates().filter(|c| keep(c)).cloned().collect();
    let in_context = in_context
        .iter()
        .filter(|t| seen.insert(normalize(t)))
        .cloned()
        .collect();
    NegativeSet { in_context, in_batch, pre_batch, self_negative }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Direction, NodeType};

    fn instance(task: TaskKind, sentences: &[&str], terms: &[&str], gold: &str) -> TaskInstance {
        TaskInstance {
            instance_id: "p:0:fw".into(),
            task,
            seed: "seed".into(),
            target_type: NodeType::Method,
            direction: Direction::Forward,
            background: sentences.join(" "),
            background_sentences: sentences.iter().map(|s| s.to_string()).collect(),
            background_terms: terms.iter().map(|s| s.to_string()).collect(),
            target_node: gold.into(),
            target_sentence: (task == TaskKind::Sentence).then(|| format!("we use {gold}.")),
            paper_id: "p".into(),
            year: 2020,
        }
    }

    fn params(w: Vec<f64>, tau: f64) -> LossParams {
        LossParams::new(w, 0.0, tau, 0.0).unwrap()
    }

    #[test]
    fn projection_matches_loss_y_pos() {
        let p = params(vec![0.3, -0.2], 0.5);
        let h = vec![vec![1.0, 2.0], vec![0.5, -1.0]];
        let n = vec![vec![0.0, 1.0]];
        let via_loss = seq2seq_contrastive_loss(&h, &[n.as_slice()], &p).unwrap().y_pos;
        assert_eq!(projection_score(&h, &p).unwrap(), via_loss);
        assert!(projection_score(&[vec![1.0]], &p).is_err());
    }

    #[test]
    fn single_sentence_background_gives_one_negative() {
        let i = instance(TaskKind::Sentence, &["only sentence."], &[], "x");
        assert_eq!(sample_incontext_negatives(&i, ModelKind::Seq2Seq, 1), vec!["only sentence."]);
        let with = sample_incontext_negatives_with(&i, ModelKind::Seq2Seq, 1, SamplingOptions { include_prompt_line: true });
        assert_eq!(with.len(), 2);
        assert_eq!(with[0], "seed is used for Method");
    }

    #[test]
    fn node_negative_counts_and_gold_exclusion() {
        let terms: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = terms.iter().map(|s| s.as_str()).collect();
        let i = instance(TaskKind::Node, &["b."], &refs, "t3");
        let s = sample_incontext_negatives(&i, ModelKind::Seq2Seq, 9);
        assert_eq!(s.len(), 10);
        assert!(!s.contains(&"t3".to_string()));
        assert_eq!(sample_incontext_negatives(&i, ModelKind::DualEncoder, 9).len(), 5);
        assert_eq!(s, sample_incontext_negatives(&i, ModelKind::Seq2Seq, 9));
        let empty = instance(TaskKind::Node, &[], &["a"], "x");
        assert!(sample_incontext_negatives(&empty, ModelKind::Seq2Seq, 0).is_empty());
    }

    #[test]
    fn symmetric_case_is_ln2() {
        let h = vec![vec![0.3, -0.2], vec![0.1, 0.4]];
        let r = seq2seq_contrastive_loss(&h, &[&h], &params(vec![0.5, 1.5], 1.0)).unwrap();
        assert!((r.ratio - 0.5).abs() < 1e-12);
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);
        let z = seq2seq_contrastive_loss(&h, &[], &params(vec![0.5, 1.5], 1.0)).unwrap();
        assert_eq!((z.ratio, z.loss), (1.0, 0.0));
    }

    #[test]
    fn shape_and_parameter_errors() {
        let h = vec![vec![0.3, -0.2]];
        let bad = vec![vec![0.3]];
        assert!(matches!(seq2seq_contrastive_loss(&h, &[&bad], &params(vec![1.0, 1.0], 1.0)), Err(Error::Shape(_))));
        assert!(matches!(LossParams::new(vec![1.0], 0.0, 0.0, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(dual_encoder_infonce(0.5, &[0.1], 0.0, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn dual_encoder_reference_value() {
        let r = dual_encoder_infonce(1.0, &[1.0], 0.02, 0.05).unwrap();
        let expect = 1.0 / (1.0 + 0.4f64.exp());
        assert!((r.ratio - expect).abs() < 1e-12);
        assert!((r.loss + expect.ln()).abs() < 1e-12);
        let n = dual_encoder_infonce(0.2, &[0.2; 4], 0.0, 0.05).unwrap();
        assert!((n.ratio - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ring_and_assembly() {
        let c = |id: &str| Candidate { id: id.into(), vector: vec![0.0] };
        let mut ring = PreBatchRing::default();
        ring.push(vec![c("x")]);
        ring.push(vec![c("a"), c("b"), c("c")]);
        ring.push(vec![c("d"), c("e"), c("f"), c("g")]);
        assert_eq!(ring.candidates().count(), 7);
        let batch = vec![c("q"), c("r"), c("s")];
        let n = assemble_negatives(&batch, 0, &ring, Some(c("seed")), &["q".into(), "plms".into()]);
        assert_eq!(n.in_batch.len(), 2);
        assert_eq!(n.pre_batch.len(), 7);
        assert_eq!(n.in_context, vec!["plms"]);
        assert_eq!(n.len(), 11);
        let lone = assemble_negatives(&[c("q")], 0, &PreBatchRing::default(), None, &[]);
        assert!(lone.is_empty());
    }
}
