//! Two-tower bi-encoder over hashed word and character n-gram features,
//! trained with the additive-margin InfoNCE loss using in-batch, pre-batch,
//! self and in-context negatives.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{BiEncoder, EarlyStopping, EpochStats, TrainConfig, TrainPair, TrainReport};
use crate::contrastive::{assemble_negatives, dual_encoder_infonce, Candidate, PreBatchRing};
use crate::embedding::dot;
use crate::evalsuite::ScoredText;
use crate::inspiration::top_k_by;
use crate::kgraph::EntityBank;
use crate::prompting::{Tokenizer, WhitespaceTokenizer};
use crate::text::{normalize, stable_hash, tokens};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedBiEncoderConfig {
    pub dimension: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for HashedBiEncoderConfig {
    fn default() -> Self {
        Self { dimension: 64, buckets: 2048, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tower {
    Query,
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedBiEncoder {
    id: String,
    config: HashedBiEncoderConfig,
    max_tokens: usize,
    /// Row-major `buckets × dimension`.
    query: Vec<f32>,
    candidate: Vec<f32>,
}

struct Encoded {
    unit: Vec<f32>,
    norm: f64,
    features: Vec<(usize, f64)>,
}

impl HashedBiEncoder {
    /// Both towers start from the same random projection, so before training
    /// a text encodes to the same vector on either side.
    pub fn new(id: impl Into<String>, config: HashedBiEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (config.dimension as f64).sqrt()).expect("valid std");
        let query: Vec<f32> = (0..config.buckets * config.dimension).map(|_| normal.sample(&mut rng) as f32).collect();
        Self {
            id: id.into(),
            candidate: query.clone(),
            query,
            config,
            max_tokens: crate::prompting::TRAINABLE_TOKEN_BUDGET,
        }
    }

    /// Mean-pooled hashed features: words, word bigrams, character trigrams.
    fn features(&self, text: &str) -> Vec<(usize, f64)> {
        let text = WhitespaceTokenizer.truncate(text, self.max_tokens);
        let words = tokens(&normalize(&text));
        let mut keys: Vec<String> = words.iter().map(|w| format!("w:{w}")).collect();
        keys.extend(words.windows(2).map(|w| format!("b:{} {}", w[0], w[1])));
        for w in &words {
            let chars: Vec<char> = format!("<{w}>").chars().collect();
            keys.extend(chars.windows(3).map(|c| format!("c:{}", c.iter().collect::<String>())));
        }
        if keys.is_empty() {
            keys.push("<empty>".into());
        }
        let share = 1.0 / keys.len() as f64;
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for k in keys {
            let b = (stable_hash(&[k.as_bytes()]) % self.config.buckets as u64) as usize;
            *acc.entry(b).or_default() += share;
        }
        let mut f: Vec<(usize, f64)> = acc.into_iter().collect();
        f.sort_unstable_by_key(|x| x.0);
        f
    }

    fn weights(&self, tower: Tower) -> &[f32] {
        match tower {
            Tower::Query => &self.query,
            Tower::Candidate => &self.candidate,
        }
    }

    fn encode(&self, tower: Tower, text: &str) -> Encoded {
        let d = self.config.dimension;
        let w = self.weights(tower);
        let features = self.features(text);
        let mut v = vec![0.0f64; d];
        for &(b, x) in &features {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj += x * f64::from(w[b * d + j]);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        Encoded { unit: v.iter().map(|x| (x / norm) as f32).collect(), norm, features }
    }

    /// Gradient w.r.t. the unit vector pushed back to the sparse weights.
    fn backprop(&self, e: &Encoded, g_unit: &[f64], grads: &mut BTreeMap<usize, f64>) {
        let d = self.config.dimension;
        let proj: f64 = e.unit.iter().zip(g_unit).map(|(u, g)| f64::from(*u) * g).sum();
        let g_raw: Vec<f64> = e.unit.iter().zip(g_unit).map(|(u, g)| (g - f64::from(*u) * proj) / e.norm).collect();
        for &(b, x) in &e.features {
            for (j, g) in g_raw.iter().enumerate() {
                *grads.entry(b * d + j).or_default() += g * x;
            }
        }
    }

    /// Mean loss over `pairs` with in-batch negatives only, no updates.
    fn evaluate(&self, pairs: &[TrainPair], config: &TrainConfig) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for batch in pairs.chunks(config.batch_size) {
            let q: Vec<Encoded> = batch.iter().map(|p| self.encode(Tower::Query, &p.input)).collect();
            let c: Vec<Encoded> = batch.iter().map(|p| self.encode(Tower::Candidate, &p.target)).collect();
            for i in 0..batch.len() {
                let negs: Vec<f64> = (0..batch.len())
                    .filter(|&j| j != i && normalize(&batch[j].target) != normalize(&batch[i].target))
                    .map(|j| dot(&q[i].unit, &c[j].unit).clamp(-1.0, 1.0))
                    .collect();
                total += dual_encoder_infonce(dot(&q[i].unit, &c[i].unit).clamp(-1.0, 1.0), &negs, config.margin, config.tau)?.loss;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    fn train_epoch(
        &mut self,
        pairs: &[TrainPair],
        config: &TrainConfig,
        ring: &mut PreBatchRing,
        adam_q: &mut Adam,
        adam_c: &mut Adam,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for batch in pairs.chunks(config.batch_size) {
            let q: Vec<Encoded> = batch.iter().map(|p| self.encode(Tower::Query, &p.input)).collect();
            let c: Vec<Encoded> = batch.iter().map(|p| self.encode(Tower::Candidate, &p.target)).collect();
            let batch_cands: Vec<Candidate> = batch
                .iter()
                .zip(&c)
                .map(|(p, e)| Candidate { id: p.target.clone(), vector: e.unit.clone() })
                .collect();
            let d = self.config.dimension;
            let mut gq: BTreeMap<usize, f64> = BTreeMap::new();
            let mut gc: BTreeMap<usize, f64> = BTreeMap::new();
            let mut g_cand_unit: Vec<Vec<f64>> = vec![vec![0.0; d]; batch.len()];
            let index_of: BTreeMap<&str, usize> = batch.iter().enumerate().map(|(i, p)| (p.target.as_str(), i)).collect();

            for (i, p) in batch.iter().enumerate() {
                let self_neg = p
                    .seed
                    .as_ref()
                    .map(|s| Candidate { id: s.clone(), vector: self.encode(Tower::Candidate, s).unit });
                let set = assemble_negatives(&batch_cands, i, ring, self_neg, &p.negatives);
                let extra: Vec<Encoded> = set
                    .self_negative
                    .iter()
                    .map(|c| self.encode(Tower::Candidate, &c.id))
                    .chain(set.in_context.iter().map(|t| self.encode(Tower::Candidate, t)))
                    .collect();
                let mut vectors: Vec<&[f32]> = Vec::new();
                vectors.extend(set.in_batch.iter().map(|c| c.vector.as_slice()));
                vectors.extend(set.pre_batch.iter().map(|c| c.vector.as_slice()));
                vectors.extend(extra.iter().map(|e| e.unit.as_slice()));
                let neg_scores: Vec<f64> = vectors.iter().map(|v| dot(&q[i].unit, v).clamp(-1.0, 1.0)).collect();
                let pos = dot(&q[i].unit, &c[i].unit).clamp(-1.0, 1.0);
                let r = dual_encoder_infonce(pos, &neg_scores, config.margin, config.tau)?;
                total += r.loss;
                n += 1;

                let scale = 1.0 / batch.len() as f64;
                let mut g_q = vec![0.0; d];
                for (k, v) in vectors.iter().enumerate() {
                    let g = r.grad_neg[k] * scale;
                    for j in 0..d {
                        g_q[j] += g * f64::from(v[j]);
                    }
                }
                for j in 0..d {
                    g_q[j] += r.grad_pos * scale * f64::from(c[i].unit[j]);
                    g_cand_unit[i][j] += r.grad_pos * scale * f64::from(q[i].unit[j]);
                }
                for (k, cand) in set.in_batch.iter().enumerate() {
                    let jdx = index_of[cand.id.as_str()];
                    let g = r.grad_neg[k] * scale;
                    for (gc, qu) in g_cand_unit[jdx].iter_mut().zip(&q[i].unit) {
                        *gc += g * f64::from(*qu);
                    }
                }
                let offset = set.in_batch.len() + set.pre_batch.len();
                for (k, e) in extra.iter().enumerate() {
                    let g = r.grad_neg[offset + k] * scale;
                    let gu: Vec<f64> = q[i].unit.iter().map(|x| g * f64::from(*x)).collect();
                    self.backprop(e, &gu, &mut gc);
                }
                self.backprop(&q[i], &g_q, &mut gq);
            }
            for (e, g) in c.iter().zip(&g_cand_unit) {
                self.backprop(e, g, &mut gc);
            }
            let gq: Vec<(usize, f64)> = gq.into_iter().collect();
            let gc: Vec<(usize, f64)> = gc.into_iter().collect();
            adam_q.update_sparse(&mut self.query, &gq);
            adam_c.update_sparse(&mut self.candidate, &gc);
            ring.push(batch_cands);
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    pub fn train(&mut self, train: &[TrainPair], valid: &[TrainPair], config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        self.max_tokens = config.max_input_tokens;
        let size = self.query.len();
        let mut adam_q = Adam::new(size, config.learning_rate, config.epsilon);
        let mut adam_c = Adam::new(size, config.learning_rate, config.epsilon);
        let mut ring = PreBatchRing::new(config.pre_batches);
        let mut stopper = EarlyStopping::new(config.patience);
        let mut best = self.clone();
        let mut report = TrainReport::default();
        let mut order: Vec<TrainPair> = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for epoch in 1..=config.max_epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let train_loss = self.train_epoch(&order, config, &mut ring, &mut adam_q, &mut adam_c)?;
            let valid_loss = if valid.is_empty() { None } else { Some(self.evaluate(valid, config)?) };
            report.history.push(EpochStats { epoch, train_loss, valid_loss });
            report.epochs_run = epoch;
            let (improved, stop) = stopper.observe(epoch, valid_loss.unwrap_or(train_loss));
            if improved {
                best = self.clone();
            }
            if stop {
                report.stopped_early = true;
                break;
            }
        }
        report.best_epoch = stopper.best_epoch;
        *self = best;
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

impl BiEncoder for HashedBiEncoder {
    fn id(&self) -> &str {
        &self.id
    }
    fn encode_query(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.encode(Tower::Query, text).unit)
    }
    fn encode_candidate(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.encode(Tower::Candidate, text).unit)
    }
}

/// Candidate encodings computed once for repeated ranking.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedBank {
    entries: Vec<(String, Vec<f32>)>,
}

impl EncodedBank {
    pub fn build(be: &dyn BiEncoder, bank: &EntityBank) -> Result<Self> {
        Ok(Self {
            entries: bank
                .iter()
                .map(|t| Ok((t.clone(), be.encode_candidate(t)?)))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rank(&self, be: &dyn BiEncoder, input: &str, k: usize) -> Result<Vec<ScoredText>> {
        Ok(self.rank_vector(&be.encode_query(input)?, k))
    }

    pub fn rank_vector(&self, q: &[f32], k: usize) -> Vec<ScoredText> {
        let scored: Vec<ScoredText> = self
            .entries
            .iter()
            .map(|(t, v)| ScoredText { text: t.clone(), score: dot(q, v) })
            .collect();
        top_k_by(scored, k, |a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs() -> Vec<TrainPair> {
        let mk = |q: &str, t: &str| TrainPair { input: q.into(), target: t.into(), negatives: vec![], seed: None };
        vec![
            mk("alpha beta", "red apple"),
            mk("gamma delta", "blue sky"),
            mk("alpha epsilon", "red apple"),
            mk("gamma zeta", "blue sky"),
            mk("eta theta", "green grass"),
            mk("eta iota", "green grass"),
        ]
    }

    #[test]
    fn towers_start_identical_and_unit_norm() {
        let be = HashedBiEncoder::new("h", HashedBiEncoderConfig { dimension: 8, buckets: 64, seed: 1 });
        let q = be.encode_query("lifelong learning").unwrap();
        let c = be.encode_candidate("lifelong learning").unwrap();
        assert_eq!(q, c);
        assert!((dot(&q, &q) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn training_reduces_loss_and_ranks_targets() {
        let mut be = HashedBiEncoder::new("h", HashedBiEncoderConfig { dimension: 16, buckets: 256, seed: 3 });
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 3, max_epochs: 40, patience: 40, ..TrainConfig::dual_encoder() };
        let data = pairs();
        let before = be.evaluate(&data, &cfg).unwrap();
        let report = be.train(&data, &[], &cfg).unwrap();
        let after = be.evaluate(&data, &cfg).unwrap();
        assert!(after < before, "{after} >= {before}");
        assert!(report.history.len() == report.epochs_run);
        let bank = EntityBank::from_strings(["red apple", "blue sky", "green grass"]);
        let top = super::super::dual_encoder_rank(&be, "alpha kappa", &bank, 1).unwrap();
        assert_eq!(top[0].text, "red apple");
    }

    #[test]
    fn gradient_matches_finite_difference() {
        // Loss of one anchor against one fixed negative as a function of one weight.
        let mut be = HashedBiEncoder::new("h", HashedBiEncoderConfig { dimension: 4, buckets: 16, seed: 5 });
        let neg = vec![0.5f32, 0.5, 0.5, 0.5];
        let loss = |be: &HashedBiEncoder| {
            let q = be.encode(Tower::Query, "a b");
            let c = be.encode(Tower::Candidate, "c d");
            dual_encoder_infonce(dot(&q.unit, &c.unit), &[dot(&q.unit, &neg)], 0.02, 0.5).unwrap().loss
        };
        let q = be.encode(Tower::Query, "a b");
        let c = be.encode(Tower::Candidate, "c d");
        let r = dual_encoder_infonce(dot(&q.unit, &c.unit), &[dot(&q.unit, &neg)], 0.02, 0.5).unwrap();
        let g_unit: Vec<f64> = (0..4).map(|j| r.grad_pos * f64::from(c.unit[j]) + r.grad_neg[0] * f64::from(neg[j])).collect();
        let mut grads = BTreeMap::new();
        be.backprop(&q, &g_unit, &mut grads);
        let (&idx, &analytic) = grads.iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        let h = 1e-3f32;
        be.query[idx] += h;
        let up = loss(&be);
        be.query[idx] -= 2.0 * h;
        let down = loss(&be);
        let numeric = (up - down) / (2.0 * f64::from(h));
        assert!((numeric - analytic).abs() <= 1e-2 * analytic.abs().max(1e-3), "{numeric} vs {analytic}");
    }
}
