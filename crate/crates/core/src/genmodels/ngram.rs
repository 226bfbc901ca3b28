//! Count-based conditional generator: an interpolation of a target-side
//! bigram model, a lexical translation table `t(y|x)` estimated with EM,
//! and a unigram prior. A small projection head over per-token features is
//! trained with the hidden-state contrastive loss against in-context
//! negatives and used to rerank finished hypotheses.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decoding::{search, BankTrie, StepScorer};
use super::optim::Adam;
use super::{DecodingConfig, EarlyStopping, EpochStats, Generator, TrainConfig, TrainPair, TrainReport, TrainableGenerator};
use crate::contrastive::{projection_score, seq2seq_contrastive_loss, total_loss, LossParams};
use crate::embedding::{EmbeddingProvider, HashingProvider};
use crate::evalsuite::ScoredText;
use crate::prompting::{Tokenizer, WhitespaceTokenizer};
use crate::text::tokens;
use crate::Result;

const EOS: usize = 0;
const BOS: usize = 1;
const UNK: usize = 2;
const NULL_SOURCE: &str = "<null>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramSeq2SeqConfig {
    pub bigram_weight: f64,
    pub translation_weight: f64,
    pub unigram_weight: f64,
    pub add_k: f64,
    pub hidden_dim: usize,
    /// Weight of `ln y` when reranking finished hypotheses.
    pub contrastive_weight: f64,
}

impl Default for NgramSeq2SeqConfig {
    fn default() -> Self {
        Self {
            bigram_weight: 0.7,
            translation_weight: 0.25,
            unigram_weight: 0.05,
            add_k: 0.01,
            hidden_dim: 16,
            contrastive_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramSeq2Seq {
    id: String,
    config: NgramSeq2SeqConfig,
    vocab: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    unigram: Vec<f64>,
    unigram_total: f64,
    bigram: BTreeMap<usize, BTreeMap<usize, f64>>,
    bigram_totals: BTreeMap<usize, f64>,
    translation: BTreeMap<String, BTreeMap<usize, f64>>,
    head: Option<LossParams>,
}

fn source_tokens(input: &str, max_tokens: usize) -> Vec<String> {
    let cut = WhitespaceTokenizer.truncate(input, max_tokens);
    let mut src = tokens(&cut);
    src.push(NULL_SOURCE.to_string());
    src
}

impl NgramSeq2Seq {
    pub fn new(id: impl Into<String>, config: NgramSeq2SeqConfig) -> Self {
        let vocab: Vec<String> = ["</s>", "<s>", "<unk>"].iter().map(|s| s.to_string()).collect();
        let mut m = Self {
            id: id.into(),
            config,
            unigram: vec![0.0; vocab.len()],
            vocab,
            index: BTreeMap::new(),
            unigram_total: 0.0,
            bigram: BTreeMap::new(),
            bigram_totals: BTreeMap::new(),
            translation: BTreeMap::new(),
            head: None,
        };
        m.reindex();
        m
    }

    fn reindex(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn head(&self) -> Option<&LossParams> {
        self.head.as_ref()
    }

    fn token_id(&mut self, w: &str) -> usize {
        if let Some(&i) = self.index.get(w) {
            return i;
        }
        self.vocab.push(w.to_string());
        self.unigram.push(0.0);
        self.index.insert(w.to_string(), self.vocab.len() - 1);
        self.vocab.len() - 1
    }

    fn target_ids(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens(text).iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect();
        ids.push(EOS);
        ids
    }

    /// Per-position features of a target sequence: a hashed word vector and
    /// an indicator of whether the word occurs in the input.
    fn hidden(&self, input_words: &BTreeSet<String>, text: &str, hasher: &HashingProvider) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::new();
        for w in tokens(text) {
            let mut row: Vec<f64> = hasher.embed(&w)?.into_iter().map(f64::from).collect();
            row.push(f64::from(u8::from(input_words.contains(&w))));
            rows.push(row);
        }
        if rows.is_empty() {
            rows.push(vec![0.0; self.config.hidden_dim]);
        }
        Ok(rows)
    }

    fn hasher(&self) -> HashingProvider {
        HashingProvider::new(self.config.hidden_dim.saturating_sub(1).max(1), 7)
    }

    fn translation_mix(&self, src: &[String], vocab_size: usize) -> Vec<f64> {
        let mut mix = vec![0.0; vocab_size];
        let mut known = 0usize;
        for x in src {
            if let Some(row) = self.translation.get(x) {
                known += 1;
                for (&y, &p) in row {
                    mix[y] += p;
                }
            }
        }
        if known == 0 {
            return vec![1.0 / self.vocab.len() as f64; vocab_size];
        }
        mix.iter_mut().for_each(|v| *v /= known as f64);
        mix
    }

    fn scorer<'a>(&'a self, input: &str, extra: Vec<String>, max_tokens: usize) -> NgramScorer<'a> {
        let src = source_tokens(input, max_tokens);
        let size = self.vocab.len() + extra.len();
        NgramScorer { model: self, translation: self.translation_mix(&src, size), extra, size }
    }

    fn token_log_prob(&self, scorer: &NgramScorer, prev: usize, y: usize) -> f64 {
        let c = &self.config;
        let v = scorer.size as f64;
        let k = c.add_k;
        let uni = (self.unigram.get(y).copied().unwrap_or(0.0) + k) / (self.unigram_total + k * v);
        let bi_count = self.bigram.get(&prev).and_then(|r| r.get(&y)).copied().unwrap_or(0.0);
        let bi = (bi_count + k) / (self.bigram_totals.get(&prev).copied().unwrap_or(0.0) + k * v);
        (c.bigram_weight * bi + c.translation_weight * scorer.translation[y] + c.unigram_weight * uni).ln()
    }

    fn sequence_nll(&self, input: &str, target: &str, max_tokens: usize) -> (f64, usize) {
        let scorer = self.scorer(input, Vec::new(), max_tokens);
        let ids = self.target_ids(target);
        let mut prev = BOS;
        let mut nll = 0.0;
        for &y in &ids {
            nll -= self.token_log_prob(&scorer, prev, y);
            prev = y;
        }
        (nll, ids.len())
    }

    fn mean_nll(&self, pairs: &[TrainPair], max_tokens: usize) -> f64 {
        let (s, n) = pairs.iter().fold((0.0, 0usize), |(s, n), p| {
            let (a, b) = self.sequence_nll(&p.input, &p.target, max_tokens);
            (s + a, n + b)
        });
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    fn em_step(&mut self, pairs: &[(Vec<String>, Vec<usize>)]) {
        let mut counts: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
        for (src, tgt) in pairs {
            for &y in tgt {
                let probs: Vec<f64> = src
                    .iter()
                    .map(|x| self.translation.get(x).and_then(|r| r.get(&y)).copied().unwrap_or(0.0))
                    .collect();
                let denom: f64 = probs.iter().sum();
                if denom <= 0.0 {
                    continue;
                }
                for (x, p) in src.iter().zip(probs) {
                    *counts.entry(x.clone()).or_default().entry(y).or_default() += p / denom;
                }
            }
        }
        for row in counts.values_mut() {
            let total: f64 = row.values().sum();
            row.values_mut().for_each(|v| *v /= total);
        }
        self.translation = counts;
    }

    fn train_head(&mut self, pairs: &[TrainPair], config: &TrainConfig, adam: &mut Adam) -> Result<f64> {
        let Some(head) = self.head.clone() else {
            return Ok(0.0);
        };
        let hasher = self.hasher();
        let mut params: Vec<f64> = head.weight.iter().copied().chain([head.bias]).collect();
        let mut total = 0.0;
        let mut counted = 0usize;
        for batch in pairs.chunks(config.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let current = LossParams::new(params[..params.len() - 1].to_vec(), params[params.len() - 1], config.tau, 0.0)?;
            let mut any = false;
            for p in batch.iter().filter(|p| !p.negatives.is_empty()) {
                let words: BTreeSet<String> = tokens(&p.input).into_iter().collect();
                let pos = self.hidden(&words, &p.target, &hasher)?;
                let negs = p
                    .negatives
                    .iter()
                    .map(|n| self.hidden(&words, n, &hasher))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[Vec<f64>]> = negs.iter().map(|n| n.as_slice()).collect();
                let r = seq2seq_contrastive_loss(&pos, &refs, &current)?;
                for (g, d) in grad.iter_mut().zip(&r.grad_weight) {
                    *g += d / batch.len() as f64;
                }
                *grad.last_mut().unwrap() += r.grad_bias / batch.len() as f64;
                total += r.loss;
                counted += 1;
                any = true;
            }
            if any {
                adam.update(&mut params, &grad);
            }
        }
        let n = params.len();
        self.head = Some(LossParams::new(params[..n - 1].to_vec(), params[n - 1], config.tau, 0.0)?);
        Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
    }

    /// Projection output `y` for a finished text.
    pub fn ground_truth_score(&self, input: &str, text: &str) -> Result<Option<f64>> {
        let Some(head) = &self.head else {
            return Ok(None);
        };
        let words: BTreeSet<String> = tokens(input).into_iter().collect();
        let h = self.hidden(&words, text, &self.hasher())?;
        Ok(Some(projection_score(&h, head)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.reindex();
        Ok(m)
    }
}

struct NgramScorer<'a> {
    model: &'a NgramSeq2Seq,
    translation: Vec<f64>,
    extra: Vec<String>,
    size: usize,
}

impl NgramScorer<'_> {
    fn word(&self, id: usize) -> &str {
        match self.model.vocab.get(id) {
            Some(w) => w,
            None => &self.extra[id - self.model.vocab.len()],
        }
    }
}

impl StepScorer for NgramScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.size
    }
    fn eos(&self) -> usize {
        EOS
    }
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let prev = prefix.last().copied().unwrap_or(BOS);
        let prev = if prev >= self.model.vocab.len() { UNK } else { prev };
        (0..self.size)
            .map(|y| match y {
                BOS | UNK => f64::NEG_INFINITY,
                _ => self.model.token_log_prob(self, prev, y),
            })
            .collect()
    }
}

impl Generator for NgramSeq2Seq {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, input: &str, config: &DecodingConfig) -> Result<Vec<ScoredText>> {
        config.validate()?;
        let bank = config.constraint_bank.as_deref().filter(|_| config.constrained);
        let mut extra = Vec::new();
        let mut trie = None;
        if let Some(bank) = bank {
            let mut extra_index: BTreeMap<String, usize> = BTreeMap::new();
            let mut seqs = Vec::new();
            for entry in bank.iter() {
                let seq: Vec<usize> = tokens(entry)
                    .into_iter()
                    .map(|w| match self.index.get(&w) {
                        Some(&i) if i > UNK => i,
                        _ => *extra_index.entry(w.clone()).or_insert_with(|| {
                            extra.push(w);
                            self.vocab.len() + extra.len() - 1
                        }),
                    })
                    .collect();
                seqs.push(seq);
            }
            trie = Some(BankTrie::from_sequences(seqs));
        }
        let scorer = self.scorer(input, extra, crate::prompting::TRAINABLE_TOKEN_BUDGET);
        let mut params = config.search_params();
        params.num_return = config.beam_size.max(config.num_return);
        let hyps = search(&scorer, &params, trie.as_ref());
        let mut out = Vec::with_capacity(hyps.len());
        for h in hyps {
            let text = h.tokens.iter().map(|&t| scorer.word(t)).collect::<Vec<_>>().join(" ");
            let mut score = h.score;
            if self.config.contrastive_weight > 0.0 {
                if let Some(y) = self.ground_truth_score(input, &text)? {
                    score += self.config.contrastive_weight * y.ln();
                }
            }
            out.push(ScoredText { text, score });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)));
        out.truncate(config.num_return);
        Ok(out)
    }
}

impl TrainableGenerator for NgramSeq2Seq {
    fn train(&mut self, train: &[TrainPair], valid: &[TrainPair], config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        for p in train {
            for w in tokens(&p.target) {
                self.token_id(&w);
            }
        }
        self.unigram = vec![0.0; self.vocab.len()];
        self.bigram.clear();
        self.bigram_totals.clear();
        let mut encoded = Vec::with_capacity(train.len());
        for p in train {
            let ids = self.target_ids(&p.target);
            let mut prev = BOS;
            for &y in &ids {
                self.unigram[y] += 1.0;
                *self.bigram.entry(prev).or_default().entry(y).or_default() += 1.0;
                *self.bigram_totals.entry(prev).or_default() += 1.0;
                prev = y;
            }
            encoded.push((source_tokens(&p.input, config.max_input_tokens), ids));
        }
        self.unigram_total = self.unigram.iter().sum();

        // Uniform start over co-occurring pairs.
        let uniform = 1.0 / self.vocab.len() as f64;
        self.translation.clear();
        for (src, tgt) in &encoded {
            for x in src {
                let row = self.translation.entry(x.clone()).or_default();
                for &y in tgt {
                    row.insert(y, uniform);
                }
            }
        }

        let dim = self.config.hidden_dim.max(2);
        self.config.hidden_dim = dim;
        self.head = Some(LossParams::new(vec![0.0; dim], 0.0, config.tau, 0.0)?);
        let mut adam = Adam::new(dim + 1, config.learning_rate, config.epsilon);

        let mut stopper = EarlyStopping::new(config.patience);
        let mut best = self.clone();
        let mut report = TrainReport::default();
        for epoch in 1..=config.max_epochs {
            self.em_step(&encoded);
            let cl = self.train_head(train, config, &mut adam)?;
            let ce = self.mean_nll(train, config.max_input_tokens);
            let valid_loss = (!valid.is_empty()).then(|| self.mean_nll(valid, config.max_input_tokens));
            report.history.push(EpochStats { epoch, train_loss: total_loss(ce, cl, config.lambda), valid_loss });
            report.epochs_run = epoch;
            let monitored = valid_loss.unwrap_or(ce);
            let (improved, stop) = stopper.observe(epoch, monitored);
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
}
