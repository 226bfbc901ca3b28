//! Beam, diverse-group and trie-constrained search over a token scorer.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use crate::inspiration::top_k_by;

/// Next-token distribution of a model conditioned on a fixed input.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    /// Log-probabilities over the vocabulary after `prefix`.
    fn log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchParams {
    pub beam_size: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    pub repetition_penalty: f64,
    pub max_length: usize,
    pub num_return: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities divided by length (end token included).
    pub score: f64,
    pub group: usize,
    pub finished: bool,
}

/// Prefix tree over token sequences of allowed outputs.
#[derive(Clone, Debug, Default)]
pub struct BankTrie {
    children: Vec<BTreeMap<usize, usize>>,
    terminal: Vec<bool>,
}

impl BankTrie {
    pub fn new() -> Self {
        Self { children: vec![BTreeMap::new()], terminal: vec![false] }
    }

    pub fn from_sequences<I: IntoIterator<Item = Vec<usize>>>(seqs: I) -> Self {
        let mut t = Self::new();
        for s in seqs {
            t.insert(&s);
        }
        t
    }

    pub fn insert(&mut self, seq: &[usize]) {
        if seq.is_empty() {
            return;
        }
        let mut node = 0;
        for &tok in seq {
            node = match self.children[node].get(&tok) {
                Some(&n) => n,
                None => {
                    self.children.push(BTreeMap::new());
                    self.terminal.push(false);
                    let n = self.children.len() - 1;
                    self.children[node].insert(tok, n);
                    n
                }
            };
        }
        self.terminal[node] = true;
    }

    fn walk(&self, prefix: &[usize]) -> Option<usize> {
        prefix.iter().try_fold(0, |node, tok| self.children[node].get(tok).copied())
    }

    /// Tokens that may follow `prefix`, and whether `prefix` is a complete entry.
    pub fn next(&self, prefix: &[usize]) -> Option<(Vec<usize>, bool)> {
        self.walk(prefix).map(|n| (self.children[n].keys().copied().collect(), self.terminal[n]))
    }

    pub fn contains(&self, seq: &[usize]) -> bool {
        self.walk(seq).is_some_and(|n| self.terminal[n])
    }

    pub fn is_empty(&self) -> bool {
        self.children[0].is_empty()
    }
}

#[derive(Clone, Debug)]
struct Beam {
    tokens: Vec<usize>,
    logp: f64,
    sel: f64,
}

struct Cand {
    sel: f64,
    logp: f64,
    beam: usize,
    tok: usize,
}

fn cand_order(a: &Cand, b: &Cand) -> Ordering {
    b.sel
        .total_cmp(&a.sel)
        .then_with(|| a.beam.cmp(&b.beam))
        .then_with(|| a.tok.cmp(&b.tok))
}

fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Group beam search. With one group this is plain beam search; with
/// several, each group is penalized by `diversity_penalty` for every time
/// an earlier group picked the same token at the same step. Tokens already
/// in a hypothesis have their log-probability scaled by the repetition
/// penalty. With a trie only complete trie entries are returned.
pub fn search(scorer: &dyn StepScorer, p: &SearchParams, trie: Option<&BankTrie>) -> Vec<Hypothesis> {
    let groups = p.num_groups.max(1);
    let per_group = (p.beam_size / groups).max(1);
    let eos = scorer.eos();
    let mut live: Vec<Vec<Beam>> = vec![vec![Beam { tokens: Vec::new(), logp: 0.0, sel: 0.0 }]; groups];
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); groups];
    let mut done = vec![false; groups];
    if trie.is_some_and(|t| t.is_empty()) {
        return Vec::new();
    }

    for _ in 0..p.max_length {
        let mut picked: HashMap<usize, usize> = HashMap::new();
        for g in 0..groups {
            if done[g] {
                continue;
            }
            let mut cands = Vec::new();
            for (bi, beam) in live[g].iter().enumerate() {
                let lp = scorer.log_probs(&beam.tokens);
                let allowed: Vec<usize> = match trie {
                    Some(t) => match t.next(&beam.tokens) {
                        Some((mut next, terminal)) => {
                            if terminal {
                                next.push(eos);
                            }
                            next
                        }
                        None => continue,
                    },
                    None => (0..lp.len()).collect(),
                };
                let used: HashSet<usize> = beam.tokens.iter().copied().collect();
                for tok in allowed {
                    if tok == eos && beam.tokens.is_empty() {
                        continue;
                    }
                    let mut l = lp.get(tok).copied().unwrap_or(f64::NEG_INFINITY);
                    if !l.is_finite() {
                        continue;
                    }
                    if p.repetition_penalty != 1.0 && tok != eos && used.contains(&tok) {
                        l = if l < 0.0 { l * p.repetition_penalty } else { l / p.repetition_penalty };
                    }
                    let pen = p.diversity_penalty * picked.get(&tok).copied().unwrap_or(0) as f64;
                    cands.push(Cand { sel: beam.sel + l - pen, logp: beam.logp + l, beam: bi, tok });
                }
            }
            let cands = top_k_by(cands, 2 * per_group, cand_order);
            let mut next = Vec::new();
            for c in cands {
                let mut tokens = live[g][c.beam].tokens.clone();
                if c.tok == eos {
                    if finished[g].len() < per_group {
                        let len = tokens.len() + 1;
                        finished[g].push(Hypothesis { tokens, score: c.logp / len as f64, group: g, finished: true });
                    }
                } else {
                    tokens.push(c.tok);
                    next.push(Beam { tokens, logp: c.logp, sel: c.sel });
                }
                if next.len() == per_group {
                    break;
                }
            }
            for b in &next {
                *picked.entry(*b.tokens.last().unwrap()).or_default() += 1;
            }
            done[g] = finished[g].len() >= per_group || next.is_empty();
            live[g] = next;
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }

    let mut all = Vec::new();
    for (g, mut fin) in finished.into_iter().enumerate() {
        if trie.is_none() && fin.len() < per_group {
            fin.extend(live[g].iter().map(|b| Hypothesis {
                tokens: b.tokens.clone(),
                score: b.logp / b.tokens.len().max(1) as f64,
                group: g,
                finished: false,
            }));
        }
        fin.sort_by(hyp_order);
        fin.truncate(per_group);
        all.extend(fin);
    }
    all.sort_by(hyp_order);
    let mut seen = HashSet::new();
    all.retain(|h| seen.insert(h.tokens.clone()));
    all.truncate(p.num_return);
    all
}
