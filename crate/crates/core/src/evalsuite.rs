//! Metrics and evaluation harnesses for sentence and node predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, TaskKind};
use crate::embedding::{dot, EmbeddingProvider};
use crate::inspiration::{NeighborSet, NeighborSource};
use crate::text::{normalize, tokens};
use crate::{Error, Result};

/// Node predictions are scored over at most this many outputs.
pub const TOP_K: usize = 10;
pub const CHALLENGING_PERCENTILE: f64 = 0.1;
/// Absolute cutoff reported for the full-size corpus.
pub const CHALLENGING_THRESHOLD: f64 = 0.074;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    pub score: f64,
}

impl ScoredText {
    pub fn new(text: impl Into<String>, score: f64) -> Self {
        Self { text: text.into(), score }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub instance_id: String,
    pub model_id: String,
    pub outputs: Vec<ScoredText>,
}

impl RankedPrediction {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|o| o.text.as_str())
    }

    /// Scores are non-increasing along the list.
    pub fn is_ordered(&self) -> bool {
        self.outputs.windows(2).all(|w| w[0].score >= w[1].score)
    }
}

fn eval_tokens(text: &str) -> Vec<String> {
    tokens(&normalize(text))
}

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L F1 over normalized whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = eval_tokens(candidate);
    let r = eval_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rc = l / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankScores {
    /// 1-based rank of the first match.
    pub rank: Option<usize>,
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
}

/// Coreference-aware MRR and HIT@k: an output matches when its normalized
/// form is in the normalized truth cluster.
pub fn mrr_hits<'a>(
    outputs: impl IntoIterator<Item = &'a str>,
    truth_cluster: &BTreeSet<String>,
    ks: &[usize],
) -> Result<RankScores> {
    if truth_cluster.is_empty() {
        return Err(Error::Validation("truth cluster is empty".into()));
    }
    let truth: BTreeSet<String> = truth_cluster.iter().map(|t| normalize(t)).collect();
    let rank = outputs
        .into_iter()
        .position(|o| truth.contains(&normalize(o)))
        .map(|p| p + 1);
    let mrr = rank.map_or(0.0, |r| 1.0 / r as f64);
    let hits = ks
        .iter()
        .map(|&k| (k, if rank.is_some_and(|r| r <= k) { 1.0 } else { 0.0 }))
        .collect();
    Ok(RankScores { rank, mrr, hits })
}

/// Pluggable text similarity used by the soft node metrics and the
/// sentence-level tables.
pub trait SimilarityScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> Result<f64>;
    fn higher_is_better(&self) -> bool {
        true
    }
    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn symmetric(&self) -> bool {
        false
    }
}

/// 1 if normalized strings are equal, else 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactMatchScorer;

impl SimilarityScorer for ExactMatchScorer {
    fn name(&self) -> &str {
        "exact"
    }
    fn score(&self, c: &str, r: &str) -> Result<f64> {
        Ok(f64::from(u8::from(normalize(c) == normalize(r))))
    }
    fn symmetric(&self) -> bool {
        true
    }
}

/// Bag-of-tokens F1.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenOverlapScorer;

impl SimilarityScorer for TokenOverlapScorer {
    fn name(&self) -> &str {
        "token-f1"
    }
    fn score(&self, c: &str, r: &str) -> Result<f64> {
        let c = eval_tokens(c);
        let r = eval_tokens(r);
        if c.is_empty() || r.is_empty() {
            return Ok(0.0);
        }
        let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
        for t in &r {
            *counts.entry(t).or_default() += 1;
        }
        let mut common = 0usize;
        for t in &c {
            if let Some(n) = counts.get_mut(t.as_str()) {
                if *n > 0 {
                    *n -= 1;
                    common += 1;
                }
            }
        }
        if common == 0 {
            return Ok(0.0);
        }
        let p = common as f64 / c.len() as f64;
        let rc = common as f64 / r.len() as f64;
        Ok(2.0 * p * rc / (p + rc))
    }
    fn symmetric(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RougeLScorer;

impl SimilarityScorer for RougeLScorer {
    fn name(&self) -> &str {
        "rouge-l"
    }
    fn score(&self, c: &str, r: &str) -> Result<f64> {
        Ok(rouge_l(c, r))
    }
    fn symmetric(&self) -> bool {
        true
    }
}

/// Cosine similarity of embeddings; stands in for learned scorers.
pub struct EmbeddingScorer<P> {
    provider: P,
    name: String,
}

impl<P: EmbeddingProvider> EmbeddingScorer<P> {
    pub fn new(provider: P) -> Self {
        let name = format!("cosine:{}", provider.name());
        Self { provider, name }
    }
}

impl<P: EmbeddingProvider> SimilarityScorer for EmbeddingScorer<P> {
    fn name(&self) -> &str {
        &self.name
    }
    fn score(&self, c: &str, r: &str) -> Result<f64> {
        cosine(&self.provider, c, r)
    }
    fn range(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }
    fn symmetric(&self) -> bool {
        true
    }
}

/// Scorer lookup by name: `exact`, `token-f1`, `rouge-l`, `cosine`.
pub fn scorer_by_name<'a>(name: &str, provider: &'a dyn EmbeddingProvider) -> Result<Box<dyn SimilarityScorer + 'a>> {
    Ok(match name {
        "exact" => Box::new(ExactMatchScorer),
        "token-f1" => Box::new(TokenOverlapScorer),
        "rouge-l" => Box::new(RougeLScorer),
        "cosine" => Box::new(EmbeddingScorer::new(provider)),
        other => return Err(Error::Config(format!("unknown scorer `{other}`"))),
    })
}

pub fn cosine(provider: &dyn EmbeddingProvider, a: &str, b: &str) -> Result<f64> {
    Ok(dot(&provider.embed(a)?, &provider.embed(b)?))
}

/// Rank-weighted mean (`Σ s_i/i ÷ Σ 1/i`) and max of the scorer over the
/// first ten outputs. Fewer outputs shorten both sums.
pub fn avg_max_metric<'a>(
    outputs: impl IntoIterator<Item = &'a str>,
    reference: &str,
    scorer: &dyn SimilarityScorer,
) -> Result<(f64, f64)> {
    let scores = outputs
        .into_iter()
        .take(TOP_K)
        .map(|o| scorer.score(o, reference))
        .collect::<Result<Vec<_>>>()?;
    avg_max_from_scores(&scores)
}

pub fn avg_max_from_scores(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no outputs to score".into()));
    }
    let scores = &scores[..scores.len().min(TOP_K)];
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, s) in scores.iter().enumerate() {
        let w = 1.0 / (i + 1) as f64;
        num += s * w;
        den += w;
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((num / den, max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetItem {
    pub id: String,
    pub background: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChallengingSubset {
    /// Selected ids, in ascending similarity then id.
    pub ids: Vec<String>,
    /// Largest kept similarity (percentile mode) or the threshold.
    pub cutoff: Option<f64>,
    pub similarities: BTreeMap<String, f64>,
}

/// Instances whose background/reference cosine is lowest. Percentile mode
/// keeps exactly `⌊p·N⌋` items, breaking ties by lower id; with a threshold
/// it keeps every item strictly below it.
pub fn challenging_subset(
    items: &[SubsetItem],
    provider: &dyn EmbeddingProvider,
    percentile: f64,
    threshold: Option<f64>,
) -> Result<ChallengingSubset> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Parameter(format!("percentile must be in (0, 1), got {percentile}")));
    }
    let similarities = items
        .iter()
        .map(|it| Ok((it.id.clone(), cosine(provider, &it.background, &it.reference)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(select_challenging(similarities, percentile, threshold))
}

pub fn select_challenging(similarities: BTreeMap<String, f64>, percentile: f64, threshold: Option<f64>) -> ChallengingSubset {
    let mut ranked: Vec<(&String, f64)> = similarities.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let (kept, cutoff): (Vec<_>, Option<f64>) = match threshold {
        Some(t) => (ranked.into_iter().filter(|(_, s)| *s < t).collect(), Some(t)),
        None => {
            let n = (percentile * similarities.len() as f64).floor() as usize;
            let kept: Vec<_> = ranked.into_iter().take(n).collect();
            let cutoff = kept.last().map(|(_, s)| *s);
            (kept, cutoff)
        }
    };
    ChallengingSubset {
        ids: kept.into_iter().map(|(k, _)| k.clone()).collect(),
        cutoff,
        similarities: similarities.clone(),
    }
}

/// The three same-paper nodes most similar to the truth, excluding the
/// truth's coreference cluster. Ties by text.
pub fn select_distractors(
    truth: &str,
    truth_cluster: &BTreeSet<String>,
    same_paper_nodes: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<[String; 3]> {
    let mut excluded: BTreeSet<String> = truth_cluster.iter().map(|t| normalize(t)).collect();
    excluded.insert(normalize(truth));
    let mut seen = BTreeSet::new();
    let pool: Vec<&String> = same_paper_nodes
        .iter()
        .filter(|n| !excluded.contains(&normalize(n)) && seen.insert(normalize(n)))
        .collect();
    if pool.len() < 3 {
        return Err(Error::Validation(format!(
            "only {} distractor candidates for `{truth}`, need 3",
            pool.len()
        )));
    }
    let tv = provider.embed(truth)?;
    let mut scored = pool
        .into_iter()
        .map(|n| Ok((n, dot(&tv, &provider.embed(n)?))))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok([scored[0].0.clone(), scored[1].0.clone(), scored[2].0.clone()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChoiceResult {
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
}

/// Ranks truth plus three distractors with `score` (higher first, ties by
/// text) and scores the truth's position.
pub fn multi_choice_eval(
    score: &mut dyn FnMut(&[String]) -> Vec<f64>,
    truth: &str,
    distractors: &[String; 3],
) -> Result<MultiChoiceResult> {
    let mut candidates: Vec<String> = Vec::with_capacity(4);
    candidates.push(truth.to_string());
    candidates.extend(distractors.iter().cloned());
    let scores = score(&candidates);
    if scores.len() != candidates.len() {
        return Err(Error::Shape(format!("ranking function returned {} scores for 4 candidates", scores.len())));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| candidates[a].cmp(&candidates[b])));
    let ranked: Vec<&str> = order.iter().map(|&i| candidates[i].as_str()).collect();
    let r = mrr_hits(ranked, &BTreeSet::from([truth.to_string()]), &[1, 3])?;
    Ok(MultiChoiceResult { mrr: r.mrr, hit1: r.hits[&1], hit3: r.hits[&3] })
}

/// Two-sided paired bootstrap on the mean difference `b - a`.
pub fn significance_test(a: &[f64], b: &[f64], seed: u64) -> Result<f64> {
    significance_test_with(a, b, seed, BOOTSTRAP_RESAMPLES)
}

pub fn significance_test_with(a: &[f64], b: &[f64], seed: u64, resamples: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Pairing(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::Pairing("nothing to resample".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut le, mut ge) = (0usize, 0usize);
    for _ in 0..resamples {
        let mean = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64;
        if mean <= 0.0 {
            le += 1;
        }
        if mean >= 0.0 {
            ge += 1;
        }
    }
    Ok((2.0 * le.min(ge) as f64 / resamples as f64).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub instance_id: String,
    pub model: String,
    pub subset: String,
    pub direction: Direction,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

/// Subset label of rows covering every test instance.
pub const ALL_SUBSET: &str = "all";

fn aggregate<'a>(rows: impl IntoIterator<Item = &'a ReportRow>) -> BTreeMap<String, Aggregate> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in rows {
        for (k, v) in &row.values {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, (s, c))| (k, Aggregate { mean: s / c as f64, count: c }))
        .collect()
}

impl MetricReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    fn full_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.subset == ALL_SUBSET)
    }

    /// Means over the `all` subset rows, pooled across models.
    pub fn aggregates(&self) -> BTreeMap<String, Aggregate> {
        aggregate(self.full_rows())
    }

    /// Aggregates per `(model, subset)`.
    pub fn grouped(&self) -> BTreeMap<(String, String), BTreeMap<String, Aggregate>> {
        let mut groups: BTreeMap<(String, String), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.model.clone(), r.subset.clone())).or_default().push(r);
        }
        groups.into_iter().map(|(k, rows)| (k, aggregate(rows))).collect()
    }

    /// Per-model means over the `all` subset split by direction. Every model
    /// gets both directions, empty when it has no rows for one.
    pub fn direction_breakdown(&self) -> BTreeMap<(String, Direction), BTreeMap<String, Aggregate>> {
        let models: BTreeSet<&str> = self.rows.iter().map(|r| r.model.as_str()).collect();
        let mut out = BTreeMap::new();
        for m in models {
            for d in [Direction::Forward, Direction::Backward] {
                let rows = self.full_rows().filter(|r| r.model == m && r.direction == d);
                out.insert((m.to_string(), d), aggregate(rows));
            }
        }
        out
    }

    pub fn metric_names(&self) -> BTreeSet<String> {
        self.rows.iter().flat_map(|r| r.values.keys().cloned()).collect()
    }

    /// Per-instance rows as tab-separated values.
    pub fn write_rows_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let names = self.metric_names();
        write!(w, "instance_id\tmodel\tsubset\tdirection")?;
        for n in &names {
            write!(w, "\t{n}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{}\t{}\t{}\t{}", r.instance_id, r.model, r.subset, r.direction)?;
            for n in &names {
                match r.values.get(n) {
                    Some(v) => write!(w, "\t{v:.6}")?,
                    None => write!(w, "\t")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// One line per `(model, subset)` with every metric mean as a column.
    pub fn write_comparison_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let names = self.metric_names();
        write!(w, "model\tsubset\tcount")?;
        for n in &names {
            write!(w, "\t{n}")?;
        }
        writeln!(w)?;
        for ((model, subset), aggs) in self.grouped() {
            let count = aggs.values().map(|a| a.count).max().unwrap_or(0);
            write!(w, "{model}\t{subset}\t{count}")?;
            for n in &names {
                match aggs.get(n) {
                    Some(a) => write!(w, "\t{:.6}", a.mean)?,
                    None => write!(w, "\t")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            rows: self.rows.len(),
            overall: self.aggregates(),
            by_direction: self
                .direction_breakdown()
                .into_iter()
                .map(|((m, d), a)| (format!("{m}/{d}"), a))
                .collect(),
            by_group: self
                .grouped()
                .into_iter()
                .map(|((m, s), a)| (format!("{m}/{s}"), a))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: usize,
    pub overall: BTreeMap<String, Aggregate>,
    pub by_direction: BTreeMap<String, BTreeMap<String, Aggregate>>,
    pub by_group: BTreeMap<String, BTreeMap<String, Aggregate>>,
}

/// Linear-interpolation quantile over sorted data (`(n-1)·q` positions).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            min: v.first().copied().unwrap_or(f64::NAN),
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v.last().copied().unwrap_or(f64::NAN),
            mean: if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisItem {
    pub instance_id: String,
    pub direction: Direction,
    pub background: String,
    pub reference: String,
    pub neighbors: NeighborSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborAnalysis {
    /// Ids of instances that have all three neighbour types.
    pub included: Vec<String>,
    /// Per instance and neighbour type, the least similar neighbour.
    pub least_similar: BTreeMap<String, BTreeMap<NeighborSource, f64>>,
    pub per_type: BTreeMap<NeighborSource, Distribution>,
    /// Background/reference cosine per direction over every instance.
    pub background_by_direction: BTreeMap<Direction, Distribution>,
    pub background_similarity: BTreeMap<String, (Direction, f64)>,
}

const ANALYSIS_SOURCES: [NeighborSource; 3] = [NeighborSource::Semantic, NeighborSource::Kg, NeighborSource::Citation];

pub fn neighbor_similarity_analysis(items: &[AnalysisItem], provider: &dyn EmbeddingProvider) -> Result<NeighborAnalysis> {
    let mut included = Vec::new();
    let mut least_similar = BTreeMap::new();
    let mut background_similarity = BTreeMap::new();
    for it in items {
        let rv = provider.embed(&it.reference)?;
        let bg = dot(&provider.embed(&it.background)?, &rv);
        background_similarity.insert(it.instance_id.clone(), (it.direction, bg));
        if !it.neighbors.all_present() {
            continue;
        }
        let mut per = BTreeMap::new();
        for src in ANALYSIS_SOURCES {
            let min = it
                .neighbors
                .get(src)
                .iter()
                .map(|n| Ok(dot(&provider.embed(n)?, &rv)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            per.insert(src, min);
        }
        included.push(it.instance_id.clone());
        least_similar.insert(it.instance_id.clone(), per);
    }
    let per_type = ANALYSIS_SOURCES
        .into_iter()
        .map(|src| {
            let vals: Vec<f64> = least_similar.values().map(|m: &BTreeMap<NeighborSource, f64>| m[&src]).collect();
            (src, Distribution::of(&vals))
        })
        .collect();
    let background_by_direction = [Direction::Forward, Direction::Backward]
        .into_iter()
        .map(|d| {
            let vals: Vec<f64> = background_similarity.values().filter(|(dd, _)| *dd == d).map(|(_, s)| *s).collect();
            (d, Distribution::of(&vals))
        })
        .collect();
    Ok(NeighborAnalysis {
        included,
        least_similar,
        per_type,
        background_by_direction,
        background_similarity,
    })
}

impl NeighborAnalysis {
    /// Long-format table: instance, neighbour type, least similarity.
    pub fn write_neighbor_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "instance_id\tneighbor_type\tmin_similarity")?;
        for (id, per) in &self.least_similar {
            for (src, v) in per {
                writeln!(w, "{id}\t{}\t{v:.6}", source_name(*src))?;
            }
        }
        Ok(())
    }

    /// Long-format table: instance, direction, background similarity.
    pub fn write_background_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "instance_id\tdirection\tbackground_similarity")?;
        for (id, (d, v)) in &self.background_similarity {
            writeln!(w, "{id}\t{d}\t{v:.6}")?;
        }
        Ok(())
    }
}

fn source_name(s: NeighborSource) -> &'static str {
    match s {
        NeighborSource::None => "none",
        NeighborSource::Semantic => "semantic",
        NeighborSource::Kg => "kg",
        NeighborSource::Citation => "citation",
    }
}

/// Expert judgements for the gold subset. `ie_quality` is required only
/// for node prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    /// The target does not trivially overlap with the context.
    pub no_trivial_overlap: Option<bool>,
    /// The context carries information relevant to the target relation.
    pub relevant_context: Option<bool>,
    /// The relation is a salient aspect of the paper's idea.
    pub salient_relation: Option<bool>,
    pub ie_quality: Option<bool>,
}

pub fn gold_subset_flags(task: TaskKind, a: &GoldAnnotation) -> Result<bool> {
    let mut required = vec![
        ("no_trivial_overlap", a.no_trivial_overlap),
        ("relevant_context", a.relevant_context),
        ("salient_relation", a.salient_relation),
    ];
    if task == TaskKind::Node {
        required.push(("ie_quality", a.ie_quality));
    }
    let mut ok = true;
    for (name, v) in required {
        match v {
            Some(b) => ok &= b,
            None => return Err(Error::Validation(format!("missing criterion `{name}`"))),
        }
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{CharNgramProvider, HashingProvider, LookupProvider};

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert!((rouge_l("a b c d", "a c d") - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    #[test]
    fn mrr_examples() {
        let truth = BTreeSet::from(["Target".to_string(), "tgt".to_string()]);
        let r = mrr_hits(["target", "x"], &truth, &[1, 5, 10]).unwrap();
        assert_eq!((r.mrr, r.hits[&1]), (1.0, 1.0));
        let r = mrr_hits(["a", "b", "c", "TGT.", "e"], &truth, &[1, 5]).unwrap();
        assert_eq!((r.mrr, r.hits[&1], r.hits[&5]), (0.25, 0.0, 1.0));
        let outs: Vec<String> = (0..10).map(|i| format!("o{i}")).collect();
        let r = mrr_hits(outs.iter().map(|s| s.as_str()), &truth, &[1, 10]).unwrap();
        assert_eq!((r.mrr, r.hits[&10]), (0.0, 0.0));
        assert!(mrr_hits(["a"], &BTreeSet::new(), &[1]).is_err());
    }

    #[test]
    fn avg_max_examples() {
        assert_eq!(avg_max_from_scores(&[0.5; 10]).unwrap(), (0.5, 0.5));
        let mut s = vec![0.0; 10];
        s[0] = 1.0;
        let (avg, max) = avg_max_from_scores(&s).unwrap();
        assert!((avg - 2520.0 / 7381.0).abs() < 1e-12);
        assert_eq!(max, 1.0);
        assert!(matches!(avg_max_from_scores(&[]), Err(Error::UndefinedMetric(_))));
        let (a, m) = avg_max_metric(["x", "y"], "y", &ExactMatchScorer).unwrap();
        assert!((a - (0.5 / 1.5)).abs() < 1e-12 && m == 1.0);
    }

    #[test]
    fn token_overlap() {
        let s = TokenOverlapScorer;
        assert_eq!(s.score("a b", "a b").unwrap(), 1.0);
        assert!((s.score("a b", "a c").unwrap() - 0.5).abs() < 1e-12);
    }

    fn fixed(sims: &[(&str, f64)]) -> BTreeMap<String, f64> {
        sims.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn challenging_rules() {
        let sims: BTreeMap<String, f64> = (0..100).map(|i| (format!("i{i:03}"), i as f64 / 100.0)).collect();
        assert_eq!(select_challenging(sims, 0.1, None).ids.len(), 10);
        let eq: BTreeMap<String, f64> = (0..30).map(|i| (format!("i{i:02}"), 0.3)).collect();
        let s = select_challenging(eq, 0.1, None);
        assert_eq!(s.ids, vec!["i00", "i01", "i02"]);
        let t = select_challenging(fixed(&[("a", 0.05), ("b", 0.5)]), 0.1, Some(CHALLENGING_THRESHOLD));
        assert_eq!(t.ids, vec!["a"]);
        let items = vec![SubsetItem { id: "x".into(), background: "a".into(), reference: "b".into() }];
        assert!(challenging_subset(&items, &HashingProvider::new(8, 0), 1.5, None).is_err());
    }

    #[test]
    fn distractor_rules() {
        let p = CharNgramProvider::default();
        let nodes: Vec<String> = ["hierarchical structure", "hierarchical tables", "symbolic reasoning", "hierarchy-aware logical forms"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cluster = BTreeSet::from(["hierarchy-aware logical forms".to_string()]);
        let d = select_distractors("hierarchy-aware logical form", &cluster, &nodes, &p).unwrap();
        let got: BTreeSet<_> = d.iter().cloned().collect();
        assert_eq!(got, nodes[..3].iter().cloned().collect());
        let three = &nodes[..3];
        let d = select_distractors("zzz", &BTreeSet::new(), three, &p).unwrap();
        let got: BTreeSet<_> = d.iter().cloned().collect();
        assert_eq!(got, three.iter().cloned().collect::<BTreeSet<_>>());
        assert!(select_distractors("zzz", &BTreeSet::new(), &nodes[..2], &p).is_err());
    }

    #[test]
    fn distractors_with_fixed_vectors() {
        let mut p = LookupProvider::new(HashingProvider::new(3, 0));
        p.insert("truth", vec![1.0, 0.0, 0.0]).unwrap();
        p.insert("near", vec![0.9, 0.1, 0.0]).unwrap();
        p.insert("mid", vec![0.5, 0.5, 0.0]).unwrap();
        p.insert("far", vec![0.0, 0.0, 1.0]).unwrap();
        p.insert("tie", vec![0.5, 0.5, 0.0]).unwrap();
        let nodes: Vec<String> = ["far", "tie", "mid", "near"].iter().map(|s| s.to_string()).collect();
        let d = select_distractors("truth", &BTreeSet::new(), &nodes, &p).unwrap();
        assert_eq!(d, ["near".to_string(), "mid".to_string(), "tie".to_string()]);
    }

    #[test]
    fn multi_choice_oracles() {
        let d = ["b".to_string(), "c".to_string(), "d".to_string()];
        let mut oracle = |c: &[String]| c.iter().map(|x| if x == "a" { 1.0 } else { 0.0 }).collect();
        let r = multi_choice_eval(&mut oracle, "a", &d).unwrap();
        assert_eq!((r.mrr, r.hit1, r.hit3), (1.0, 1.0, 1.0));
        let mut anti = |c: &[String]| c.iter().map(|x| if x == "a" { -1.0 } else { 0.0 }).collect();
        let r = multi_choice_eval(&mut anti, "a", &d).unwrap();
        assert_eq!((r.mrr, r.hit1, r.hit3), (0.25, 0.0, 0.0));
    }

    #[test]
    fn bootstrap_rules() {
        let a: Vec<f64> = (0..100).map(|i| (i % 7) as f64 / 7.0).collect();
        assert_eq!(significance_test_with(&a, &a, 3, 2000).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|x| x + 5.0).collect();
        assert!(significance_test_with(&a, &b, 3, 2000).unwrap() < 0.01);
        assert_eq!(significance_test_with(&a, &b[..3], 3, 10).unwrap_err().to_string(), "pairing error: 100 vs 3 paired values");
        let c: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { 0.1 } else { -0.09 }).collect();
        assert_eq!(significance_test_with(&a, &c, 5, 500).unwrap(), significance_test_with(&a, &c, 5, 500).unwrap());
    }

    fn row(id: &str, d: Direction, v: f64) -> ReportRow {
        ReportRow {
            instance_id: id.into(),
            model: "m".into(),
            subset: "all".into(),
            direction: d,
            values: BTreeMap::from([("rouge_l".to_string(), v)]),
        }
    }

    #[test]
    fn breakdown_by_direction() {
        let mut r = MetricReport::default();
        r.push(row("a", Direction::Forward, 0.2));
        r.push(row("b", Direction::Backward, 0.4));
        let mut other = row("c", Direction::Forward, 0.9);
        other.model = "n".into();
        r.push(other);
        let mut sub = row("a", Direction::Forward, 5.0);
        sub.subset = "challenging".into();
        r.push(sub);
        let key = |m: &str, d| (m.to_string(), d);
        let b = r.direction_breakdown();
        assert!((b[&key("m", Direction::Forward)]["rouge_l"].mean - 0.2).abs() < 1e-12);
        assert!((b[&key("m", Direction::Backward)]["rouge_l"].mean - 0.4).abs() < 1e-12);
        assert!((b[&key("n", Direction::Forward)]["rouge_l"].mean - 0.9).abs() < 1e-12);
        assert!(b[&key("n", Direction::Backward)].is_empty());
        assert!((r.aggregates()["rouge_l"].mean - 0.5).abs() < 1e-12);
        assert_eq!(r.summary().by_direction.len(), 4);
        let mut buf = Vec::new();
        r.write_rows_tsv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("instance_id\tmodel\tsubset\tdirection\trouge_l\n"));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
    }

    #[test]
    fn analysis_excludes_incomplete_sets() {
        let p = HashingProvider::new(16, 0);
        let full = NeighborSet { semantic: vec!["r".into()], kg: vec!["r".into(), "x".into()], citation: vec!["r".into()], caps: None };
        let partial = NeighborSet { semantic: vec!["r".into()], kg: vec![], citation: vec!["r".into()], caps: None };
        let items = vec![
            AnalysisItem { instance_id: "a".into(), direction: Direction::Forward, background: "b".into(), reference: "r".into(), neighbors: full },
            AnalysisItem { instance_id: "b".into(), direction: Direction::Backward, background: "b".into(), reference: "r".into(), neighbors: partial },
        ];
        let a = neighbor_similarity_analysis(&items, &p).unwrap();
        assert_eq!(a.included, vec!["a"]);
        assert!((a.least_similar["a"][&NeighborSource::Semantic] - 1.0).abs() < 1e-6);
        assert_eq!(a.background_by_direction[&Direction::Backward].count, 1);
    }

    #[test]
    fn gold_rules() {
        let all = GoldAnnotation { no_trivial_overlap: Some(true), relevant_context: Some(true), salient_relation: Some(true), ie_quality: Some(true) };
        assert!(gold_subset_flags(TaskKind::Sentence, &all).unwrap());
        let overlap = GoldAnnotation { no_trivial_overlap: Some(false), ..all };
        assert!(!gold_subset_flags(TaskKind::Sentence, &overlap).unwrap());
        let ie = GoldAnnotation { ie_quality: Some(false), ..all };
        assert!(!gold_subset_flags(TaskKind::Node, &ie).unwrap());
        assert!(gold_subset_flags(TaskKind::Sentence, &GoldAnnotation { ie_quality: None, ..all }).unwrap());
        assert!(matches!(gold_subset_flags(TaskKind::Node, &GoldAnnotation { ie_quality: None, ..all }), Err(Error::Validation(_))));
    }
}
