//! Human rating protocol: rater assignments with pairwise overlaps,
//! annotation records and the agreement report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Instances each rater sees by default.
pub const INSTANCES_PER_RATER: usize = 10;
/// Instances every pair of raters shares by default.
pub const PAIR_OVERLAP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Helpful,
    Unhelpful,
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "helpful" => Ok(Label::Helpful),
            "unhelpful" => Ok(Label::Unhelpful),
            other => Err(format!("label must be `helpful` or `unhelpful`, got `{other}`")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Helpful => "helpful",
            Label::Unhelpful => "unhelpful",
        })
    }
}

/// The four yes/no rating criteria.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criteria {
    /// Relevant to the given context.
    pub relevance: bool,
    /// Different enough from the context rather than copied from it.
    pub novelty: bool,
    /// Makes scientific sense.
    pub scientific_sense: bool,
    /// Clearly expressed.
    pub clarity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub session_id: String,
    pub rater_id: String,
    pub instance_id: String,
    /// Blinded output handle.
    pub output_id: String,
    pub label: Label,
    pub criteria: Criteria,
    pub timestamp_ms: u64,
    pub revision: u32,
}

/// Which instances each rater sees, and which each pair shares.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub per_rater: BTreeMap<String, Vec<String>>,
    /// Keyed by `"a|b"` with `a < b`.
    pub shared: BTreeMap<String, Vec<String>>,
}

pub fn pair_key(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}|{b}")
    } else {
        format!("{b}|{a}")
    }
}

/// Instances needed for `raters` raters under the given structure, or
/// `None` when a rater's shared instances alone exceed `per_rater`.
pub fn instances_needed(raters: usize, per_rater: usize, overlap: usize) -> Option<usize> {
    let shared_each = raters.saturating_sub(1) * overlap;
    let private = per_rater.checked_sub(shared_each)?;
    Some(raters * raters.saturating_sub(1) / 2 * overlap + raters * private)
}

/// Every pair of raters shares exactly `overlap` instances that no third
/// rater sees; the rest of each rater's `per_rater` instances are private.
/// The pool is shuffled under `seed` first, pairs take instances in sorted
/// pair order, and each rater's list is shuffled again for presentation.
pub fn assign(raters: &[String], pool: &[String], per_rater: usize, overlap: usize, seed: u64) -> Result<Assignment, String> {
    let distinct: BTreeSet<&String> = raters.iter().collect();
    if raters.is_empty() || distinct.len() != raters.len() {
        return Err("raters must be non-empty and distinct".into());
    }
    let pool_set: BTreeSet<&String> = pool.iter().collect();
    if pool_set.len() != pool.len() {
        return Err("instance pool contains duplicates".into());
    }
    let need = instances_needed(raters.len(), per_rater, overlap).ok_or_else(|| {
        format!(
            "{} raters sharing {overlap} instances pairwise need more than {per_rater} instances each",
            raters.len()
        )
    })?;
    if pool.len() < need {
        return Err(format!("{need} instances needed, {} available", pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<String> = pool.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut rng);
    let mut next = shuffled.into_iter();
    let mut sorted: Vec<&String> = raters.iter().collect();
    sorted.sort();

    let mut per_rater_map: BTreeMap<String, Vec<String>> = raters.iter().map(|r| (r.clone(), Vec::new())).collect();
    let mut shared = BTreeMap::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            let items: Vec<String> = next.by_ref().take(overlap).collect();
            per_rater_map.get_mut(*a).unwrap().extend(items.iter().cloned());
            per_rater_map.get_mut(*b).unwrap().extend(items.iter().cloned());
            shared.insert(pair_key(a, b), items);
        }
    }
    for r in &sorted {
        let list = per_rater_map.get_mut(*r).unwrap();
        let missing = per_rater - list.len();
        list.extend(next.by_ref().take(missing));
        list.shuffle(&mut rng);
    }
    Ok(Assignment { per_rater: per_rater_map, shared })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub raters: [String; 2],
    /// (instance, output) items both raters labelled.
    pub shared_items: usize,
    pub matching: usize,
    /// `None` when the pair labelled no common item.
    pub percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVotes {
    pub helpful: usize,
    pub unhelpful: usize,
    pub helpful_percent: f64,
    pub unhelpful_percent: f64,
    /// Per criterion, the share of votes marking it satisfied.
    pub criteria_percent: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub session_id: String,
    pub pairs: Vec<PairAgreement>,
    pub models: BTreeMap<String, ModelVotes>,
    pub annotations: usize,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Pairwise agreement over shared `(instance, output)` items and per-model
/// vote shares. `model_of` maps an output handle to its model; records whose
/// handle it does not know count toward agreement only.
pub fn agreement_report(
    session_id: &str,
    raters: &[String],
    records: &[AnnotationRecord],
    model_of: &dyn Fn(&str) -> Option<String>,
) -> AgreementReport {
    let mut labels: BTreeMap<&str, BTreeMap<(&str, &str), Label>> = BTreeMap::new();
    for r in records {
        labels.entry(&r.rater_id).or_default().insert((&r.instance_id, &r.output_id), r.label);
    }
    let mut sorted: Vec<&String> = raters.iter().collect();
    sorted.sort();
    let empty = BTreeMap::new();
    let mut pairs = Vec::new();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            let la = labels.get(a.as_str()).unwrap_or(&empty);
            let lb = labels.get(b.as_str()).unwrap_or(&empty);
            let mut shared = 0;
            let mut matching = 0;
            for (k, v) in la {
                if let Some(w) = lb.get(k) {
                    shared += 1;
                    matching += usize::from(v == w);
                }
            }
            pairs.push(PairAgreement {
                raters: [(*a).clone(), (*b).clone()],
                shared_items: shared,
                matching,
                percent: (shared > 0).then(|| pct(matching, shared)),
            });
        }
    }

    let mut tallies: BTreeMap<String, (usize, usize, [usize; 4])> = BTreeMap::new();
    for r in records {
        let Some(model) = model_of(&r.output_id) else { continue };
        let t = tallies.entry(model).or_default();
        match r.label {
            Label::Helpful => t.0 += 1,
            Label::Unhelpful => t.1 += 1,
        }
        let c = r.criteria;
        for (slot, on) in t.2.iter_mut().zip([c.relevance, c.novelty, c.scientific_sense, c.clarity]) {
            *slot += usize::from(on);
        }
    }
    let models = tallies
        .into_iter()
        .map(|(m, (h, u, c))| {
            let n = h + u;
            let criteria_percent = ["relevance", "novelty", "scientific_sense", "clarity"]
                .iter()
                .zip(c)
                .map(|(name, k)| (name.to_string(), pct(k, n)))
                .collect();
            (m, ModelVotes { helpful: h, unhelpful: u, helpful_percent: pct(h, n), unhelpful_percent: pct(u, n), criteria_percent })
        })
        .collect();
    AgreementReport { session_id: session_id.into(), pairs, models, annotations: records.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i:03}")).collect()
    }

    fn rec(rater: &str, inst: &str, out: &str, label: Label) -> AnnotationRecord {
        AnnotationRecord {
            id: format!("{rater}/{inst}/{out}"),
            session_id: "s".into(),
            rater_id: rater.into(),
            instance_id: inst.into(),
            output_id: out.into(),
            label,
            criteria: Criteria::default(),
            timestamp_ms: 0,
            revision: 1,
        }
    }

    #[test]
    fn structure_for_several_rater_counts() {
        for r in 1..=6 {
            let raters = names(r);
            let need = instances_needed(r, 10, 2).unwrap();
            let a = assign(&raters, &pool(need + 3), 10, 2, 7).unwrap();
            for list in a.per_rater.values() {
                assert_eq!(list.len(), 10);
                assert_eq!(list.iter().collect::<BTreeSet<_>>().len(), 10);
            }
            for (i, x) in raters.iter().enumerate() {
                for y in &raters[i + 1..] {
                    let sx: BTreeSet<_> = a.per_rater[x].iter().collect();
                    let common = a.per_rater[y].iter().filter(|v| sx.contains(v)).count();
                    assert_eq!(common, 2, "{x} {y}");
                    assert_eq!(a.shared[&pair_key(x, y)].len(), 2);
                }
            }
        }
        assert_eq!(instances_needed(7, 10, 2), None);
        assert!(assign(&names(7), &pool(200), 10, 2, 0).is_err());
        assert!(assign(&names(3), &pool(5), 10, 2, 0).is_err());
    }

    #[test]
    fn assignment_is_seeded() {
        let a = assign(&names(4), &pool(40), 10, 2, 1).unwrap();
        assert_eq!(a, assign(&names(4), &pool(40), 10, 2, 1).unwrap());
        assert_ne!(a, assign(&names(4), &pool(40), 10, 2, 2).unwrap());
    }

    #[test]
    fn eight_of_ten_is_eighty_percent() {
        let mut records = Vec::new();
        for i in 0..2 {
            for o in 0..5 {
                let inst = format!("i{i}");
                let out = format!("h{o}");
                records.push(rec("a", &inst, &out, Label::Helpful));
                let b = if i * 5 + o < 8 { Label::Helpful } else { Label::Unhelpful };
                records.push(rec("b", &inst, &out, b));
            }
        }
        let raters = vec!["b".to_string(), "a".to_string()];
        let r = agreement_report("s", &raters, &records, &|_| None);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].raters, ["a".to_string(), "b".to_string()]);
        assert_eq!(r.pairs[0].shared_items, 10);
        assert_eq!(r.pairs[0].percent, Some(80.0));
    }

    #[test]
    fn identical_labels_agree_fully_and_votes_tally() {
        let mut records = Vec::new();
        for i in 0..100 {
            let label = if i < 48 { Label::Helpful } else { Label::Unhelpful };
            records.push(rec(&format!("r{}", i % 4), &format!("i{i}"), "m1-handle", label));
        }
        records.push(rec("x", "i0", "h", Label::Helpful));
        records.push(rec("y", "i0", "h", Label::Helpful));
        let raters = vec!["x".into(), "y".into()];
        let model_of = |h: &str| (h == "m1-handle").then(|| "m1".to_string());
        let r = agreement_report("s", &raters, &records, &model_of);
        assert_eq!(r.pairs[0].percent, Some(100.0));
        let v = &r.models["m1"];
        assert_eq!((v.helpful, v.unhelpful), (48, 52));
        assert_eq!(v.helpful_percent, 48.0);
        assert_eq!(v.unhelpful_percent, 52.0);
    }

    #[test]
    fn labels_parse_strictly() {
        assert_eq!("helpful".parse::<Label>().unwrap(), Label::Helpful);
        assert!("Helpful".parse::<Label>().is_err());
        assert!("neutral".parse::<Label>().is_err());
    }
}
