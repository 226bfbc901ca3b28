//! Rank metrics, rank-weighted similarity, ROUGE-L, the challenging subset
//! and a paired bootstrap between two prediction sets.

use std::collections::{BTreeMap, BTreeSet};

use clbd_core::embedding::CharNgramProvider;
use clbd_core::evalsuite::{
    avg_max_metric, challenging_subset, mrr_hits, rouge_l, significance_test, EmbeddingScorer, ExactMatchScorer,
    ScoredText, TokenOverlapScorer,
};
use clbd_core::genmodels::PredictionRecord;
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::{build_dataset, evaluate_nodes, subset_items, HIT_KS};

fn main() -> clbd_core::Result<()> {
    let outputs = ["pointer network", "graph neural network", "prompt tuning"];
    let truth = BTreeSet::from(["graph neural network".to_string()]);
    let r = mrr_hits(outputs, &truth, &HIT_KS)?;
    println!("mrr {:.3} hits {:?}", r.mrr, r.hits);
    let (avg, max) = avg_max_metric(outputs, "graph attention network", &TokenOverlapScorer)?;
    println!("token overlap avg {avg:.3} max {max:.3}");
    println!("rouge-l {:.3}", rouge_l("we use a pointer network for parsing", "a pointer network is used for parsing"));

    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
    let provider = CharNgramProvider::default();
    let test = &dataset.node.test;
    let challenging = challenging_subset(&subset_items(test), &provider, 0.1, None)?;
    println!("challenging subset {:?} (cutoff {:?})", challenging.ids, challenging.cutoff);

    // an oracle that always ranks the gold second, and one that ranks it first half the time
    let predict = |id: &str, every_other: bool| -> Vec<PredictionRecord> {
        test.iter()
            .enumerate()
            .map(|(i, t)| {
                let mut outs = vec![ScoredText::new("distractor", 1.0), ScoredText::new(t.target_node.clone(), 0.5)];
                if every_other && i % 2 == 0 {
                    outs.swap(0, 1);
                }
                PredictionRecord { instance_id: t.instance_id.clone(), model_id: id.into(), config_digest: String::new(), outputs: outs }
            })
            .collect()
    };
    let subsets = BTreeMap::from([("challenging".to_string(), challenging.ids.iter().cloned().collect())]);
    let scorer = EmbeddingScorer::new(CharNgramProvider::default());
    let a = evaluate_nodes(&predict("second", false), test, &dataset, &scorer, &subsets)?;
    let b = evaluate_nodes(&predict("mixed", true), test, &dataset, &ExactMatchScorer, &subsets)?;
    for report in [&a, &b] {
        println!("{}", serde_json::to_string_pretty(&report.summary().by_group)?);
    }
    let mrr = |r: &clbd_core::evalsuite::MetricReport| -> Vec<f64> {
        r.rows.iter().filter(|row| row.subset == "all").map(|row| row.values["mrr"]).collect()
    };
    println!("paired bootstrap p = {:.4}", significance_test(&mrr(&a), &mrr(&b), 0)?);
    a.write_rows_tsv(std::io::stdout().lock())?;
    Ok(())
}
