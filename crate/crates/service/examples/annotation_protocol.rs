//! Assign instances to three raters, simulate their labels and print the
//! pairwise agreement and per-model vote shares.
//!
//! cargo run -p clbd-service --example annotation_protocol

use std::collections::BTreeMap;

use clbd_service::protocol::{
    agreement_report, assign, instances_needed, AnnotationRecord, Criteria, Label, INSTANCES_PER_RATER, PAIR_OVERLAP,
};
use clbd_service::store::annotation_id;

fn main() {
    let raters: Vec<String> = ["r1", "r2", "r3"].iter().map(|s| s.to_string()).collect();
    let need = instances_needed(raters.len(), INSTANCES_PER_RATER, PAIR_OVERLAP).expect("structure fits");
    let pool: Vec<String> = (0..need).map(|i| format!("inst-{i:03}")).collect();
    let a = assign(&raters, &pool, INSTANCES_PER_RATER, PAIR_OVERLAP, 7).expect("enough instances");
    println!("{need} instances for {} raters", raters.len());
    for (pair, shared) in &a.shared {
        println!("  {pair} share {shared:?}");
    }

    // Two blinded outputs per instance; the handle -> model map stays server side.
    let mut model_of_handle = BTreeMap::new();
    let mut records = Vec::new();
    for (rater, list) in &a.per_rater {
        for inst in list {
            for model in ["model-a", "model-b"] {
                let handle = format!("h-{inst}-{model}");
                model_of_handle.insert(handle.clone(), model.to_string());
                // model-a is helpful on even instances; r3 disagrees on the last shared one.
                let even = inst.trim_start_matches("inst-").parse::<u32>().unwrap() % 2 == 0;
                let mut helpful = model == "model-a" && even;
                if rater == "r3" && a.shared.values().any(|s| s.last() == Some(inst)) {
                    helpful = !helpful;
                }
                let label = if helpful { Label::Helpful } else { Label::Unhelpful };
                records.push(AnnotationRecord {
                    id: annotation_id("demo", rater, inst, &handle),
                    session_id: "demo".into(),
                    rater_id: rater.clone(),
                    instance_id: inst.clone(),
                    output_id: handle,
                    label,
                    criteria: Criteria { relevance: true, novelty: helpful, scientific_sense: helpful, clarity: true },
                    timestamp_ms: 0,
                    revision: 1,
                });
            }
        }
    }

    let report = agreement_report("demo", &raters, &records, &|h| model_of_handle.get(h).cloned());
    for p in &report.pairs {
        let pct = p.percent.map_or("n/a".to_string(), |v| format!("{v:.1}%"));
        println!("{} vs {}: {}/{} items agree ({pct})", p.raters[0], p.raters[1], p.matching, p.shared_items);
    }
    for (m, v) in &report.models {
        println!("{m}: helpful {:.1}% ({} votes), criteria {:?}", v.helpful_percent, v.helpful + v.unhelpful, v.criteria_percent);
    }
}
