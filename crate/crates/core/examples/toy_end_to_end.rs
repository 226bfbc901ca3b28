//! Synthetic corpus through retrieval, training, prediction and evaluation.

use clbd_core::workflow::{toy_run, ToyRunConfig};

fn main() -> clbd_core::Result<()> {
    let out = toy_run(&ToyRunConfig::default())?;
    println!("instances: {:?}", out.instance_counts);
    println!("kg: {} nodes, {} edges; index: {} entries", out.kg_nodes, out.kg_edges, out.index_entries);
    for (group, metrics) in &out.node_report.by_group {
        let line: Vec<String> = metrics.iter().map(|(k, a)| format!("{k}={:.3}", a.mean)).collect();
        println!("node {group}: {}", line.join(" "));
    }
    for (group, metrics) in &out.sentence_report.by_group {
        let line: Vec<String> = metrics.iter().map(|(k, a)| format!("{k}={:.3}", a.mean)).collect();
        println!("sentence {group}: {}", line.join(" "));
    }
    println!(
        "multi-choice over {} instances ({} skipped): mrr={:.3}",
        out.multi_choice.evaluated, out.multi_choice.skipped, out.multi_choice.mean.mrr
    );
    println!("challenging subset: {:?}", out.challenging.ids);
    if let Some(p) = out.sentence_predictions.first() {
        println!("sample sentence prediction for {}: {:?}", p.instance_id, p.outputs.first().map(|o| &o.text));
    }
    Ok(())
}
