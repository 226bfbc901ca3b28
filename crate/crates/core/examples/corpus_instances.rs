//! Write a corpus file, ingest it, build document graphs and task instances.

use clbd_core::corpus::{build_document_graph, extract_instances, ingest_corpus, write_corpus, CorpusFormat, TaskKind};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::build_dataset;

fn main() -> clbd_core::Result<()> {
    let dir = std::env::temp_dir().join("clbd-example-corpus");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("corpus.jsonl");
    write_corpus(std::fs::File::create(&path)?, &synthetic_corpus(&SyntheticConfig::default()))?;

    let records = ingest_corpus(&path, CorpusFormat::JsonLines)?;
    println!("ingested {} papers from {}", records.len(), path.display());
    let graph = build_document_graph(&records[0])?;
    println!("{}: {} nodes, {} edges", graph.paper_id, graph.nodes.len(), graph.edges.len());
    println!("background: {}", graph.background_text());
    for inst in extract_instances(&graph, TaskKind::Sentence) {
        println!(
            "  [{}] seed={:?} -> {} {:?}",
            inst.direction,
            inst.seed,
            inst.target_type,
            inst.target_sentence.as_deref().unwrap_or_default()
        );
    }

    let dataset = build_dataset(&records, Default::default())?;
    let m = dataset.node.manifest();
    println!(
        "node split: {} train / {} valid / {} test instances",
        m.train.instance_ids.len(),
        m.valid.instance_ids.len(),
        m.test.instance_ids.len()
    );
    Ok(())
}
