//! Background knowledge graph with a year cut-off, neighbours and clusters.

use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::build_dataset;

fn main() -> clbd_core::Result<()> {
    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
    let kg = dataset.background_kg();
    let stats = kg.stats();
    println!(
        "cutoff {:?}: {} nodes, {} relations from {} papers",
        stats.cutoff_year, stats.nodes, stats.relations, stats.papers
    );
    println!("relations: {:?}", stats.by_relation);
    for seed in ["named entity recognition", "ner", "pointer network"] {
        println!("{seed:?} -> neighbours {:?}", kg.one_hop_neighbors(seed));
        println!("{seed:?} -> cluster {:?}", kg.coreference_cluster(seed));
    }
    println!("entity bank: {} entries", dataset.entity_bank().len());
    Ok(())
}
