//! Semantic, KG and citation neighbours for a few test instances.

use clbd_core::embedding::CharNgramProvider;
use clbd_core::inspiration::{build_query, build_semantic_index, semantic_neighbors, NeighborCaps, Retriever};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::build_dataset;

fn main() -> clbd_core::Result<()> {
    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
    let provider = CharNgramProvider::default();
    let index = build_semantic_index(&dataset.node.train, &provider)?;
    let kg = dataset.background_kg();
    let catalog = dataset.catalog();
    let retriever = Retriever {
        index: &index,
        kg: &kg,
        catalog: &catalog,
        provider: &provider,
        caps: NeighborCaps::default(),
        cutoff_year: dataset.cutoff_year(),
    };
    for inst in dataset.node.test.iter().take(3) {
        let q = build_query(inst);
        println!("query: {q}");
        for hit in semantic_neighbors(&index, &q, 3, &provider)? {
            println!("  sim {:.3} {:?} -> {:?}", hit.similarity, hit.query, hit.target);
        }
        let n = retriever.retrieve(inst)?;
        println!("  semantic: {:?}", n.semantic);
        println!("  kg:       {:?}", n.kg);
        println!("  citation: {:?}", n.citation);
    }
    Ok(())
}
