//! Similarity of each neighbour type to the reference, and of the
//! background to the reference, per direction.

use clbd_core::embedding::CharNgramProvider;
use clbd_core::evalsuite::{neighbor_similarity_analysis, AnalysisItem};
use clbd_core::inspiration::{build_semantic_index, NeighborCaps, Retriever};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::build_dataset;

fn main() -> clbd_core::Result<()> {
    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig { papers: 60, ..Default::default() }), Default::default())?;
    let provider = CharNgramProvider::default();
    let index = build_semantic_index(&dataset.sentence.train, &provider)?;
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
    let items = dataset
        .sentence
        .test
        .iter()
        .map(|i| {
            Ok(AnalysisItem {
                instance_id: i.instance_id.clone(),
                direction: i.direction,
                background: i.background.clone(),
                reference: i.gold().to_string(),
                neighbors: retriever.retrieve(i)?,
            })
        })
        .collect::<clbd_core::Result<Vec<_>>>()?;
    let analysis = neighbor_similarity_analysis(&items, &provider)?;
    println!("{} of {} instances have all three neighbour types", analysis.included.len(), items.len());
    for (source, d) in &analysis.per_type {
        println!("{source:?}: median {:.3} iqr [{:.3}, {:.3}] n={}", d.median, d.q1, d.q3, d.count);
    }
    for (dir, d) in &analysis.background_by_direction {
        println!("background vs reference, {dir}: median {:.3} mean {:.3}", d.median, d.mean);
    }
    analysis.write_neighbor_tsv(std::io::stdout().lock())?;
    Ok(())
}
