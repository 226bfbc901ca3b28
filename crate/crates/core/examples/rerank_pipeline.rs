//! Two-stage reranking: a first model ranks the bank, a second model sees
//! only the first model's top ten as its neighbour list.

use std::collections::HashMap;

use clbd_core::embedding::CharNgramProvider;
use clbd_core::genmodels::{BiEncoderNodes, EchoRetrieve, NodePredictor, RerankPipeline, RetrievalSpy, StaticNeighbors, StubBiEncoder};
use clbd_core::inspiration::{build_semantic_index, NeighborCaps, NeighborSource, Retriever};
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
    let inst = &dataset.node.test[0];
    let neighbors = StaticNeighbors(HashMap::from([(inst.instance_id.clone(), retriever.retrieve(inst)?)]));

    let bank = dataset.entity_bank();
    let first = BiEncoderNodes::new(StubBiEncoder::new(CharNgramProvider::default()), &bank, 10)?;
    let mut pipeline = RerankPipeline::new(&first, &EchoRetrieve);
    pipeline.first_source = NeighborSource::Semantic;
    let spy = RetrievalSpy::new(neighbors);
    let out = pipeline.run(inst, &spy)?;
    println!("variant {} (retrieval calls: {})", out.variant, spy.calls());
    println!("first stage ({}): {:?}", first.id(), out.first.iter().map(|o| &o.text).collect::<Vec<_>>());
    println!("second input: {}", out.second_input.text);
    println!("final: {:?}", out.outputs.iter().map(|o| &o.text).collect::<Vec<_>>());
    Ok(())
}
