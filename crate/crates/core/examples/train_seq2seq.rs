//! Train the n-gram seq2seq model with the contrastive head, then decode
//! sentences freely and nodes under the entity-bank constraint.

use std::sync::Arc;

use clbd_core::contrastive::ModelKind;
use clbd_core::embedding::CharNgramProvider;
use clbd_core::genmodels::{
    generate_nodes, generate_sentence, DecodingConfig, NgramSeq2Seq, NgramSeq2SeqConfig, TrainConfig, TrainableGenerator,
};
use clbd_core::inspiration::{build_semantic_index, NeighborCaps, NeighborSource, Retriever};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::{build_dataset, model_input, train_pairs};

fn main() -> clbd_core::Result<()> {
    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
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
    let train = train_pairs(&dataset.sentence.train, &retriever, NeighborSource::Kg, ModelKind::Seq2Seq, 0)?;
    let valid = train_pairs(&dataset.sentence.valid, &retriever, NeighborSource::Kg, ModelKind::Seq2Seq, 0)?;
    println!("{} train / {} valid pairs; first input:\n  {}", train.len(), valid.len(), train[0].input);

    let mut model = NgramSeq2Seq::new("ngram-s2s+kg", NgramSeq2SeqConfig::default());
    let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 6, ..TrainConfig::seq2seq() };
    let report = model.train(&train, &valid, &cfg)?;
    for e in &report.history {
        println!("epoch {} train {:.4} valid {:?}", e.epoch, e.train_loss, e.valid_loss);
    }
    println!("best epoch {}, stopped early: {}", report.best_epoch, report.stopped_early);

    let bank = Arc::new(dataset.entity_bank());
    let node_cfg = DecodingConfig::node().with_bank(bank.clone());
    for inst in dataset.sentence.test.iter().take(2) {
        let input = model_input(inst, &retriever.retrieve(inst)?.kg);
        let out = generate_sentence(&model, &inst.instance_id, &input.text, 1)?;
        println!("\n{}\n  gold: {}\n  gen:  {}", input.text, inst.gold(), out[0].text);
        let nodes = generate_nodes(&model, &inst.instance_id, &input.text, &node_cfg)?;
        let texts: Vec<&str> = nodes.iter().map(|o| o.text.as_str()).collect();
        println!("  constrained nodes: {texts:?}");
        assert!(texts.iter().all(|t| bank.contains(t)));
    }
    Ok(())
}
