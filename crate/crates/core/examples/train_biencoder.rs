//! Train the hashed bi-encoder with in-batch, pre-batch, self and
//! in-context negatives, save it and rank the entity bank.

use clbd_core::contrastive::ModelKind;
use clbd_core::embedding::CharNgramProvider;
use clbd_core::genmodels::{BiEncoderNodes, HashedBiEncoder, HashedBiEncoderConfig, NodePredictor, TrainConfig};
use clbd_core::inspiration::{build_semantic_index, NeighborCaps, NeighborSource, Retriever};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::{build_dataset, model_input, train_pairs};

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
    let kind = ModelKind::DualEncoder;
    let train = train_pairs(&dataset.node.train, &retriever, NeighborSource::Semantic, kind, 0)?;
    let valid = train_pairs(&dataset.node.valid, &retriever, NeighborSource::Semantic, kind, 0)?;

    let mut model = HashedBiEncoder::new("biencoder+sn", HashedBiEncoderConfig::default());
    let cfg = TrainConfig { learning_rate: 0.02, max_epochs: 8, batch_size: 16, ..TrainConfig::dual_encoder() };
    let report = model.train(&train, &valid, &cfg)?;
    for e in &report.history {
        println!("epoch {} train {:.4} valid {:?}", e.epoch, e.train_loss, e.valid_loss);
    }

    let path = std::env::temp_dir().join("clbd-example-biencoder.json");
    model.save(&path)?;
    let model = HashedBiEncoder::load(&path)?;
    println!("checkpoint round-tripped through {}", path.display());

    let bank = dataset.entity_bank();
    let ranker = BiEncoderNodes::new(model, &bank, 10)?;
    for inst in dataset.node.test.iter().take(3) {
        let input = model_input(inst, &retriever.retrieve(inst)?.semantic);
        let ranked = ranker.predict(inst, &input)?;
        println!("\n{} -> gold {:?}", inst.seed, inst.target_node);
        for (i, o) in ranked.iter().take(5).enumerate() {
            println!("  {}. {} ({:.3})", i + 1, o.text, o.score);
        }
    }
    Ok(())
}
