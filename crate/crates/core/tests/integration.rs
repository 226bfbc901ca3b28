use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::sync::Arc;

use clbd_core::contrastive::ModelKind;
use clbd_core::corpus::{ingest_corpus, write_corpus, CorpusFormat, Direction, NodeType, SplitYears, TaskInstance, TaskKind};
use clbd_core::embedding::{CachedProvider, CharNgramProvider, EmbeddingProvider};
use clbd_core::evalsuite::{ExactMatchScorer, ScoredText};
use clbd_core::genmodels::{
    load_model, read_predictions, write_predictions, BiEncoderNodes, FewShotNodes, FewShotSampling, HashedBiEncoder,
    HashedBiEncoderConfig, LoadedModel, NodePredictor, PredictionRecord, RegistryEntry, ScriptedClient, TrainConfig,
};
use clbd_core::inspiration::{
    build_semantic_index, CatalogEntry, NeighborCaps, NeighborSource, PaperCatalog, Retriever,
};
use clbd_core::kgraph::KnowledgeGraph;
use clbd_core::prompting::{FewShotMode, FewShotPool, Tokenizer, WhitespaceTokenizer, REMOTE_TOKEN_BUDGET};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::{build_dataset, evaluate_nodes, model_input, train_pairs, Dataset};

fn inst(id: &str, paper: &str, seed: &str, target: &str, background: &str, year: i32) -> TaskInstance {
    TaskInstance {
        instance_id: id.into(),
        task: TaskKind::Node,
        seed: seed.into(),
        target_type: NodeType::Task,
        direction: Direction::Forward,
        background: background.into(),
        background_sentences: vec![background.into()],
        background_terms: vec![],
        target_node: target.into(),
        target_sentence: None,
        paper_id: paper.into(),
        year,
    }
}

fn dataset() -> Dataset {
    build_dataset(&synthetic_corpus(&SyntheticConfig::default()), SplitYears::default()).unwrap()
}

#[test]
fn data_augmentation_fixture_retrieves_all_three_kinds() {
    let provider = CharNgramProvider::default();
    let train = vec![
        inst("a:0:fw", "a", "data augmentation", "low-resource tagging tasks", "tagging with little labeled data.", 2020),
        inst("b:0:fw", "b", "data augmentation", "semi-supervised ner", "ner with unlabeled text.", 2020),
        inst("c:0:fw", "c", "beam search", "machine translation", "decoding for translation.", 2019),
    ];
    let index = build_semantic_index(&train, &provider).unwrap();
    let kg = KnowledgeGraph::default();
    let mut catalog = PaperCatalog::default();
    catalog.insert(
        "daga",
        CatalogEntry {
            title: "DAGA: Data Augmentation with a Generation Approach for Low-resource Tagging Tasks".into(),
            year: 2020,
            citations: vec![],
        },
    );
    catalog.insert("test", CatalogEntry { title: "a test paper".into(), year: 2022, citations: vec!["daga".into()] });
    let r = Retriever {
        index: &index,
        kg: &kg,
        catalog: &catalog,
        provider: &provider,
        caps: NeighborCaps::default(),
        cutoff_year: 2021,
    };
    let query = inst("test:0:fw", "test", "data augmentation", "?", "low-resource sequence tagging.", 2022);
    let n = r.retrieve(&query).unwrap();
    assert!(n.semantic.contains(&"low-resource tagging tasks".to_string()));
    assert!(n.semantic.contains(&"semi-supervised ner".to_string()));
    assert_eq!(n.citation, vec!["DAGA: Data Augmentation with a Generation Approach for Low-resource Tagging Tasks"]);
    assert!(n.kg.is_empty());

    let capped = Retriever { caps: NeighborCaps { semantic: 2, citation: 1 }, ..r };
    let n = capped.retrieve(&query).unwrap();
    assert!(n.semantic.len() <= 2 && n.citation.len() <= 1);
}

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let records = synthetic_corpus(&SyntheticConfig { papers: 8, ..Default::default() });
    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(std::fs::File::create(&corpus_path).unwrap(), &records).unwrap();
    assert_eq!(ingest_corpus(&corpus_path, CorpusFormat::JsonLines).unwrap(), records);

    let d = build_dataset(&records, SplitYears::default()).unwrap();
    let kg = d.background_kg();
    kg.save(dir.path().join("kg")).unwrap();
    assert_eq!(KnowledgeGraph::load(dir.path().join("kg")).unwrap(), kg);

    let cache = CachedProvider::new(CharNgramProvider::default());
    let v = cache.embed("graph neural network").unwrap();
    cache.save(dir.path().join("emb.bin")).unwrap();
    let back = CachedProvider::load(CharNgramProvider::default(), dir.path().join("emb.bin")).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back.embed("graph neural network").unwrap(), v);

    let preds = vec![PredictionRecord {
        instance_id: "x".into(),
        model_id: "m".into(),
        config_digest: "d".into(),
        outputs: vec![ScoredText::new("a", 0.1)],
    }];
    let path = dir.path().join("preds.jsonl");
    write_predictions(std::fs::File::create(&path).unwrap(), &preds).unwrap();
    assert_eq!(read_predictions(BufReader::new(std::fs::File::open(&path).unwrap())).unwrap(), preds);
}

#[test]
fn trained_biencoder_reloads_through_registry() {
    let d = dataset();
    let provider = CharNgramProvider::default();
    let index = build_semantic_index(&d.node.train, &provider).unwrap();
    let kg = d.background_kg();
    let catalog = d.catalog();
    let r = Retriever {
        index: &index,
        kg: &kg,
        catalog: &catalog,
        provider: &provider,
        caps: NeighborCaps::default(),
        cutoff_year: d.cutoff_year(),
    };
    let train = train_pairs(&d.node.train, &r, NeighborSource::Kg, ModelKind::DualEncoder, 0).unwrap();
    let valid = train_pairs(&d.node.valid, &r, NeighborSource::Kg, ModelKind::DualEncoder, 0).unwrap();
    assert!(train.iter().all(|p| p.input.contains(" | context: ")));
    let mut model = HashedBiEncoder::new("bi", HashedBiEncoderConfig { dimension: 16, buckets: 256, seed: 1 });
    let cfg = TrainConfig { max_epochs: 3, batch_size: 16, learning_rate: 0.01, ..TrainConfig::dual_encoder() };
    let report = model.train(&train, &valid, &cfg).unwrap();
    assert!(report.epochs_run >= 1);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bi.json");
    model.save(&ckpt).unwrap();
    let entry = RegistryEntry {
        name: "bi".into(),
        backend: "hashed-biencoder".into(),
        checkpoint: Some(ckpt),
        options: serde_json::Value::Null,
    };
    let LoadedModel::BiEncoder(loaded) = load_model(&entry, None).unwrap() else {
        panic!("expected a bi-encoder");
    };
    let bank = d.entity_bank();
    let predictor = BiEncoderNodes::new(loaded, &bank, 10).unwrap();
    let original = BiEncoderNodes::new(model, &bank, 10).unwrap();
    for t in &d.node.test {
        let input = model_input(t, &[]);
        let a = predictor.predict(t, &input).unwrap();
        assert_eq!(a, original.predict(t, &input).unwrap());
        assert!(a.len() == 10 && a.iter().all(|o| bank.contains(&o.text)));
    }
}

#[test]
fn fewshot_prompt_fits_remote_budget() {
    let d = dataset();
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(CharNgramProvider::default());
    let pool = Arc::new(FewShotPool::build(&d.node.train, provider.as_ref()).unwrap());
    let target = &d.node.test[0];
    let client = ScriptedClient::new("llm", vec![Ok((0..15).map(|i| format!("idea {i}")).collect())]);
    let nodes = FewShotNodes {
        client,
        pool,
        provider,
        mode: FewShotMode::Retrieved,
        examples: 5,
        seed: 0,
        sampling: FewShotSampling::default(),
    };
    let out = nodes.predict(target, &model_input(target, &[])).unwrap();
    assert_eq!(out.len(), 10);
    let calls = nodes.client.calls();
    assert_eq!(calls[0].1, 15);
    assert!(calls[0].0.starts_with("Suggest a "));
    assert_eq!(calls[0].0.matches("Consider the following context: ").count(), 6);
    assert!(WhitespaceTokenizer.count(&calls[0].0) <= REMOTE_TOKEN_BUDGET);
}

#[test]
fn coreferent_forms_count_as_hits() {
    let d = dataset();
    let target = d
        .node
        .test
        .iter()
        .find(|i| d.truth_cluster(i).len() > 1)
        .expect("an instance whose target has several surface forms");
    let cluster = d.truth_cluster(target);
    let alias = cluster.iter().find(|f| **f != target.target_node.to_lowercase()).unwrap().clone();
    let preds = vec![PredictionRecord {
        instance_id: target.instance_id.clone(),
        model_id: "m".into(),
        config_digest: String::new(),
        outputs: vec![ScoredText::new("unrelated", 1.0), ScoredText::new(alias, 0.5)],
    }];
    let subsets = BTreeMap::from([("picked".to_string(), BTreeSet::from([target.instance_id.clone()]))]);
    let report = evaluate_nodes(&preds, std::slice::from_ref(target), &d, &ExactMatchScorer, &subsets).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].values["mrr"], 0.5);
    assert_eq!(report.rows[0].values["hit@1"], 0.0);
    assert_eq!(report.rows[0].values["hit@3"], 1.0);
    assert_eq!(report.rows[1].subset, "picked");
}
