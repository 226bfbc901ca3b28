//! Stage glue shared by the CLI, the examples and the end-to-end check:
//! dataset assembly, per-instance model inputs, training pairs, prediction
//! and metric reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::contrastive::{sample_incontext_negatives, ModelKind};
use crate::corpus::{
    build_document_graph, extract_instances, temporal_split, DocumentGraph, PaperRecord, SplitYears, Splits, TaskInstance,
    TaskKind,
};
use crate::embedding::{CharNgramProvider, EmbeddingProvider};
use crate::evalsuite::{
    avg_max_metric, challenging_subset, mrr_hits, multi_choice_eval, neighbor_similarity_analysis, rouge_l,
    select_distractors, AnalysisItem, ChallengingSubset, MultiChoiceResult, MetricReport, NeighborAnalysis, ReportRow,
    ReportSummary, SimilarityScorer, ALL_SUBSET, SubsetItem, CHALLENGING_PERCENTILE, TOP_K,
};
use crate::genmodels::{
    config_digest, generate_sentence, BiEncoder, BiEncoderNodes, EchoRetrieve, NeighborProvider, NgramSeq2Seq,
    NgramSeq2SeqConfig, NodePredictor, PredictionRecord, RerankPipeline, StaticNeighbors, StubBiEncoder, TrainConfig,
    TrainPair, TrainableGenerator,
};
use crate::inspiration::{build_semantic_index, NeighborCaps, NeighborSet, NeighborSource, PaperCatalog, Retriever};
use crate::kgraph::{build_background_kg, entity_bank, EntityBank, KnowledgeGraph};
use crate::prompting::{compose_model_input, seed_prompt, ModelInput, WhitespaceTokenizer, TRAINABLE_TOKEN_BUDGET};
use crate::synthetic::{synthetic_corpus, SyntheticConfig};
use crate::text::normalize;
use crate::{Error, Result};

/// Cut-offs reported for node predictions.
pub const HIT_KS: [usize; 4] = [1, 3, 5, 10];

/// Document graphs plus both task variants split by year.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub years: SplitYears,
    pub graphs: Vec<DocumentGraph>,
    pub node: Splits,
    pub sentence: Splits,
}

pub fn build_dataset(records: &[PaperRecord], years: SplitYears) -> Result<Dataset> {
    let mut graphs = records.iter().map(build_document_graph).collect::<Result<Vec<_>>>()?;
    graphs.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));
    let collect = |task| temporal_split(graphs.iter().flat_map(|g| extract_instances(g, task)).collect(), years);
    let node = collect(TaskKind::Node);
    let sentence = collect(TaskKind::Sentence);
    Ok(Dataset { years, graphs, node, sentence })
}

impl Dataset {
    pub fn splits(&self, task: TaskKind) -> &Splits {
        match task {
            TaskKind::Node => &self.node,
            TaskKind::Sentence => &self.sentence,
        }
    }

    pub fn graph(&self, paper_id: &str) -> Option<&DocumentGraph> {
        self.graphs
            .binary_search_by(|g| g.paper_id.as_str().cmp(paper_id))
            .ok()
            .map(|i| &self.graphs[i])
    }

    /// Cut-off shared by the KG, the semantic index and citation retrieval.
    pub fn cutoff_year(&self) -> i32 {
        self.years.valid_from
    }

    pub fn background_kg(&self) -> KnowledgeGraph {
        build_background_kg(&self.graphs, self.cutoff_year())
    }

    pub fn catalog(&self) -> PaperCatalog {
        PaperCatalog::from_graphs(&self.graphs)
    }

    pub fn entity_bank(&self) -> EntityBank {
        entity_bank(&self.node)
    }

    /// Every normalized node string of a paper, for distractor selection.
    pub fn paper_nodes(&self, paper_id: &str) -> Vec<String> {
        let mut out: BTreeSet<String> = BTreeSet::new();
        if let Some(g) = self.graph(paper_id) {
            for n in &g.nodes {
                out.insert(normalize(&n.canonical_text));
            }
        }
        out.into_iter().collect()
    }

    /// The target plus every surface form coreferent with it in its paper.
    pub fn truth_cluster(&self, instance: &TaskInstance) -> BTreeSet<String> {
        let target = normalize(&instance.target_node);
        let mut cluster = BTreeSet::from([target.clone()]);
        if let Some(g) = self.graph(&instance.paper_id) {
            for n in g.nodes.iter().filter(|n| normalize(&n.canonical_text) == target) {
                cluster.extend(g.mention_forms(n).iter().map(|f| normalize(f)));
            }
        }
        cluster.retain(|s| !s.is_empty());
        cluster
    }
}

/// Seed prompt plus the chosen neighbours and background under the trainable
/// model budget.
pub fn model_input(instance: &TaskInstance, neighbors: &[String]) -> ModelInput {
    let prompt = seed_prompt(&instance.seed, instance.target_type, instance.direction);
    compose_model_input(&prompt, neighbors, &instance.background, TRAINABLE_TOKEN_BUDGET, &WhitespaceTokenizer)
}

/// Retrieves `source` neighbours for each instance and pairs the composed
/// input with its gold output and sampled in-context negatives.
pub fn train_pairs(
    instances: &[TaskInstance],
    retrieval: &dyn NeighborProvider,
    source: NeighborSource,
    kind: ModelKind,
    seed: u64,
) -> Result<Vec<TrainPair>> {
    instances
        .iter()
        .map(|inst| {
            let neighbors = match source {
                NeighborSource::None => Vec::new(),
                s => retrieval.neighbors(inst)?.get(s).to_vec(),
            };
            Ok(TrainPair {
                input: model_input(inst, &neighbors).text,
                target: inst.gold().to_string(),
                negatives: sample_incontext_negatives(inst, kind, seed),
                seed: Some(inst.seed.clone()),
            })
        })
        .collect()
}

/// Builds one row per node prediction. Missing predictions score zero on
/// the rank metrics and are left out of the soft metrics.
pub fn evaluate_nodes(
    predictions: &[PredictionRecord],
    instances: &[TaskInstance],
    dataset: &Dataset,
    scorer: &dyn SimilarityScorer,
    subsets: &BTreeMap<String, BTreeSet<String>>,
) -> Result<MetricReport> {
    let by_id: HashMap<(&str, &str), &PredictionRecord> =
        predictions.iter().map(|p| ((p.model_id.as_str(), p.instance_id.as_str()), p)).collect();
    let models: BTreeSet<&str> = predictions.iter().map(|p| p.model_id.as_str()).collect();
    let mut report = MetricReport::default();
    for model in models {
        for inst in instances {
            let outputs: Vec<&str> = by_id
                .get(&(model, inst.instance_id.as_str()))
                .map(|p| p.outputs.iter().take(TOP_K).map(|o| o.text.as_str()).collect())
                .unwrap_or_default();
            let cluster = dataset.truth_cluster(inst);
            let ranks = mrr_hits(outputs.iter().copied(), &cluster, &HIT_KS)?;
            let mut values = BTreeMap::from([("mrr".to_string(), ranks.mrr)]);
            for (k, v) in &ranks.hits {
                values.insert(format!("hit@{k}"), *v);
            }
            if !outputs.is_empty() {
                let (avg, max) = avg_max_metric(outputs.iter().copied(), &inst.target_node, scorer)?;
                values.insert(format!("avg_{}", scorer.name()), avg);
                values.insert(format!("max_{}", scorer.name()), max);
            }
            push_rows(&mut report, model, inst, values, subsets);
        }
    }
    Ok(report)
}

/// ROUGE-L plus every scorer on the top sentence.
pub fn evaluate_sentences(
    predictions: &[PredictionRecord],
    instances: &[TaskInstance],
    scorers: &[&dyn SimilarityScorer],
    subsets: &BTreeMap<String, BTreeSet<String>>,
) -> Result<MetricReport> {
    let by_id: HashMap<(&str, &str), &PredictionRecord> =
        predictions.iter().map(|p| ((p.model_id.as_str(), p.instance_id.as_str()), p)).collect();
    let models: BTreeSet<&str> = predictions.iter().map(|p| p.model_id.as_str()).collect();
    let mut report = MetricReport::default();
    for model in models {
        for inst in instances {
            let top = by_id
                .get(&(model, inst.instance_id.as_str()))
                .and_then(|p| p.outputs.first())
                .map(|o| o.text.as_str())
                .unwrap_or("");
            let reference = inst.gold();
            let mut values = BTreeMap::from([("rouge_l".to_string(), rouge_l(top, reference))]);
            for s in scorers {
                values.insert(s.name().to_string(), s.score(top, reference)?);
            }
            push_rows(&mut report, model, inst, values, subsets);
        }
    }
    Ok(report)
}

fn push_rows(
    report: &mut MetricReport,
    model: &str,
    inst: &TaskInstance,
    values: BTreeMap<String, f64>,
    subsets: &BTreeMap<String, BTreeSet<String>>,
) {
    let row = |subset: &str| ReportRow {
        instance_id: inst.instance_id.clone(),
        model: model.to_string(),
        subset: subset.to_string(),
        direction: inst.direction,
        values: values.clone(),
    };
    report.push(row(ALL_SUBSET));
    for (name, ids) in subsets {
        if ids.contains(&inst.instance_id) {
            report.push(row(name));
        }
    }
}

/// Background/reference pairs for the challenging-subset selection.
pub fn subset_items(instances: &[TaskInstance]) -> Vec<SubsetItem> {
    instances
        .iter()
        .map(|i| SubsetItem {
            id: i.instance_id.clone(),
            background: i.background.clone(),
            reference: i.gold().to_string(),
        })
        .collect()
}

/// Runs a node predictor over instances with neighbours from `source`.
pub fn predict_nodes(
    predictor: &dyn NodePredictor,
    instances: &[TaskInstance],
    retrieval: &dyn NeighborProvider,
    source: NeighborSource,
    digest: &str,
) -> Result<Vec<PredictionRecord>> {
    instances
        .iter()
        .map(|inst| {
            let neighbors = match source {
                NeighborSource::None => Vec::new(),
                s => retrieval.neighbors(inst)?.get(s).to_vec(),
            };
            let outputs = predictor.predict(inst, &model_input(inst, &neighbors))?;
            Ok(PredictionRecord {
                instance_id: inst.instance_id.clone(),
                model_id: predictor.id().to_string(),
                config_digest: digest.to_string(),
                outputs,
            })
        })
        .collect()
}

/// Parameters of the synthetic end-to-end run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRunConfig {
    pub papers: usize,
    pub seed: u64,
    pub years: SplitYears,
    pub train: TrainConfig,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        let train = TrainConfig { learning_rate: 0.05, max_epochs: 4, ..TrainConfig::seq2seq() };
        Self { papers: 30, seed: 17, years: SplitYears::default(), train }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChoiceSummary {
    pub evaluated: usize,
    pub skipped: usize,
    pub mean: MultiChoiceResult,
}

/// Everything the synthetic run produces, serializable for determinism checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRunOutput {
    pub config_digest: String,
    pub instance_counts: BTreeMap<String, usize>,
    pub kg_nodes: usize,
    pub kg_edges: usize,
    pub index_entries: usize,
    pub node_predictions: Vec<PredictionRecord>,
    pub sentence_predictions: Vec<PredictionRecord>,
    pub node_report: ReportSummary,
    pub sentence_report: ReportSummary,
    pub challenging: ChallengingSubset,
    pub multi_choice: MultiChoiceSummary,
    pub neighbor_analysis: NeighborAnalysis,
}

/// Synthetic corpus to metric report: instances, background KG, semantic
/// index, retrieval, a trained n-gram sentence generator, two stub node
/// rankers (direct and reranked), all metrics, subsets and analyses.
pub fn toy_run(config: &ToyRunConfig) -> Result<ToyRunOutput> {
    let records = synthetic_corpus(&SyntheticConfig { papers: config.papers, seed: config.seed, ..Default::default() });
    let dataset = build_dataset(&records, config.years)?;
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(CharNgramProvider::default());
    let kg = dataset.background_kg();
    let catalog = dataset.catalog();
    let node_index = build_semantic_index(&dataset.node.train, provider.as_ref())?;
    let sentence_index = build_semantic_index(&dataset.sentence.train, provider.as_ref())?;
    let retriever = |index| Retriever {
        index,
        kg: &kg,
        catalog: &catalog,
        provider: provider.as_ref(),
        caps: NeighborCaps::default(),
        cutoff_year: dataset.cutoff_year(),
    };
    let node_retrieval = retriever(&node_index);
    let sentence_retrieval = retriever(&sentence_index);
    let digest = config_digest(config)?;

    // sentence generation
    let kind = ModelKind::Seq2Seq;
    let train = train_pairs(&dataset.sentence.train, &sentence_retrieval, NeighborSource::Semantic, kind, config.seed)?;
    let valid = train_pairs(&dataset.sentence.valid, &sentence_retrieval, NeighborSource::Semantic, kind, config.seed)?;
    let mut generator = NgramSeq2Seq::new("ngram-s2s+sn", NgramSeq2SeqConfig::default());
    generator.train(&train, &valid, &config.train)?;
    let test_sentence = &dataset.sentence.test;
    let mut sentence_predictions = Vec::with_capacity(test_sentence.len());
    for inst in test_sentence {
        let neighbors = sentence_retrieval.retrieve(inst)?.semantic;
        let input = model_input(inst, &neighbors);
        sentence_predictions.push(PredictionRecord {
            instance_id: inst.instance_id.clone(),
            model_id: "ngram-s2s+sn".into(),
            config_digest: digest.clone(),
            outputs: generate_sentence(&generator, &inst.instance_id, &input.text, 1)?,
        });
    }

    // node ranking
    let bank = dataset.entity_bank();
    let ranker = BiEncoderNodes::new(StubBiEncoder::new(CharNgramProvider::default()), &bank, TOP_K)?;
    let test_node = &dataset.node.test;
    let cached: HashMap<String, NeighborSet> = test_node
        .iter()
        .map(|i| Ok((i.instance_id.clone(), node_retrieval.retrieve(i)?)))
        .collect::<Result<_>>()?;
    let neighbors = StaticNeighbors(cached);
    let mut node_predictions = predict_nodes(&ranker, test_node, &neighbors, NeighborSource::Semantic, &digest)?;
    let pipeline = RerankPipeline::new(&ranker, &EchoRetrieve);
    for inst in test_node {
        let out = pipeline.run(inst, &neighbors)?;
        node_predictions.push(PredictionRecord {
            instance_id: inst.instance_id.clone(),
            model_id: out.variant,
            config_digest: digest.clone(),
            outputs: out.outputs,
        });
    }

    // evaluation
    let cos = crate::evalsuite::EmbeddingScorer::new(CharNgramProvider::default());
    let challenging = challenging_subset(&subset_items(test_sentence), provider.as_ref(), CHALLENGING_PERCENTILE, None)?;
    let subsets = BTreeMap::from([("challenging".to_string(), challenging.ids.iter().cloned().collect())]);
    let sentence_report = evaluate_sentences(
        &sentence_predictions,
        test_sentence,
        &[&crate::evalsuite::TokenOverlapScorer, &cos],
        &subsets,
    )?;
    let node_report = evaluate_nodes(&node_predictions, test_node, &dataset, &cos, &BTreeMap::new())?;

    let stub = StubBiEncoder::new(CharNgramProvider::default());
    let mut evaluated = Vec::new();
    let mut skipped = 0;
    for inst in test_node {
        let cluster = dataset.truth_cluster(inst);
        let distractors = match select_distractors(
            &inst.target_node,
            &cluster,
            &dataset.paper_nodes(&inst.paper_id),
            provider.as_ref(),
        ) {
            Ok(d) => d,
            Err(Error::Validation(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let q = stub.encode_query(&model_input(inst, &[]).text)?;
        let mut score = |cands: &[String]| -> Vec<f64> {
            cands
                .iter()
                .map(|c| stub.encode_candidate(c).map(|v| crate::embedding::dot(&q, &v)).unwrap_or(f64::NEG_INFINITY))
                .collect()
        };
        evaluated.push(multi_choice_eval(&mut score, &inst.target_node, &distractors)?);
    }
    let n = evaluated.len().max(1) as f64;
    let mean = MultiChoiceResult {
        mrr: evaluated.iter().map(|r| r.mrr).sum::<f64>() / n,
        hit1: evaluated.iter().map(|r| r.hit1).sum::<f64>() / n,
        hit3: evaluated.iter().map(|r| r.hit3).sum::<f64>() / n,
    };

    let items = test_sentence
        .iter()
        .map(|i| {
            Ok(AnalysisItem {
                instance_id: i.instance_id.clone(),
                direction: i.direction,
                background: i.background.clone(),
                reference: i.gold().to_string(),
                neighbors: sentence_retrieval.retrieve(i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let neighbor_analysis = neighbor_similarity_analysis(&items, provider.as_ref())?;

    let mut instance_counts = BTreeMap::new();
    for (task, splits) in [("node", &dataset.node), ("sentence", &dataset.sentence)] {
        instance_counts.insert(format!("{task}/train"), splits.train.len());
        instance_counts.insert(format!("{task}/valid"), splits.valid.len());
        instance_counts.insert(format!("{task}/test"), splits.test.len());
    }
    Ok(ToyRunOutput {
        config_digest: digest,
        instance_counts,
        kg_nodes: kg.node_count(),
        kg_edges: kg.edge_count(),
        index_entries: node_index.len(),
        node_predictions,
        sentence_predictions,
        node_report: node_report.summary(),
        sentence_report: sentence_report.summary(),
        challenging,
        multi_choice: MultiChoiceSummary { evaluated: evaluated.len(), skipped, mean },
        neighbor_analysis,
    })
}
