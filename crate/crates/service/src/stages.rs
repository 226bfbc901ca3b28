//! The pipeline commands as library functions. Each reads its inputs from
//! the workdir, checks them against the producing stage's manifest, writes
//! its artifacts and finishes by writing its own manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use clbd_core::contrastive::ModelKind;
use clbd_core::corpus::{ingest_corpus, write_corpus, Split, TaskInstance, TaskKind};
use clbd_core::embedding::{dot, EmbeddingProvider};
use clbd_core::evalsuite::{
    challenging_subset, multi_choice_eval, neighbor_similarity_analysis, scorer_by_name, select_distractors,
    significance_test, AnalysisItem, ChallengingSubset, MetricReport, MultiChoiceResult, SimilarityScorer, ALL_SUBSET,
};
use clbd_core::genmodels::{
    generate_sentence, load_model, read_predictions, write_predictions, BiEncoder, BiEncoderNodes, DecodingConfig,
    GeneratorNodes, HashedBiEncoder, HashedBiEncoderConfig, LoadedModel, NgramSeq2Seq, NgramSeq2SeqConfig,
    NodePredictor, PredictionRecord, RegistryEntry, RerankPipeline, TrainConfig, TrainableGenerator,
};
use clbd_core::inspiration::{build_semantic_index, NeighborSource, PaperCatalog, Retriever, SemanticIndex};
use clbd_core::kgraph::{EntityBank, KnowledgeGraph};
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::{
    build_dataset, evaluate_nodes, evaluate_sentences, model_input, predict_nodes, subset_items, train_pairs, Dataset,
};

use crate::config::{trainable, Config, PredictRun, TrainRun};
use crate::error::{Result, ServiceError};
use crate::manifest::{validate_chain, ChainReport, Manifest, ManifestBuilder};

pub const BUILD_DATA: &str = "build-data";
pub const BUILD_KG: &str = "build-kg";
pub const BUILD_INDEX: &str = "build-index";
pub const TRAIN: &str = "train";
pub const PREDICT: &str = "predict";
pub const EVALUATE: &str = "evaluate";
pub const ANALYZE: &str = "analyze";

pub const TASKS: [TaskKind; 2] = [TaskKind::Sentence, TaskKind::Node];

/// Fixed artifact locations inside the workdir.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("data/corpus.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/dataset.json")
    }
    pub fn split_list(&self, task: TaskKind, split: Split) -> PathBuf {
        self.root.join(format!("data/splits/{task}/{split}.txt"))
    }
    pub fn kg_dir(&self) -> PathBuf {
        self.root.join("kg")
    }
    pub fn kg_files(&self) -> [PathBuf; 2] {
        [self.kg_dir().join("nodes.jsonl"), self.kg_dir().join("edges.jsonl")]
    }
    pub fn index(&self, task: TaskKind) -> PathBuf {
        self.root.join(format!("index/{task}.json"))
    }
    pub fn train_report(&self, model: &str) -> PathBuf {
        self.root.join(format!("models/{model}.report.json"))
    }
    pub fn predictions(&self, task: TaskKind, run: &str) -> PathBuf {
        self.root.join(format!("predictions/{task}/{}.jsonl", file_safe(run)))
    }
    pub fn report_dir(&self, task: TaskKind) -> PathBuf {
        self.root.join(format!("reports/{task}"))
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || "-_+.".contains(c) { c } else { '_' }).collect()
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    ensure_parent(p)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(p, text)?;
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(p: &Path, stage: &'static str) -> Result<T> {
    let f = File::open(p).map_err(|_| ServiceError::MissingArtifact { path: p.display().to_string(), stage })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn begin(cfg: &Config, command: &str) -> Result<(Layout, ManifestBuilder)> {
    let root = cfg.workdir();
    std::fs::create_dir_all(&root)?;
    let b = ManifestBuilder::new(&root, command, &cfg.digest()?, cfg.seed);
    Ok((Layout::new(root), b))
}

fn load_dataset(layout: &Layout, m: &mut ManifestBuilder) -> Result<Dataset> {
    let d = read_json(&layout.dataset(), BUILD_DATA)?;
    m.input_from(BUILD_DATA, &layout.dataset())?;
    Ok(d)
}

fn load_kg(layout: &Layout, m: &mut ManifestBuilder) -> Result<KnowledgeGraph> {
    for f in layout.kg_files() {
        if !f.exists() {
            return Err(ServiceError::MissingArtifact { path: f.display().to_string(), stage: BUILD_KG });
        }
        m.input_from(BUILD_KG, &f)?;
    }
    Ok(KnowledgeGraph::load(layout.kg_dir())?)
}

fn load_index(layout: &Layout, task: TaskKind, m: &mut ManifestBuilder) -> Result<SemanticIndex> {
    let p = layout.index(task);
    let idx = read_json(&p, BUILD_INDEX)?;
    m.input_from(BUILD_INDEX, &p)?;
    Ok(idx)
}

/// Everything retrieval needs, loaded from the workdir.
pub struct Resources {
    pub dataset: Dataset,
    pub kg: KnowledgeGraph,
    pub catalog: PaperCatalog,
    pub indexes: BTreeMap<TaskKind, SemanticIndex>,
    pub provider: Arc<dyn EmbeddingProvider>,
    pub bank: Arc<EntityBank>,
}

impl Resources {
    fn load(cfg: &Config, layout: &Layout, m: &mut ManifestBuilder) -> Result<Self> {
        let dataset = load_dataset(layout, m)?;
        let kg = load_kg(layout, m)?;
        let mut indexes = BTreeMap::new();
        for task in TASKS {
            indexes.insert(task, load_index(layout, task, m)?);
        }
        let catalog = dataset.catalog();
        let bank = Arc::new(dataset.entity_bank());
        Ok(Self { dataset, kg, catalog, indexes, provider: cfg.retrieval.provider()?, bank })
    }

    /// Loads without manifest bookkeeping, for the server.
    pub fn open(cfg: &Config) -> Result<Self> {
        let layout = Layout::new(cfg.workdir());
        let mut scratch = ManifestBuilder::new(&layout.root, "serve", &cfg.digest()?, cfg.seed);
        Self::load(cfg, &layout, &mut scratch)
    }

    pub fn retriever(&self, cfg: &Config, task: TaskKind) -> Retriever<'_> {
        Retriever {
            index: &self.indexes[&task],
            kg: &self.kg,
            catalog: &self.catalog,
            provider: self.provider.as_ref(),
            caps: cfg.retrieval.caps(),
            cutoff_year: self.dataset.cutoff_year(),
        }
    }
}

/// Reads the configured corpus (or generates the synthetic one), builds
/// document graphs and instances, and writes the dataset plus split lists.
pub fn build_data(cfg: &Config) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, BUILD_DATA)?;
    let records = match &cfg.data.corpus {
        Some(p) => {
            let p = cfg.resolve(p);
            m.external_input(&p)?;
            ingest_corpus(&p, cfg.data.corpus_format()?)?
        }
        None => {
            let records = synthetic_corpus(&SyntheticConfig {
                papers: cfg.data.synthetic_papers,
                seed: cfg.seed,
                ..Default::default()
            });
            let out = layout.corpus();
            ensure_parent(&out)?;
            write_corpus(BufWriter::new(File::create(&out)?), &records)?;
            m.output(&out)?;
            records
        }
    };
    let dataset = build_dataset(&records, cfg.data.years())?;
    write_json(&layout.dataset(), &dataset)?;
    m.output(&layout.dataset())?;
    let mut counts = BTreeMap::new();
    for task in TASKS {
        let splits = dataset.splits(task);
        for split in [Split::Train, Split::Valid, Split::Test] {
            let p = layout.split_list(task, split);
            ensure_parent(&p)?;
            let ids: Vec<&str> = splits.get(split).iter().map(|i| i.instance_id.as_str()).collect();
            let mut text = ids.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            std::fs::write(&p, text)?;
            m.output(&p)?;
            counts.insert(format!("{task}/{split}"), ids.len());
        }
    }
    m.details(json!({ "papers": records.len(), "instances": counts, "years": cfg.data.years() }));
    m.write()
}

pub fn build_kg(cfg: &Config) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, BUILD_KG)?;
    let dataset = load_dataset(&layout, &mut m)?;
    let kg = dataset.background_kg();
    kg.save(layout.kg_dir())?;
    for f in layout.kg_files() {
        m.output(&f)?;
    }
    let stats_path = layout.kg_dir().join("stats.json");
    write_json(&stats_path, &kg.stats())?;
    m.output(&stats_path)?;
    m.details(json!({ "cutoff_year": dataset.cutoff_year() }));
    m.write()
}

pub fn build_index(cfg: &Config) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, BUILD_INDEX)?;
    let dataset = load_dataset(&layout, &mut m)?;
    let provider = cfg.retrieval.provider()?;
    let mut sizes = BTreeMap::new();
    for task in TASKS {
        let index = build_semantic_index(&dataset.splits(task).train, provider.as_ref())?;
        sizes.insert(task.to_string(), index.len());
        write_json(&layout.index(task), &index)?;
        m.output(&layout.index(task))?;
    }
    m.details(json!({ "provider": provider.name(), "entries": sizes }));
    m.write()
}

fn model_kind(entry: &RegistryEntry) -> Result<ModelKind> {
    match entry.backend.as_str() {
        "ngram-seq2seq" => Ok(ModelKind::Seq2Seq),
        "hashed-biencoder" => Ok(ModelKind::DualEncoder),
        other => Err(ServiceError::Config(format!("backend `{other}` of `{}` is not trainable", entry.name))),
    }
}

fn backend_options<T: for<'de> serde::Deserialize<'de> + Default>(entry: &RegistryEntry) -> Result<T> {
    if entry.options.is_null() {
        Ok(T::default())
    } else {
        serde_json::from_value(entry.options.clone())
            .map_err(|e| ServiceError::Config(format!("options of `{}`: {e}", entry.name)))
    }
}

fn train_one(cfg: &Config, res: &Resources, run: &TrainRun, entry: &RegistryEntry, out: &Path) -> Result<serde_json::Value> {
    let kind = model_kind(entry)?;
    let retriever = res.retriever(cfg, run.task);
    let splits = res.dataset.splits(run.task);
    let train = train_pairs(&splits.train, &retriever, run.neighbor_source, kind, cfg.seed)?;
    let valid = train_pairs(&splits.valid, &retriever, run.neighbor_source, kind, cfg.seed)?;
    let (train_cfg, report) = match kind {
        ModelKind::Seq2Seq => {
            let c = run.overrides.apply(TrainConfig::seq2seq(), cfg.seed);
            let mc: NgramSeq2SeqConfig = backend_options(entry)?;
            let mut model = NgramSeq2Seq::new(entry.name.clone(), mc);
            let report = model.train(&train, &valid, &c)?;
            ensure_parent(out)?;
            model.save(out)?;
            (c, report)
        }
        ModelKind::DualEncoder => {
            if run.task != TaskKind::Node {
                return Err(ServiceError::Config(format!("bi-encoder `{}` only ranks nodes", entry.name)));
            }
            let c = run.overrides.apply(TrainConfig::dual_encoder(), cfg.seed);
            let mc: HashedBiEncoderConfig = backend_options(entry)?;
            let mut model = HashedBiEncoder::new(entry.name.clone(), mc);
            let report = model.train(&train, &valid, &c)?;
            ensure_parent(out)?;
            model.save(out)?;
            (c, report)
        }
    };
    Ok(json!({
        "task": run.task,
        "neighbor_source": run.neighbor_source,
        "pairs": { "train": train.len(), "valid": valid.len() },
        "train_config": train_cfg,
        "report": report,
    }))
}

/// Trains every configured run, writing checkpoints where the registry
/// expects them.
pub fn train(cfg: &Config, only: Option<&str>) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, TRAIN)?;
    let res = Resources::load(cfg, &layout, &mut m)?;
    let registry = cfg.registry();
    let mut details = BTreeMap::new();
    let runs: Vec<&TrainRun> = cfg.train.runs.iter().filter(|r| only.is_none_or(|o| o == r.model)).collect();
    if runs.is_empty() {
        return Err(ServiceError::Config(match only {
            Some(o) => format!("no train run for model `{o}`"),
            None => "no train runs configured".into(),
        }));
    }
    for run in runs {
        let entry = registry.get(&run.model).expect("validated at load");
        let ckpt = entry.checkpoint.clone().expect("trainable backends get a checkpoint path");
        log::info!("training `{}` on {} instances", run.model, res.dataset.splits(run.task).train.len());
        let d = train_one(cfg, &res, run, entry, &ckpt)?;
        write_json(&layout.train_report(&run.model), &d["report"])?;
        m.output(&ckpt)?;
        m.output(&layout.train_report(&run.model))?;
        details.insert(run.model.clone(), d);
    }
    m.details(serde_json::to_value(details)?);
    m.write()
}

fn load_registered(cfg: &Config, name: &str, provider: &Arc<dyn EmbeddingProvider>, m: &mut ManifestBuilder) -> Result<LoadedModel> {
    let registry = cfg.registry();
    let entry = registry
        .get(name)
        .ok_or_else(|| ServiceError::Config(format!("unregistered model `{name}`")))?;
    if trainable(&entry.backend) {
        match &entry.checkpoint {
            Some(p) if p.exists() => {
                if p.starts_with(cfg.workdir()) {
                    m.input_from(TRAIN, p)?;
                } else {
                    m.external_input(p)?;
                }
            }
            _ => log::warn!("model `{name}` has no checkpoint; using it untrained"),
        }
    }
    Ok(load_model(entry, Some(provider.clone()))?)
}

pub fn node_predictor(model: LoadedModel, bank: &Arc<EntityBank>) -> Result<Box<dyn NodePredictor>> {
    Ok(match model {
        LoadedModel::Generator(g) => {
            Box::new(GeneratorNodes { generator: g, config: DecodingConfig::node().with_bank(bank.clone()) })
        }
        LoadedModel::BiEncoder(b) => Box::new(BiEncoderNodes::new(b, bank, clbd_core::evalsuite::TOP_K)?),
    })
}

fn predict_run(cfg: &Config, res: &Resources, run: &PredictRun, m: &mut ManifestBuilder) -> Result<Vec<PredictionRecord>> {
    let digest = cfg.digest()?;
    let retriever = res.retriever(cfg, run.task);
    let test = &res.dataset.splits(run.task).test;
    let first = load_registered(cfg, &run.model, &res.provider, m)?;
    match run.task {
        TaskKind::Node => {
            let first = node_predictor(first, &res.bank)?;
            let mut records = match &run.rerank_with {
                None => predict_nodes(first.as_ref(), test, &retriever, run.neighbor_source, &digest)?,
                Some(second) => {
                    let second = node_predictor(load_registered(cfg, second, &res.provider, m)?, &res.bank)?;
                    let mut p = RerankPipeline::new(first.as_ref(), second.as_ref());
                    p.first_source = run.neighbor_source;
                    p.no_finetune = run.no_finetune;
                    test.iter()
                        .map(|inst| {
                            Ok(PredictionRecord {
                                instance_id: inst.instance_id.clone(),
                                model_id: String::new(),
                                config_digest: digest.clone(),
                                outputs: p.run(inst, &retriever)?.outputs,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            for r in &mut records {
                r.model_id = run.name();
            }
            Ok(records)
        }
        TaskKind::Sentence => {
            let LoadedModel::Generator(g) = first else {
                return Err(ServiceError::Config(format!("`{}` cannot generate sentences", run.model)));
            };
            if run.rerank_with.is_some() {
                return Err(ServiceError::Config("reranking applies to node prediction only".into()));
            }
            test.iter()
                .map(|inst| {
                    let neighbors = match run.neighbor_source {
                        NeighborSource::None => Vec::new(),
                        s => retriever.retrieve(inst)?.get(s).to_vec(),
                    };
                    let input = model_input(inst, &neighbors);
                    Ok(PredictionRecord {
                        instance_id: inst.instance_id.clone(),
                        model_id: run.name(),
                        config_digest: digest.clone(),
                        outputs: generate_sentence(g.as_ref(), &inst.instance_id, &input.text, 1)?,
                    })
                })
                .collect()
        }
    }
}

pub fn predict(cfg: &Config, only: Option<&str>) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, PREDICT)?;
    let res = Resources::load(cfg, &layout, &mut m)?;
    let runs: Vec<&PredictRun> = cfg.predict.runs.iter().filter(|r| only.is_none_or(|o| o == r.model)).collect();
    if runs.is_empty() {
        return Err(ServiceError::Config("no predict runs selected".into()));
    }
    let mut written = BTreeMap::new();
    for run in runs {
        let records = predict_run(cfg, &res, run, &mut m)?;
        let p = layout.predictions(run.task, &run.name());
        ensure_parent(&p)?;
        let mut w = BufWriter::new(File::create(&p)?);
        write_predictions(&mut w, &records)?;
        w.flush()?;
        drop(w);
        m.output(&p)?;
        written.insert(run.name(), json!({ "task": run.task, "records": records.len() }));
    }
    m.details(serde_json::to_value(written)?);
    m.write()
}

fn subsets_for(cfg: &Config, instances: &[TaskInstance], provider: &dyn EmbeddingProvider) -> Result<ChallengingSubset> {
    Ok(challenging_subset(
        &subset_items(instances),
        provider,
        cfg.evaluate.challenging_percentile,
        cfg.evaluate.challenging_threshold,
    )?)
}

/// Per-instance value of `metric` on the `all` rows of one model.
fn per_instance(report: &MetricReport, model: &str, metric: &str) -> BTreeMap<String, f64> {
    report
        .rows
        .iter()
        .filter(|r| r.model == model && r.subset == ALL_SUBSET)
        .filter_map(|r| r.values.get(metric).map(|v| (r.instance_id.clone(), *v)))
        .collect()
}

fn merge_rows(into: &mut MetricReport, other: MetricReport) {
    for (a, b) in into.rows.iter_mut().zip(other.rows) {
        for (k, v) in b.values {
            a.values.entry(k).or_insert(v);
        }
    }
}

fn evaluate_task(
    cfg: &Config,
    dataset: &Dataset,
    task: TaskKind,
    preds: &[PredictionRecord],
    scorers: &[Box<dyn SimilarityScorer + '_>],
    provider: &dyn EmbeddingProvider,
) -> Result<(MetricReport, ChallengingSubset)> {
    let test = &dataset.splits(task).test;
    let challenging = subsets_for(cfg, test, provider)?;
    let subsets = BTreeMap::from([("challenging".to_string(), challenging.ids.iter().cloned().collect::<BTreeSet<_>>())]);
    let mut by_model: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    for p in preds {
        by_model.entry(p.model_id.as_str()).or_default().push(p.clone());
    }
    let mut report = MetricReport::default();
    for model_preds in by_model.values() {
        let r = match task {
            TaskKind::Node => {
                let mut base = evaluate_nodes(model_preds, test, dataset, scorers[0].as_ref(), &subsets)?;
                for s in &scorers[1..] {
                    merge_rows(&mut base, evaluate_nodes(model_preds, test, dataset, s.as_ref(), &subsets)?);
                }
                base
            }
            TaskKind::Sentence => {
                let refs: Vec<&dyn SimilarityScorer> = scorers.iter().map(|s| s.as_ref() as &dyn SimilarityScorer).collect();
                evaluate_sentences(model_preds, test, &refs, &subsets)?
            }
        };
        report.rows.extend(r.rows);
    }
    Ok((report, challenging))
}

/// Scores prediction files against the dataset's references. Without
/// explicit files, every prediction file from the last `predict` run is used.
pub fn evaluate(cfg: &Config, explicit: &[(TaskKind, PathBuf)]) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, EVALUATE)?;
    let dataset = load_dataset(&layout, &mut m)?;
    let provider = cfg.retrieval.provider()?;
    if cfg.evaluate.scorers.is_empty() {
        return Err(ServiceError::Config("evaluate.scorers must name at least one scorer".into()));
    }
    let scorers = cfg
        .evaluate
        .scorers
        .iter()
        .map(|n| scorer_by_name(n, provider.as_ref()))
        .collect::<clbd_core::Result<Vec<_>>>()?;

    let mut files: Vec<(TaskKind, PathBuf)> = Vec::new();
    if explicit.is_empty() {
        let pm = crate::manifest::read_manifest(&layout.root, PREDICT)?;
        for o in &pm.outputs {
            let task = if o.path.starts_with("predictions/node/") { TaskKind::Node } else { TaskKind::Sentence };
            let p = layout.root.join(&o.path);
            m.input_from(PREDICT, &p)?;
            files.push((task, p));
        }
    } else {
        for (task, p) in explicit {
            let p = if p.is_absolute() { p.clone() } else { std::env::current_dir()?.join(p) };
            m.external_input(&p)?;
            files.push((*task, p));
        }
    }

    let mut summary = BTreeMap::new();
    let mut challenging_out = BTreeMap::new();
    let mut significance = BTreeMap::new();
    for task in TASKS {
        let mut preds = Vec::new();
        for (_, p) in files.iter().filter(|(t, _)| *t == task) {
            preds.extend(read_predictions(BufReader::new(File::open(p)?))?);
        }
        if preds.is_empty() {
            continue;
        }
        let (report, challenging) = evaluate_task(cfg, &dataset, task, &preds, &scorers, provider.as_ref())?;
        let dir = layout.report_dir(task);
        std::fs::create_dir_all(&dir)?;
        let rows = dir.join("rows.tsv");
        report.write_rows_tsv(BufWriter::new(File::create(&rows)?))?;
        m.output(&rows)?;
        let cmp = dir.join("comparison.tsv");
        report.write_comparison_tsv(BufWriter::new(File::create(&cmp)?))?;
        m.output(&cmp)?;

        let metric = match task {
            TaskKind::Node => "mrr",
            TaskKind::Sentence => "rouge_l",
        };
        let models: BTreeSet<&str> = report.rows.iter().map(|r| r.model.as_str()).collect();
        let models: Vec<&str> = models.into_iter().collect();
        let mut tests = BTreeMap::new();
        if let Some((base, rest)) = models.split_first() {
            let a = per_instance(&report, base, metric);
            for other in rest {
                let b = per_instance(&report, other, metric);
                let ids: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
                let xs: Vec<f64> = ids.iter().map(|k| a[*k]).collect();
                let ys: Vec<f64> = ids.iter().map(|k| b[*k]).collect();
                if !xs.is_empty() {
                    let p = significance_test(&xs, &ys, cfg.evaluate.bootstrap_seed)?;
                    tests.insert(format!("{base} vs {other}"), json!({ "metric": metric, "pairs": xs.len(), "p_value": p }));
                }
            }
        }
        significance.insert(task.to_string(), tests);
        summary.insert(task.to_string(), report.summary());
        challenging_out.insert(task.to_string(), challenging);
    }
    if summary.is_empty() {
        return Err(ServiceError::Config("no predictions to evaluate".into()));
    }
    for (name, value) in [
        ("summary.json", serde_json::to_value(&summary)?),
        ("challenging.json", serde_json::to_value(&challenging_out)?),
        ("significance.json", serde_json::to_value(&significance)?),
    ] {
        let p = layout.root.join("reports").join(name);
        write_json(&p, &value)?;
        m.output(&p)?;
    }
    m.seed("bootstrap_seed", cfg.evaluate.bootstrap_seed);
    m.write()
}

#[derive(Clone, Debug, Serialize)]
struct MultiChoiceOut {
    evaluated: usize,
    skipped: usize,
    mean: Option<MultiChoiceResult>,
}

fn multi_choice_for(model: &dyn BiEncoder, dataset: &Dataset, provider: &dyn EmbeddingProvider) -> Result<MultiChoiceOut> {
    let mut results = Vec::new();
    let mut skipped = 0;
    for inst in &dataset.node.test {
        let cluster = dataset.truth_cluster(inst);
        let distractors =
            match select_distractors(&inst.target_node, &cluster, &dataset.paper_nodes(&inst.paper_id), provider) {
                Ok(d) => d,
                Err(clbd_core::Error::Validation(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
        let q = model.encode_query(&model_input(inst, &[]).text)?;
        let mut score = |cands: &[String]| -> Vec<f64> {
            cands
                .iter()
                .map(|c| model.encode_candidate(c).map(|v| dot(&q, &v)).unwrap_or(f64::NEG_INFINITY))
                .collect()
        };
        results.push(multi_choice_eval(&mut score, &inst.target_node, &distractors)?);
    }
    let n = results.len() as f64;
    let mean = (!results.is_empty()).then(|| MultiChoiceResult {
        mrr: results.iter().map(|r| r.mrr).sum::<f64>() / n,
        hit1: results.iter().map(|r| r.hit1).sum::<f64>() / n,
        hit3: results.iter().map(|r| r.hit3).sum::<f64>() / n,
    });
    Ok(MultiChoiceOut { evaluated: results.len(), skipped, mean })
}

/// Neighbour-similarity analysis on the sentence test split and the
/// multiple-choice harness for every registered bi-encoder.
pub fn analyze(cfg: &Config) -> Result<Manifest> {
    let (layout, mut m) = begin(cfg, ANALYZE)?;
    let res = Resources::load(cfg, &layout, &mut m)?;
    let retriever = res.retriever(cfg, TaskKind::Sentence);
    let items = res
        .dataset
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
        .collect::<Result<Vec<_>>>()?;
    let analysis = neighbor_similarity_analysis(&items, res.provider.as_ref())?;
    let dir = layout.analysis_dir();
    std::fs::create_dir_all(&dir)?;
    let p = dir.join("neighbors.tsv");
    analysis.write_neighbor_tsv(BufWriter::new(File::create(&p)?))?;
    m.output(&p)?;
    let p = dir.join("background.tsv");
    analysis.write_background_tsv(BufWriter::new(File::create(&p)?))?;
    m.output(&p)?;
    let summary = json!({
        "instances": items.len(),
        "with_all_types": analysis.included.len(),
        "per_type": analysis.per_type,
        "background_by_direction": analysis.background_by_direction,
    });
    let p = dir.join("summary.json");
    write_json(&p, &summary)?;
    m.output(&p)?;

    let mut mc = BTreeMap::new();
    for entry in cfg.models.iter() {
        if let LoadedModel::BiEncoder(b) = load_registered(cfg, &entry.name, &res.provider, &mut m)? {
            mc.insert(entry.name.clone(), multi_choice_for(b.as_ref(), &res.dataset, res.provider.as_ref())?);
        }
    }
    let p = dir.join("multi_choice.json");
    write_json(&p, &mc)?;
    m.output(&p)?;
    m.write()
}

/// Validates the manifest chain of a workdir.
pub fn validate(cfg: &Config) -> Result<ChainReport> {
    validate_chain(&cfg.workdir())
}
