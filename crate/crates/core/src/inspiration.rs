//! Inspiration retrieval: semantic neighbours from the training split,
//! one-hop neighbours from the background knowledge graph, and titles of
//! cited papers published before the cutoff year.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentGraph, PaperRecord, Split, TaskInstance};
use crate::embedding::{check_dimension, dot, EmbeddingProvider};
use crate::kgraph::KnowledgeGraph;
use crate::prompting::seed_prompt;
use crate::text::normalize;
use crate::{Error, Result};

pub const DEFAULT_SEMANTIC_CAP: usize = 20;
pub const DEFAULT_CITATION_CAP: usize = 5;

/// Retrieval query `q`: the seed prompt followed by the background context.
pub fn build_query(instance: &TaskInstance) -> String {
    format!(
        "{} Context: {}",
        seed_prompt(&instance.seed, instance.target_type, instance.direction),
        instance.background
    )
}

/// Keeps the `k` smallest elements under `cmp`, sorted.
pub(crate) fn top_k_by<T>(mut items: Vec<T>, k: usize, cmp: impl Fn(&T, &T) -> Ordering) -> Vec<T> {
    if k == 0 {
        return Vec::new();
    }
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, &cmp);
        items.truncate(k);
    }
    items.sort_by(&cmp);
    items
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEntry {
    pub instance_id: String,
    pub paper_id: String,
    pub year: i32,
    /// Input text `q_i`.
    pub query: String,
    /// Target entity `u_i`.
    pub target: String,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticHit {
    pub query: String,
    pub target: String,
    pub similarity: f64,
    pub instance_id: String,
    pub paper_id: String,
}

fn hit_order(a: &SemanticHit, b: &SemanticHit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.query.cmp(&b.query))
        .then_with(|| a.target.cmp(&b.target))
        .then_with(|| a.instance_id.cmp(&b.instance_id))
}

/// Exact-scan index over training inputs and their target entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticIndex {
    pub entries: Vec<SemanticEntry>,
    pub built_from: Split,
    pub provider: String,
    pub dimension: usize,
}

impl SemanticIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-`k` entries by dot product with `query_vector`, skipping entries
    /// from `exclude_paper`.
    pub fn search(&self, query_vector: &[f32], k: usize, exclude_paper: Option<&str>) -> Vec<SemanticHit> {
        let hits: Vec<SemanticHit> = self
            .entries
            .iter()
            .filter(|e| exclude_paper != Some(e.paper_id.as_str()))
            .map(|e| SemanticHit {
                query: e.query.clone(),
                target: e.target.clone(),
                similarity: dot(query_vector, &e.vector),
                instance_id: e.instance_id.clone(),
                paper_id: e.paper_id.clone(),
            })
            .collect();
        top_k_by(hits, k, hit_order)
    }
}

/// One entry per training instance, keyed by its query embedding.
pub fn build_semantic_index(train: &[TaskInstance], provider: &dyn EmbeddingProvider) -> Result<SemanticIndex> {
    let entries = train
        .iter()
        .map(|inst| {
            let query = build_query(inst);
            let vector = provider.embed(&query)?;
            check_dimension(provider, &vector)?;
            Ok(SemanticEntry {
                instance_id: inst.instance_id.clone(),
                paper_id: inst.paper_id.clone(),
                year: inst.year,
                query,
                target: inst.target_node.clone(),
                vector,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticIndex {
        entries,
        built_from: Split::Train,
        provider: provider.name().to_string(),
        dimension: provider.dimension(),
    })
}

/// Top-`k` `(q_i, u_i, similarity)` triples for query text `q`.
pub fn semantic_neighbors(
    index: &SemanticIndex,
    q: &str,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<SemanticHit>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let v = provider.embed(q)?;
    check_dimension(provider, &v)?;
    Ok(index.search(&v, k, None))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub title: String,
    pub year: i32,
    pub citations: Vec<String>,
}

/// Paper metadata needed to resolve citations: title, year, cited ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperCatalog {
    papers: HashMap<String, CatalogEntry>,
}

impl PaperCatalog {
    pub fn from_records(records: &[PaperRecord]) -> Self {
        Self {
            papers: records
                .iter()
                .map(|r| {
                    (
                        r.paper_id.clone(),
                        CatalogEntry {
                            title: r.title.clone(),
                            year: r.year,
                            citations: r.citations.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_graphs(graphs: &[DocumentGraph]) -> Self {
        Self {
            papers: graphs
                .iter()
                .map(|g| {
                    (
                        g.paper_id.clone(),
                        CatalogEntry {
                            title: g.title.clone(),
                            year: g.year,
                            citations: g.citations.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn insert(&mut self, paper_id: &str, entry: CatalogEntry) {
        self.papers.insert(paper_id.to_string(), entry);
    }

    pub fn get(&self, paper_id: &str) -> Option<&CatalogEntry> {
        self.papers.get(paper_id)
    }

    pub fn len(&self) -> usize {
        self.papers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.papers.is_empty()
    }
}

/// Cited papers of `doc_id` (resolved in the catalog) with `year < cutoff_year`,
/// ranked by cosine similarity of their title to `q`; ties by title.
pub fn citation_neighbors(
    catalog: &PaperCatalog,
    doc_id: &str,
    q: &str,
    k: usize,
    cutoff_year: i32,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<String>> {
    let doc = catalog
        .get(doc_id)
        .ok_or_else(|| Error::Lookup(format!("unknown paper `{doc_id}`")))?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut seen = HashSet::new();
    let titles: Vec<&str> = doc
        .citations
        .iter()
        .filter_map(|id| catalog.get(id))
        .filter(|c| c.year < cutoff_year)
        .map(|c| c.title.as_str())
        .filter(|t| seen.insert(normalize(t)))
        .collect();
    if titles.is_empty() {
        return Ok(Vec::new());
    }
    let qv = provider.embed(q)?;
    check_dimension(provider, &qv)?;
    let scored = titles
        .into_iter()
        .map(|t| Ok((t, dot(&qv, &provider.embed(t)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k_by(scored, k, |a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)))
        .into_iter()
        .map(|(t, _)| t.to_string())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborCaps {
    pub semantic: usize,
    pub citation: usize,
}

impl Default for NeighborCaps {
    fn default() -> Self {
        Self {
            semantic: DEFAULT_SEMANTIC_CAP,
            citation: DEFAULT_CITATION_CAP,
        }
    }
}

/// Retrieved inspirations of one instance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub semantic: Vec<String>,
    pub kg: Vec<String>,
    pub citation: Vec<String>,
    pub caps: Option<NeighborCaps>,
}

/// Which retrieved list feeds a model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborSource {
    None,
    Semantic,
    Kg,
    Citation,
}

impl std::str::FromStr for NeighborSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(NeighborSource::None),
            "semantic" | "sn" => Ok(NeighborSource::Semantic),
            "kg" => Ok(NeighborSource::Kg),
            "citation" | "ct" => Ok(NeighborSource::Citation),
            other => Err(Error::Validation(format!("unknown neighbor source `{other}`"))),
        }
    }
}

impl NeighborSet {
    pub fn get(&self, source: NeighborSource) -> &[String] {
        match source {
            NeighborSource::None => &[],
            NeighborSource::Semantic => &self.semantic,
            NeighborSource::Kg => &self.kg,
            NeighborSource::Citation => &self.citation,
        }
    }

    pub fn all_present(&self) -> bool {
        !self.semantic.is_empty() && !self.kg.is_empty() && !self.citation.is_empty()
    }
}

fn dedup_normalized(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|s| seen.insert(normalize(s))).collect()
}

/// Everything needed to retrieve the three neighbour types.
pub struct Retriever<'a> {
    pub index: &'a SemanticIndex,
    pub kg: &'a KnowledgeGraph,
    pub catalog: &'a PaperCatalog,
    pub provider: &'a dyn EmbeddingProvider,
    pub caps: NeighborCaps,
    pub cutoff_year: i32,
}

impl Retriever<'_> {
    /// Semantic targets, KG one-hop neighbours of the seed and cited titles.
    ///
    /// Semantic entries from the instance's own paper are skipped so that a
    /// training instance never retrieves its own target. A paper missing from
    /// the catalog yields no citation neighbours.
    pub fn retrieve(&self, instance: &TaskInstance) -> Result<NeighborSet> {
        let q = build_query(instance);
        let semantic = if self.caps.semantic == 0 || self.index.is_empty() {
            Vec::new()
        } else {
            let qv = self.provider.embed(&q)?;
            check_dimension(self.provider, &qv)?;
            let hits = self.index.search(&qv, self.caps.semantic, Some(&instance.paper_id));
            dedup_normalized(hits.into_iter().map(|h| h.target))
        };
        let kg = dedup_normalized(self.kg.one_hop_neighbors(&instance.seed));
        let citation = match self.catalog.get(&instance.paper_id) {
            Some(_) => citation_neighbors(
                self.catalog,
                &instance.paper_id,
                &q,
                self.caps.citation,
                self.cutoff_year,
                self.provider,
            )?,
            None => Vec::new(),
        };
        Ok(NeighborSet {
            semantic,
            kg,
            citation,
            caps: Some(self.caps),
        })
    }
}

pub fn retrieve_all(
    instance: &TaskInstance,
    index: &SemanticIndex,
    kg: &KnowledgeGraph,
    catalog: &PaperCatalog,
    provider: &dyn EmbeddingProvider,
    caps: NeighborCaps,
    cutoff_year: i32,
) -> Result<NeighborSet> {
    Retriever {
        index,
        kg,
        catalog,
        provider,
        caps,
        cutoff_year,
    }
    .retrieve(instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Direction, NodeType, TaskKind};
    use crate::embedding::HashingProvider;

    fn inst(id: &str, paper: &str, seed: &str, target: &str, bg: &str) -> TaskInstance {
        TaskInstance {
            instance_id: id.into(),
            task: TaskKind::Node,
            seed: seed.into(),
            target_type: NodeType::Task,
            direction: Direction::Forward,
            background: bg.into(),
            background_sentences: vec![bg.into()],
            background_terms: vec![],
            target_node: target.into(),
            target_sentence: None,
            paper_id: paper.into(),
            year: 2019,
        }
    }

    #[test]
    fn query_shapes() {
        let mut i = inst("a", "p", "knowledge acquisition", "x", "current plms...");
        i.direction = Direction::Backward;
        i.target_type = NodeType::Method;
        assert_eq!(build_query(&i), "knowledge acquisition is done by using Method Context: current plms...");
        let j = inst("b", "p", "x", "y", "");
        assert!(build_query(&j).starts_with("x is used for Task"));
        assert_eq!(build_query(&j), "x is used for Task Context: ");
    }

    #[test]
    fn index_sizes_and_norms() {
        let p = HashingProvider::new(32, 1);
        assert!(build_semantic_index(&[], &p).unwrap().is_empty());
        let train: Vec<_> = (0..7).map(|i| inst(&format!("i{i}"), "p", &format!("s{i}"), "t", "b")).collect();
        let idx = build_semantic_index(&train, &p).unwrap();
        assert_eq!(idx.len(), 7);
        assert!(idx.entries.iter().all(|e| (dot(&e.vector, &e.vector) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn identical_query_ranks_first() {
        let p = HashingProvider::new(32, 1);
        let train: Vec<_> = (0..10).map(|i| inst(&format!("i{i}"), "p", &format!("s{i}"), &format!("t{i}"), "b")).collect();
        let idx = build_semantic_index(&train, &p).unwrap();
        assert!(semantic_neighbors(&idx, "anything", 0, &p).unwrap().is_empty());
        let q = build_query(&train[4]);
        let hits = semantic_neighbors(&idx, &q, 3, &p).unwrap();
        assert_eq!(hits[0].target, "t4");
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
    }

    struct Dim3;
    impl EmbeddingProvider for Dim3 {
        fn name(&self) -> &str {
            "dim3"
        }
        fn dimension(&self) -> usize {
            4
        }
        fn embed(&self, _: &str) -> Result<Vec<f32>> {
            Ok(vec![1.0, 0.0, 0.0])
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = build_semantic_index(&[inst("a", "p", "s", "t", "b")], &Dim3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn catalog() -> PaperCatalog {
        let mut c = PaperCatalog::default();
        c.insert("elle", CatalogEntry { title: "ELLE".into(), year: 2022, citations: vec!["em".into(), "late".into(), "ghost".into()] });
        c.insert("em", CatalogEntry { title: "episodic memory in lifelong language learning".into(), year: 2019, citations: vec![] });
        c.insert("late", CatalogEntry { title: "a 2021 paper".into(), year: 2021, citations: vec![] });
        c.insert("lonely", CatalogEntry { title: "no refs".into(), year: 2020, citations: vec![] });
        c
    }

    #[test]
    fn citation_neighbors_filter_by_year() {
        let p = HashingProvider::new(16, 0);
        let c = catalog();
        assert_eq!(
            citation_neighbors(&c, "elle", "q", 5, 2021, &p).unwrap(),
            vec!["episodic memory in lifelong language learning"]
        );
        assert_eq!(citation_neighbors(&c, "elle", "q", 5, 2022, &p).unwrap().len(), 2);
        assert!(citation_neighbors(&c, "elle", "q", 5, 2019, &p).unwrap().is_empty());
        assert!(citation_neighbors(&c, "lonely", "q", 5, 2021, &p).unwrap().is_empty());
        assert!(matches!(citation_neighbors(&c, "nope", "q", 5, 2021, &p), Err(Error::Lookup(_))));
    }

    #[test]
    fn retrieve_all_respects_caps_and_absence() {
        let p = HashingProvider::new(16, 0);
        let train: Vec<_> = (0..10)
            .map(|i| inst(&format!("i{i}"), &format!("p{i}"), &format!("s{i}"), &format!("t{i}"), "b"))
            .collect();
        let idx = build_semantic_index(&train, &p).unwrap();
        let kg = KnowledgeGraph::default();
        let c = catalog();
        let mut q = inst("q", "elle", "unseen", "?", "b");
        q.year = 2022;
        let caps = NeighborCaps { semantic: 2, citation: 1 };
        let ns = retrieve_all(&q, &idx, &kg, &c, &p, caps, 2022).unwrap();
        assert!(ns.semantic.len() <= 2 && ns.citation.len() <= 1);
        assert!(ns.kg.is_empty());

        let empty = build_semantic_index(&[], &p).unwrap();
        let mut lone = inst("z", "nowhere", "unseen", "?", "b");
        lone.year = 2022;
        let ns = retrieve_all(&lone, &empty, &kg, &c, &p, NeighborCaps::default(), 2021).unwrap();
        assert!(ns.semantic.is_empty() && ns.kg.is_empty() && ns.citation.is_empty());
    }

    #[test]
    fn own_paper_is_not_retrieved() {
        let p = HashingProvider::new(16, 0);
        let train = vec![inst("a", "p1", "s", "own target", "b"), inst("b", "p2", "s", "other target", "b")];
        let idx = build_semantic_index(&train, &p).unwrap();
        let r = Retriever { index: &idx, kg: &KnowledgeGraph::default(), catalog: &PaperCatalog::default(), provider: &p, caps: NeighborCaps::default(), cutoff_year: 2021 };
        assert_eq!(r.retrieve(&train[0]).unwrap().semantic, vec!["other target"]);
    }
}
