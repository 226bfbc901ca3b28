//! Non-canonicalized knowledge graph built as a union of document graphs.
//!
//! Node identity across documents is the normalized canonical text. Edge
//! multiplicity is preserved: two papers asserting the same relation are two
//! edges. Everything is stored in ordered maps so that the graph (and every
//! neighbour list read from it) is independent of document order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentGraph, NodeType, RelationType, Split, Splits};
use crate::text::normalize;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KgMention {
    pub paper_id: String,
    pub year: i32,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    /// Normalized canonical text; the node key.
    pub key: String,
    pub types: BTreeSet<NodeType>,
    pub mentions: Vec<KgMention>,
    /// Normalized surface forms of every mention merged into this node.
    pub forms: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KgEdge {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    pub paper_id: String,
    pub year: i32,
    pub sentence_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub nodes: usize,
    pub relations: usize,
    pub papers: usize,
    pub cutoff_year: Option<i32>,
    pub by_relation: BTreeMap<String, usize>,
    pub by_type: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<String, KgNode>,
    edges: Vec<KgEdge>,
    cutoff_year: Option<i32>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    /// node key -> cluster id
    cluster_index: BTreeMap<String, usize>,
    /// cluster id -> normalized forms (keys plus mention forms)
    clusters: Vec<BTreeSet<String>>,
    /// non-canonical mention form -> node keys carrying it
    form_index: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeGraph {
    /// Union of all document graphs, restricted to `year < cutoff` when a
    /// cutoff is given.
    pub fn build<'a>(graphs: impl IntoIterator<Item = &'a DocumentGraph>, cutoff_year: Option<i32>) -> Self {
        let mut nodes: BTreeMap<String, KgNode> = BTreeMap::new();
        let mut edges = Vec::new();
        for graph in graphs {
            if cutoff_year.is_some_and(|c| graph.year >= c) {
                continue;
            }
            let mut local_key = BTreeMap::new();
            for node in &graph.nodes {
                let key = normalize(&node.canonical_text);
                if key.is_empty() {
                    continue;
                }
                local_key.insert(node.node_id.as_str(), key.clone());
                let entry = nodes.entry(key.clone()).or_insert_with(|| KgNode {
                    key: key.clone(),
                    types: BTreeSet::new(),
                    mentions: Vec::new(),
                    forms: BTreeSet::new(),
                });
                entry.types.insert(node.node_type);
                entry.forms.insert(key);
                for form in graph.mention_forms(node) {
                    let f = normalize(&form);
                    if !f.is_empty() {
                        entry.forms.insert(f);
                    }
                }
                for m in &node.mentions {
                    entry.mentions.push(KgMention {
                        paper_id: graph.paper_id.clone(),
                        year: graph.year,
                        text: m.text.clone(),
                    });
                }
            }
            for e in &graph.edges {
                let (Some(h), Some(t)) = (local_key.get(e.head.as_str()), local_key.get(e.tail.as_str())) else {
                    continue;
                };
                if h == t {
                    continue;
                }
                edges.push(KgEdge {
                    head: h.clone(),
                    relation: e.relation,
                    tail: t.clone(),
                    paper_id: graph.paper_id.clone(),
                    year: graph.year,
                    sentence_index: e.sentence_index,
                });
            }
        }
        for node in nodes.values_mut() {
            node.mentions.sort();
        }
        edges.sort();
        Self::assemble(nodes, edges, cutoff_year)
    }

    fn assemble(nodes: BTreeMap<String, KgNode>, edges: Vec<KgEdge>, cutoff_year: Option<i32>) -> Self {
        let mut adjacency: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &edges {
            adjacency.entry(e.head.clone()).or_default().insert(e.tail.clone());
            adjacency.entry(e.tail.clone()).or_default().insert(e.head.clone());
        }

        // Clusters link node keys through mention forms that are themselves
        // node keys. Generic-only nodes ("this method") never act as links.
        let keys: Vec<&String> = nodes.keys().collect();
        let position: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let mut parent: Vec<usize> = (0..keys.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut form_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, node) in nodes.values().enumerate() {
            for form in &node.forms {
                if form == &node.key {
                    continue;
                }
                match position.get(form.as_str()) {
                    Some(&j) if nodes[form].types.iter().any(|t| *t != NodeType::Generic) => {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                    _ => {
                        form_index.entry(form.clone()).or_default().insert(node.key.clone());
                    }
                }
            }
        }
        let mut root_to_cluster: BTreeMap<usize, usize> = BTreeMap::new();
        let mut clusters: Vec<BTreeSet<String>> = Vec::new();
        let mut cluster_index = BTreeMap::new();
        for (i, node) in nodes.values().enumerate() {
            let root = find(&mut parent, i);
            let cid = *root_to_cluster.entry(root).or_insert_with(|| {
                clusters.push(BTreeSet::new());
                clusters.len() - 1
            });
            clusters[cid].extend(node.forms.iter().cloned());
            cluster_index.insert(node.key.clone(), cid);
        }

        Self {
            nodes,
            edges,
            cutoff_year,
            adjacency,
            cluster_index,
            clusters,
            form_index,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values()
    }

    pub fn node(&self, text: &str) -> Option<&KgNode> {
        self.nodes.get(&normalize(text))
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn cutoff_year(&self) -> Option<i32> {
        self.cutoff_year
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// All nodes adjacent to `seed` through an edge of any type in either
    /// direction, deduplicated, in lexicographic order. Empty when the seed
    /// is not in the graph.
    pub fn one_hop_neighbors(&self, seed: &str) -> Vec<String> {
        self.adjacency
            .get(&normalize(seed))
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Every normalized surface form coreferent with `text`, including itself.
    pub fn coreference_cluster(&self, text: &str) -> BTreeSet<String> {
        let key = normalize(text);
        let mut out = BTreeSet::new();
        if let Some(&cid) = self.cluster_index.get(&key) {
            out.extend(self.clusters[cid].iter().cloned());
        } else if let Some(owners) = self.form_index.get(&key) {
            for owner in owners {
                out.extend(self.clusters[self.cluster_index[owner]].iter().cloned());
            }
        }
        out.insert(key);
        out
    }

    pub fn stats(&self) -> KgStats {
        let mut by_relation = BTreeMap::new();
        for e in &self.edges {
            *by_relation.entry(e.relation.surface().to_string()).or_insert(0) += 1;
        }
        let mut by_type = BTreeMap::new();
        for n in self.nodes.values() {
            for t in &n.types {
                *by_type.entry(t.surface().to_string()).or_insert(0) += 1;
            }
        }
        let papers: BTreeSet<&str> = self
            .nodes
            .values()
            .flat_map(|n| n.mentions.iter().map(|m| m.paper_id.as_str()))
            .chain(self.edges.iter().map(|e| e.paper_id.as_str()))
            .collect();
        KgStats {
            nodes: self.nodes.len(),
            relations: self.edges.len(),
            papers: papers.len(),
            cutoff_year: self.cutoff_year,
            by_relation,
            by_type,
        }
    }

    /// Writes `nodes.jsonl` and `edges.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("nodes.jsonl"))?);
        let header = serde_json::json!({ "cutoff_year": self.cutoff_year });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for node in self.nodes.values() {
            serde_json::to_writer(&mut w, node)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("edges.jsonl"))?);
        for edge in &self.edges {
            serde_json::to_writer(&mut w, edge)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut lines = BufReader::new(File::open(dir.join("nodes.jsonl"))?).lines();
        let header: serde_json::Value = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Parse { line: 1, message: "missing KG header".into() }),
        };
        let cutoff_year = header
            .get("cutoff_year")
            .and_then(|v| v.as_i64())
            .map(|v| v as i32);
        let mut nodes = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let node: KgNode = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            nodes.insert(node.key.clone(), node);
        }
        let mut edges = Vec::new();
        for (i, line) in BufReader::new(File::open(dir.join("edges.jsonl"))?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            edges.push(serde_json::from_str::<KgEdge>(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        edges.sort();
        Ok(Self::assemble(nodes, edges, cutoff_year))
    }
}

/// Background KG `G_B`: every document graph published before `cutoff_year`.
pub fn build_background_kg<'a>(
    graphs: impl IntoIterator<Item = &'a DocumentGraph>,
    cutoff_year: i32,
) -> KnowledgeGraph {
    KnowledgeGraph::build(graphs, Some(cutoff_year))
}

/// Deduplicated set of normalized entity strings, used to constrain decoding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityBank {
    entries: BTreeSet<String>,
    provenance: BTreeSet<Split>,
}

impl EntityBank {
    pub fn from_strings<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut bank = Self::default();
        for s in items {
            bank.insert(s.as_ref());
        }
        bank
    }

    pub fn insert(&mut self, text: &str) -> bool {
        let n = normalize(text);
        !n.is_empty() && self.entries.insert(n)
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains(&normalize(text))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.entries.iter()
    }

    pub fn provenance(&self) -> &BTreeSet<Split> {
        &self.provenance
    }
}

/// Every seed and target node string across train, valid and test.
pub fn entity_bank(splits: &Splits) -> EntityBank {
    let mut bank = EntityBank::default();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let instances = splits.get(split);
        if !instances.is_empty() {
            bank.provenance.insert(split);
        }
        for inst in instances {
            bank.insert(&inst.seed);
            bank.insert(&inst.target_node);
        }
    }
    bank
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityNode, Mention, RelationEdge, Sentence, SentenceLabel, TaskInstance, TaskKind, Direction};

    fn node(id: &str, text: &str, ty: NodeType, forms: &[&str]) -> EntityNode {
        let mut mentions = vec![Mention { sentence: 0, start: 0, end: text.len(), text: text.into() }];
        for f in forms {
            mentions.push(Mention { sentence: 0, start: 0, end: f.len(), text: (*f).into() });
        }
        EntityNode { node_id: id.into(), mentions, node_type: ty, canonical_text: text.into() }
    }

    fn edge(h: &str, t: &str) -> RelationEdge {
        RelationEdge { head: h.into(), relation: RelationType::UsedFor, tail: t.into(), sentence_index: 0 }
    }

    fn doc(id: &str, year: i32, nodes: Vec<EntityNode>, edges: Vec<RelationEdge>) -> DocumentGraph {
        let mut nodes = nodes;
        nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        DocumentGraph {
            paper_id: id.into(),
            title: id.into(),
            year,
            sentences: vec![Sentence { text: "s".into(), label: SentenceLabel::Method }],
            citations: vec![],
            abbreviations: vec![],
            nodes,
            edges,
            background: vec![],
        }
    }

    #[test]
    fn empty_corpus_gives_empty_graph() {
        let kg = build_background_kg(std::iter::empty(), 2021);
        assert_eq!((kg.node_count(), kg.edge_count()), (0, 0));
    }

    #[test]
    fn shared_text_merges_across_documents() {
        let a = doc("a", 2019, vec![node("1", "Machine Translation", NodeType::Task, &[]), node("2", "transformer", NodeType::Method, &[])], vec![edge("2", "1")]);
        let b = doc("b", 2020, vec![node("1", "machine  translation", NodeType::Task, &[]), node("2", "rnn", NodeType::Method, &[])], vec![edge("2", "1")]);
        let kg = build_background_kg([&a, &b], 2021);
        let mt = kg.node("machine translation").unwrap();
        assert_eq!(mt.mentions.len(), 2);
        assert_eq!(kg.node_count(), 3);
        assert_eq!(kg.one_hop_neighbors("Machine Translation"), vec!["rnn", "transformer"]);
    }

    #[test]
    fn star_has_three_neighbors_and_absent_seed_has_none() {
        let d = doc(
            "s",
            2019,
            vec![
                node("c", "center", NodeType::Task, &[]),
                node("x", "x", NodeType::Method, &[]),
                node("y", "y", NodeType::Method, &[]),
                node("z", "z", NodeType::Method, &[]),
            ],
            vec![edge("x", "c"), edge("c", "y"), edge("z", "c")],
        );
        let kg = KnowledgeGraph::build([&d], None);
        assert_eq!(kg.one_hop_neighbors("center").len(), 3);
        assert!(kg.one_hop_neighbors("nowhere").is_empty());
        assert_eq!(kg.one_hop_neighbors("x"), vec!["center"]);
    }

    #[test]
    fn cutoff_excludes_later_papers() {
        let a = doc("a", 2020, vec![node("1", "a1", NodeType::Task, &[]), node("2", "a2", NodeType::Task, &[])], vec![edge("1", "2")]);
        let b = doc("b", 2021, vec![node("1", "b1", NodeType::Task, &[]), node("2", "a2", NodeType::Task, &[])], vec![edge("1", "2")]);
        let kg = build_background_kg([&a, &b], 2021);
        assert!(kg.node("b1").is_none());
        assert!(kg.nodes().all(|n| n.mentions.iter().all(|m| m.year < 2021)));
        assert!(kg.edges().iter().all(|e| e.year < 2021));
        assert_eq!(kg.stats().relations, 1);
    }

    #[test]
    fn clusters_answer_for_every_member() {
        let a = doc("a", 2019, vec![node("1", "named entity recognition", NodeType::Task, &["NER"])], vec![]);
        let kg = KnowledgeGraph::build([&a], None);
        let expect: BTreeSet<String> = ["ner", "named entity recognition"].iter().map(|s| s.to_string()).collect();
        assert_eq!(kg.coreference_cluster("NER"), expect);
        assert_eq!(kg.coreference_cluster("named entity recognition"), expect);
        assert_eq!(kg.coreference_cluster("Parsing "), BTreeSet::from(["parsing".to_string()]));
    }

    #[test]
    fn clusters_link_through_canonical_keys_across_documents() {
        let a = doc("a", 2019, vec![node("1", "named entity recognition", NodeType::Task, &["ner"])], vec![]);
        let b = doc("b", 2019, vec![node("1", "ner", NodeType::Task, &[]), node("2", "entity tagging", NodeType::Task, &[])], vec![]);
        let c = doc("c", 2019, vec![node("1", "entity tagging", NodeType::Task, &["ner"])], vec![]);
        let kg = KnowledgeGraph::build([&a, &b, &c], None);
        let cl = kg.coreference_cluster("named entity recognition");
        assert!(cl.contains("entity tagging") && cl.contains("ner"));
    }

    #[test]
    fn generic_mentions_do_not_chain_clusters() {
        let a = doc("a", 2019, vec![node("1", "elle framework", NodeType::Method, &["our approach"])], vec![]);
        let b = doc("b", 2019, vec![node("1", "bert encoder", NodeType::Method, &["our approach"])], vec![]);
        let kg = KnowledgeGraph::build([&a, &b], None);
        assert!(!kg.coreference_cluster("elle framework").contains("bert encoder"));
        let shared = kg.coreference_cluster("our approach");
        assert!(shared.contains("elle framework") && shared.contains("bert encoder"));
    }

    #[test]
    fn save_and_load_preserve_graph() {
        let a = doc("a", 2019, vec![node("1", "t", NodeType::Task, &["tt"]), node("2", "m", NodeType::Method, &[])], vec![edge("2", "1"), edge("2", "1")]);
        let kg = KnowledgeGraph::build([&a], Some(2021));
        let dir = tempfile::tempdir().unwrap();
        kg.save(dir.path()).unwrap();
        let back = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(back, kg);
        assert_eq!(back.stats().relations, 2);
    }

    fn inst(seed: &str, target: &str, year: i32) -> TaskInstance {
        TaskInstance {
            instance_id: format!("{seed}-{target}"),
            task: TaskKind::Node,
            seed: seed.into(),
            target_type: NodeType::Task,
            direction: Direction::Forward,
            background: String::new(),
            background_sentences: vec![],
            background_terms: vec![],
            target_node: target.into(),
            target_sentence: None,
            paper_id: "p".into(),
            year,
        }
    }

    #[test]
    fn entity_bank_normalizes_and_unions() {
        let splits = Splits { train: vec![inst("a", "a", 2019)], valid: vec![], test: vec![inst("A ", "A ", 2022)] };
        let bank = entity_bank(&splits);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.provenance().len(), 2);

        let splits = Splits {
            train: vec![inst("s1", "t1", 2019)],
            valid: vec![inst("s2", "t2", 2021)],
            test: vec![inst("s3", "t3", 2022)],
        };
        assert_eq!(entity_bank(&splits).len(), 6);
    }
}
