//! Corpus ingestion, per-document graphs, task instances and temporal splits.
//!
//! The on-disk corpus is newline-delimited JSON, one paper per line. The
//! field-by-field layout is documented in `docs/corpus-format.md`. IE output
//! (entities, relations, coreference clusters, abbreviation pairs and sentence
//! labels) is produced by external tools and only ingested here.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rhetorical label assigned to an abstract sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SentenceLabel {
    Background,
    Method,
    Objective,
    Other,
    Result,
}

impl SentenceLabel {
    /// Background and Other sentences form the background context.
    pub fn is_background(self) -> bool {
        matches!(self, SentenceLabel::Background | SentenceLabel::Other)
    }
}

/// The six entity types of the SciIE schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NodeType {
    Task,
    Method,
    Metric,
    Material,
    OtherScientificTerm,
    Generic,
}

impl NodeType {
    pub const ALL: [NodeType; 6] = [
        NodeType::Task,
        NodeType::Method,
        NodeType::Metric,
        NodeType::Material,
        NodeType::OtherScientificTerm,
        NodeType::Generic,
    ];

    /// Surface form used inside prompts and files.
    pub fn surface(self) -> &'static str {
        match self {
            NodeType::Task => "Task",
            NodeType::Method => "Method",
            NodeType::Metric => "Metric",
            NodeType::Material => "Material",
            NodeType::OtherScientificTerm => "OtherScientificTerm",
            NodeType::Generic => "Generic",
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl FromStr for NodeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match squash(s).as_str() {
            "task" => NodeType::Task,
            "method" => NodeType::Method,
            "metric" | "evaluationmetric" | "evaluationmetrics" => NodeType::Metric,
            "material" => NodeType::Material,
            "otherscientificterm" | "otherscientificterms" => NodeType::OtherScientificTerm,
            "generic" | "genericterm" | "genericterms" => NodeType::Generic,
            _ => return Err(Error::Validation(format!("unknown node type `{s}`"))),
        })
    }
}

impl TryFrom<String> for NodeType {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<NodeType> for String {
    fn from(value: NodeType) -> Self {
        value.surface().to_string()
    }
}

/// The seven relation types of the SciIE schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RelationType {
    UsedFor,
    FeatureOf,
    EvaluateFor,
    HyponymOf,
    PartOf,
    Compare,
    Conjunction,
}

impl RelationType {
    pub fn surface(self) -> &'static str {
        match self {
            RelationType::UsedFor => "Used-for",
            RelationType::FeatureOf => "Feature-of",
            RelationType::EvaluateFor => "Evaluate-for",
            RelationType::HyponymOf => "Hyponym-of",
            RelationType::PartOf => "Part-of",
            RelationType::Compare => "Compare",
            RelationType::Conjunction => "Conjunction",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

impl FromStr for RelationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match squash(s).as_str() {
            "usedfor" => RelationType::UsedFor,
            "featureof" => RelationType::FeatureOf,
            "evaluatefor" => RelationType::EvaluateFor,
            "hyponymof" => RelationType::HyponymOf,
            "partof" => RelationType::PartOf,
            "compare" => RelationType::Compare,
            "conjunction" => RelationType::Conjunction,
            _ => return Err(Error::Validation(format!("unknown relation type `{s}`"))),
        })
    }
}

impl TryFrom<String> for RelationType {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<RelationType> for String {
    fn from(value: RelationType) -> Self {
        value.surface().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub label: SentenceLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: NodeType,
    pub mentions: Vec<Mention>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    pub sentence: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abbreviation {
    pub short: String,
    pub long: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default)]
    pub entities: Vec<EntityAnnotation>,
    #[serde(default)]
    pub relations: Vec<RelationAnnotation>,
    /// Each cluster lists entity ids that corefer.
    #[serde(default)]
    pub coreference: Vec<Vec<String>>,
    #[serde(default)]
    pub abbreviations: Vec<Abbreviation>,
}

/// One paper with its abstract sentences and externally produced IE payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    pub year: i32,
    #[serde(default)]
    pub sentences: Vec<Sentence>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default)]
    pub annotations: Annotations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl PaperRecord {
    /// Checks every record-level invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Integrity(format!("paper `{}`: {msg}", self.paper_id)));
        if self.paper_id.trim().is_empty() {
            return Err(Error::Integrity("empty paper_id".into()));
        }
        if self.year <= 1900 {
            return fail(format!("year {} is not after 1900", self.year));
        }
        let n = self.sentences.len();
        let mut ids = HashSet::new();
        for entity in &self.annotations.entities {
            if !ids.insert(entity.id.as_str()) {
                return fail(format!("duplicate entity id `{}`", entity.id));
            }
            if entity.mentions.is_empty() {
                return fail(format!("entity `{}` has no mentions", entity.id));
            }
            for m in &entity.mentions {
                if m.sentence >= n {
                    return fail(format!(
                        "entity `{}` mention sentence index {} out of range ({n} sentences)",
                        entity.id, m.sentence
                    ));
                }
                if m.start > m.end {
                    return fail(format!("entity `{}` has an inverted span", entity.id));
                }
                if m.text.trim().is_empty() {
                    return fail(format!("entity `{}` has an empty mention", entity.id));
                }
            }
        }
        for rel in &self.annotations.relations {
            for end in [&rel.head, &rel.tail] {
                if !ids.contains(end.as_str()) {
                    return fail(format!("relation references undeclared entity `{end}`"));
                }
            }
            if rel.head == rel.tail {
                return fail(format!("relation on `{}` is a self loop", rel.head));
            }
            if rel.sentence >= n {
                return fail(format!("relation sentence index {} out of range", rel.sentence));
            }
        }
        Ok(())
    }
}

/// Identifier of the supported corpus schemas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CorpusFormat {
    /// `clbd-jsonl-v1`: one JSON `PaperRecord` per line.
    #[default]
    JsonLines,
}

impl FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clbd-jsonl-v1" | "jsonl" => Ok(CorpusFormat::JsonLines),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Reads and validates a corpus file.
pub fn ingest_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<PaperRecord>> {
    let file = File::open(path.as_ref())?;
    match format {
        CorpusFormat::JsonLines => read_corpus(BufReader::new(file)),
    }
}

/// Parses newline-delimited records from any reader. Blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<PaperRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PaperRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| match e {
            Error::Integrity(msg) => Error::Integrity(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        if !seen.insert(record.paper_id.clone()) {
            return Err(Error::Integrity(format!(
                "line {line_no}: duplicate paper_id `{}`",
                record.paper_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus<W: Write>(mut writer: W, records: &[PaperRecord]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityNode {
    pub node_id: String,
    pub mentions: Vec<Mention>,
    pub node_type: NodeType,
    pub canonical_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationEdge {
    pub head: String,
    pub relation: RelationType,
    pub tail: String,
    pub sentence_index: usize,
}

/// A paper's coreference-merged entity graph plus the text it was read from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentGraph {
    pub paper_id: String,
    pub title: String,
    pub year: i32,
    pub sentences: Vec<Sentence>,
    pub citations: Vec<String>,
    pub abbreviations: Vec<Abbreviation>,
    /// Sorted by `node_id`.
    pub nodes: Vec<EntityNode>,
    pub edges: Vec<RelationEdge>,
    /// Background/Other sentences in document order.
    pub background: Vec<String>,
}

impl DocumentGraph {
    pub fn node(&self, node_id: &str) -> Option<&EntityNode> {
        self.nodes
            .binary_search_by(|n| n.node_id.as_str().cmp(node_id))
            .ok()
            .map(|i| &self.nodes[i])
    }

    /// Background context `B`: background sentences joined by single spaces.
    pub fn background_text(&self) -> String {
        self.background.join(" ")
    }

    /// Canonical texts of entity mentions located in background sentences,
    /// in document order.
    pub fn background_terms(&self) -> Vec<String> {
        let mut terms: Vec<(usize, usize, String)> = Vec::new();
        for node in &self.nodes {
            for m in &node.mentions {
                if self.sentences[m.sentence].label.is_background() {
                    terms.push((m.sentence, m.start, expand_abbreviations(&m.text, &self.abbreviations)));
                }
            }
        }
        terms.sort();
        terms.into_iter().map(|(_, _, t)| t).collect()
    }

    /// Surface forms (expanded) of every mention of a node.
    pub fn mention_forms(&self, node: &EntityNode) -> BTreeSet<String> {
        node.mentions
            .iter()
            .map(|m| expand_abbreviations(&m.text, &self.abbreviations))
            .collect()
    }

    /// Re-expresses the merged graph as a record with no coreference clusters.
    pub fn to_record(&self) -> PaperRecord {
        PaperRecord {
            paper_id: self.paper_id.clone(),
            title: self.title.clone(),
            abstract_text: self
                .sentences
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" "),
            year: self.year,
            sentences: self.sentences.clone(),
            citations: self.citations.clone(),
            annotations: Annotations {
                entities: self
                    .nodes
                    .iter()
                    .map(|n| EntityAnnotation {
                        id: n.node_id.clone(),
                        node_type: n.node_type,
                        mentions: n.mentions.clone(),
                    })
                    .collect(),
                relations: self
                    .edges
                    .iter()
                    .map(|e| RelationAnnotation {
                        head: e.head.clone(),
                        relation: e.relation,
                        tail: e.tail.clone(),
                        sentence: e.sentence_index,
                    })
                    .collect(),
                coreference: Vec::new(),
                abbreviations: self.abbreviations.clone(),
            },
            language: None,
        }
    }
}

/// Replaces whole-word abbreviation short forms with their long forms.
/// Surrounding punctuation on a token is kept; matching is case-insensitive.
pub fn expand_abbreviations(text: &str, abbreviations: &[Abbreviation]) -> String {
    if abbreviations.is_empty() {
        return text.to_string();
    }
    let table: HashMap<String, &str> = abbreviations
        .iter()
        .map(|a| (a.short.to_lowercase(), a.long.as_str()))
        .collect();
    text.split_whitespace()
        .map(|token| {
            let core_start = token
                .char_indices()
                .find(|(_, c)| !c.is_ascii_punctuation())
                .map(|(i, _)| i);
            let Some(start) = core_start else {
                return token.to_string();
            };
            let end = token
                .char_indices()
                .rev()
                .find(|(_, c)| !c.is_ascii_punctuation())
                .map(|(i, c)| i + c.len_utf8())
                .unwrap_or(token.len());
            let core = &token[start..end];
            match table.get(&core.to_lowercase()) {
                Some(long) => format!("{}{}{}", &token[..start], long, &token[end..]),
                None => token.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Collapses coreference clusters, expands abbreviations and selects the
/// background sentences of one record.
pub fn build_document_graph(record: &PaperRecord) -> Result<DocumentGraph> {
    record.validate()?;
    let entities = &record.annotations.entities;
    let index: HashMap<&str, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();

    let mut uf = UnionFind::new(entities.len());
    for cluster in &record.annotations.coreference {
        let mut members = Vec::with_capacity(cluster.len());
        for id in cluster {
            let Some(&i) = index.get(id.as_str()) else {
                return Err(Error::Integrity(format!(
                    "paper `{}`: coreference cluster references unknown entity `{id}`",
                    record.paper_id
                )));
            };
            members.push(i);
        }
        for pair in members.windows(2) {
            uf.union(pair[0], pair[1]);
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..entities.len() {
        let root = uf.find(i);
        groups.entry(root).or_default().push(i);
    }

    let abbreviations = &record.annotations.abbreviations;
    let mut id_map: HashMap<&str, String> = HashMap::new();
    let mut nodes = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let node_id = members
            .iter()
            .map(|&i| entities[i].id.as_str())
            .min()
            .expect("non-empty group")
            .to_string();
        let mut mentions: Vec<Mention> = Vec::new();
        // (raw length, expanded form, node type) of the longest mention.
        let mut best: Option<(usize, String, NodeType)> = None;
        for &i in members {
            let entity = &entities[i];
            id_map.insert(entity.id.as_str(), node_id.clone());
            for m in &entity.mentions {
                mentions.push(m.clone());
                let len = m.text.trim().chars().count();
                let expanded = expand_abbreviations(m.text.trim(), abbreviations);
                let better = match &best {
                    None => true,
                    Some((best_len, best_text, _)) => {
                        len > *best_len || (len == *best_len && expanded < *best_text)
                    }
                };
                if better {
                    best = Some((len, expanded, entity.node_type));
                }
            }
        }
        mentions.sort();
        mentions.dedup();
        let (_, canonical_text, node_type) = best.expect("entities have mentions");
        nodes.push(EntityNode {
            node_id,
            mentions,
            node_type,
            canonical_text,
        });
    }
    nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));

    let edges = record
        .annotations
        .relations
        .iter()
        .filter_map(|r| {
            let head = id_map[r.head.as_str()].clone();
            let tail = id_map[r.tail.as_str()].clone();
            (head != tail).then_some(RelationEdge {
                head,
                relation: r.relation,
                tail,
                sentence_index: r.sentence,
            })
        })
        .collect();

    let background = record
        .sentences
        .iter()
        .filter(|s| s.label.is_background())
        .map(|s| s.text.clone())
        .collect();

    Ok(DocumentGraph {
        paper_id: record.paper_id.clone(),
        title: record.title.clone(),
        year: record.year,
        sentences: record.sentences.clone(),
        citations: record.citations.clone(),
        abbreviations: abbreviations.clone(),
        nodes,
        edges,
        background,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `[seed used-for ?]`: predict the tail.
    Forward,
    /// `[? used-for seed]`: predict the head.
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::Validation(format!("unknown direction `{other}`"))),
        }
    }
}

/// Which of the two task formulations an instance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sentence,
    Node,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Sentence => "sentence",
            TaskKind::Node => "node",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sentence" => Ok(TaskKind::Sentence),
            "node" => Ok(TaskKind::Node),
            other => Err(Error::Validation(format!("unknown task `{other}`"))),
        }
    }
}

/// A single hypothesis-generation instance.
///
/// `target_node` is populated for both task variants because the semantic
/// index pairs every training input with its target entity; only the
/// sentence variant carries `target_sentence`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: String,
    pub task: TaskKind,
    pub seed: String,
    pub target_type: NodeType,
    pub direction: Direction,
    pub background: String,
    #[serde(default)]
    pub background_sentences: Vec<String>,
    /// Entity mentions located in background sentences.
    #[serde(default)]
    pub background_terms: Vec<String>,
    pub target_node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_sentence: Option<String>,
    pub paper_id: String,
    pub year: i32,
}

impl TaskInstance {
    /// The gold output: the sentence for sentence generation, the node otherwise.
    pub fn gold(&self) -> &str {
        match self.task {
            TaskKind::Sentence => self.target_sentence.as_deref().unwrap_or(&self.target_node),
            TaskKind::Node => &self.target_node,
        }
    }
}

/// Produces a forward and a backward instance for every Used-for edge whose
/// context sentence is not part of the background.
pub fn extract_instances(graph: &DocumentGraph, task: TaskKind) -> Vec<TaskInstance> {
    let background = graph.background_text();
    let background_terms = graph.background_terms();
    let mut out = Vec::new();
    for (edge_idx, edge) in graph.edges.iter().enumerate() {
        if edge.relation != RelationType::UsedFor {
            continue;
        }
        let sentence = &graph.sentences[edge.sentence_index];
        if sentence.label.is_background() {
            continue;
        }
        let (Some(head), Some(tail)) = (graph.node(&edge.head), graph.node(&edge.tail)) else {
            continue;
        };
        for (direction, seed, target) in [
            (Direction::Forward, head, tail),
            (Direction::Backward, tail, head),
        ] {
            let tag = match direction {
                Direction::Forward => "fw",
                Direction::Backward => "bw",
            };
            out.push(TaskInstance {
                instance_id: format!("{}:{edge_idx}:{tag}", graph.paper_id),
                task,
                seed: seed.canonical_text.clone(),
                target_type: target.node_type,
                direction,
                background: background.clone(),
                background_sentences: graph.background.clone(),
                background_terms: background_terms.clone(),
                target_node: target.canonical_text.clone(),
                target_sentence: match task {
                    TaskKind::Sentence => Some(sentence.text.clone()),
                    TaskKind::Node => None,
                },
                paper_id: graph.paper_id.clone(),
                year: graph.year,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Year boundaries of the temporal split: `year < valid_from` is train,
/// `valid_from <= year < test_from` is valid, the rest is test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitYears {
    pub valid_from: i32,
    pub test_from: i32,
}

impl Default for SplitYears {
    fn default() -> Self {
        Self {
            valid_from: 2021,
            test_from: 2022,
        }
    }
}

impl SplitYears {
    pub fn split_of(&self, year: i32) -> Split {
        if year < self.valid_from {
            Split::Train
        } else if year < self.test_from {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<TaskInstance>,
    pub valid: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[TaskInstance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &TaskInstance> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |xs: &[TaskInstance]| SplitIds {
            paper_ids: xs
                .iter()
                .map(|i| i.paper_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            instance_ids: xs.iter().map(|i| i.instance_id.clone()).collect(),
        };
        SplitManifest {
            train: ids(&self.train),
            valid: ids(&self.valid),
            test: ids(&self.test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub paper_ids: Vec<String>,
    pub instance_ids: Vec<String>,
}

/// The three id lists written next to the instance files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: SplitIds,
    pub valid: SplitIds,
    pub test: SplitIds,
}

pub fn temporal_split(instances: Vec<TaskInstance>, years: SplitYears) -> Splits {
    let mut splits = Splits::default();
    for inst in instances {
        match years.split_of(inst.year) {
            Split::Train => splits.train.push(inst),
            Split::Valid => splits.valid.push(inst),
            Split::Test => splits.test.push(inst),
        }
    }
    splits
}
