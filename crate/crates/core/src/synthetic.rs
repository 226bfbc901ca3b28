//! Deterministic toy corpus with the full annotation payload: sentence
//! labels, typed mentions, used-for and other relations, coreference,
//! abbreviations and citations.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    Abbreviation, Annotations, EntityAnnotation, Mention, NodeType, PaperRecord, RelationAnnotation, RelationType, Sentence,
    SentenceLabel,
};

const TASKS: &[(&str, Option<&str>)] = &[
    ("named entity recognition", Some("ner")),
    ("machine translation", Some("mt")),
    ("question answering", Some("qa")),
    ("text summarization", None),
    ("dependency parsing", None),
    ("sentiment analysis", None),
    ("knowledge acquisition", None),
    ("relation extraction", Some("re")),
    ("table reasoning", None),
    ("dialogue generation", None),
];

const METHODS: &[&str] = &[
    "graph neural network",
    "contrastive pre-training",
    "beam search decoding",
    "pointer network",
    "knowledge distillation",
    "function preserved model expansion",
    "hierarchy-aware logical form",
    "retrieval augmented generator",
    "conditional random field",
    "prompt tuning",
    "data augmentation",
    "symbolic reasoning",
];

const MATERIALS: &[&str] = &[
    "wikipedia dumps",
    "news corpus",
    "parallel corpora",
    "hierarchical tables",
    "dialogue logs",
    "scientific abstracts",
];

const METRICS: &[&str] = &["bleu", "rouge", "f1 score", "exact match", "accuracy"];

const PROBLEMS: &[&str] = &[
    "is costly to annotate",
    "suffers from noisy supervision",
    "remains brittle under domain shift",
    "ignores long-range structure",
    "requires large labeled datasets",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub papers: usize,
    pub first_year: i32,
    pub last_year: i32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { papers: 30, first_year: 2018, last_year: 2022, seed: 17 }
    }
}

struct Builder {
    sentences: Vec<Sentence>,
    entities: Vec<EntityAnnotation>,
    relations: Vec<RelationAnnotation>,
}

impl Builder {
    fn sentence(&mut self, label: SentenceLabel, parts: &[&str]) -> usize {
        self.sentences.push(Sentence { text: parts.join(" "), label });
        self.sentences.len() - 1
    }

    /// Declares an entity for the first occurrence of `text` in sentence `s`.
    fn mention(&mut self, s: usize, text: &str, ty: NodeType) -> String {
        let toks: Vec<&str> = self.sentences[s].text.split_whitespace().collect();
        let needle: Vec<&str> = text.split_whitespace().collect();
        let start = toks
            .windows(needle.len())
            .position(|w| w == needle.as_slice())
            .unwrap_or_else(|| panic!("`{text}` not in sentence `{}`", self.sentences[s].text));
        let id = format!("e{}", self.entities.len() + 1);
        self.entities.push(EntityAnnotation {
            id: id.clone(),
            node_type: ty,
            mentions: vec![Mention { sentence: s, start, end: start + needle.len(), text: text.to_string() }],
        });
        id
    }

    fn relation(&mut self, head: &str, relation: RelationType, tail: &str, sentence: usize) {
        self.relations.push(RelationAnnotation { head: head.into(), relation, tail: tail.into(), sentence });
    }
}

fn paper(i: usize, year: i32, citations: Vec<String>, rng: &mut ChaCha8Rng) -> PaperRecord {
    let &(task, short) = TASKS.choose(rng).unwrap();
    let mut methods: Vec<&str> = METHODS.to_vec();
    methods.shuffle(rng);
    let (method, prior) = (methods[0], methods[1]);
    let material = *MATERIALS.choose(rng).unwrap();
    let metric = *METRICS.choose(rng).unwrap();
    let problem = *PROBLEMS.choose(rng).unwrap();
    let mut b = Builder { sentences: Vec::new(), entities: Vec::new(), relations: Vec::new() };

    let task_surface = short.unwrap_or(task);
    let s0 = b.sentence(SentenceLabel::Background, &["current work on", task_surface, problem, "."]);
    let bg_task = b.mention(s0, task_surface, NodeType::Task);
    let s1 = b.sentence(SentenceLabel::Background, &["existing", prior, "models rely on", material, "."]);
    let bg_prior = b.mention(s1, prior, NodeType::Method);
    let bg_material = b.mention(s1, material, NodeType::Material);
    b.relation(&bg_material, RelationType::UsedFor, &bg_prior, s1);

    let s2 = b.sentence(SentenceLabel::Method, &["we propose", method, "for", task, "."]);
    let m = b.mention(s2, method, NodeType::Method);
    let t = b.mention(s2, task, NodeType::Task);
    b.relation(&m, RelationType::UsedFor, &t, s2);

    let s3 = b.sentence(SentenceLabel::Method, &["our approach is trained on", material, "."]);
    let ours = b.mention(s3, "our approach", NodeType::Generic);
    let mat = b.mention(s3, material, NodeType::Material);
    b.relation(&mat, RelationType::UsedFor, &ours, s3);

    let s4 = b.sentence(SentenceLabel::Result, &["experiments show gains in", metric, "over", prior, "."]);
    let met = b.mention(s4, metric, NodeType::Metric);
    let pr = b.mention(s4, prior, NodeType::Method);
    b.relation(&met, RelationType::EvaluateFor, &pr, s4);

    let mut coreference = vec![vec![m.clone(), ours], vec![bg_prior, pr]];
    if short.is_some() {
        coreference.push(vec![bg_task, t]);
    }
    let abbreviations = short
        .map(|s| vec![Abbreviation { short: s.into(), long: task.into() }])
        .unwrap_or_default();
    let title = format!("{} for {}", capitalize(method), task);
    let abstract_text = b.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
    PaperRecord {
        paper_id: format!("syn{i:03}"),
        title,
        abstract_text,
        year,
        sentences: b.sentences,
        citations,
        annotations: Annotations { entities: b.entities, relations: b.relations, coreference, abbreviations },
        language: Some("en".into()),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Papers spread evenly over the year range. Each cites up to three
/// earlier-or-same-year papers plus, sometimes, an id outside the corpus.
pub fn synthetic_corpus(config: &SyntheticConfig) -> Vec<PaperRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let span = (config.last_year - config.first_year + 1).max(1) as usize;
    let years: Vec<i32> = (0..config.papers).map(|i| config.first_year + (i % span) as i32).collect();
    (0..config.papers)
        .map(|i| {
            let older: Vec<usize> = (0..config.papers).filter(|&j| j != i && years[j] <= years[i]).collect();
            let k = rng.random_range(0..=3usize).min(older.len());
            let mut citations: Vec<String> = older.choose_multiple(&mut rng, k).map(|j| format!("syn{j:03}")).collect();
            if rng.random_bool(0.2) {
                citations.push(format!("external{i:03}"));
            }
            citations.sort();
            paper(i, years[i], citations, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_document_graph, extract_instances, TaskKind};

    #[test]
    fn deterministic_and_valid() {
        let a = synthetic_corpus(&SyntheticConfig::default());
        let b = synthetic_corpus(&SyntheticConfig::default());
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for r in &a {
            r.validate().unwrap();
            let g = build_document_graph(r).unwrap();
            assert_eq!(extract_instances(&g, TaskKind::Node).len(), 4, "{}", r.paper_id);
            assert!(!g.background.is_empty());
        }
        let years: std::collections::BTreeSet<i32> = a.iter().map(|r| r.year).collect();
        assert_eq!(years.into_iter().collect::<Vec<_>>(), vec![2018, 2019, 2020, 2021, 2022]);
    }
}
