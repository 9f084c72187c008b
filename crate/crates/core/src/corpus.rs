//! Annotated document corpora in the DocRED JSON layout.
//!
//! A corpus file is a JSON list of documents with `title`, `sents`,
//! `vertexSet` and `labels`. Mention `pos` spans are half-open word indices
//! inside the sentence named by `sent_id`. Relation ids are resolved against
//! a separate catalog file mapping each id to its name and description.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub entity_index: usize,
    pub sentence_index: usize,
    /// Half-open word interval within the sentence.
    pub token_span: (usize, usize),
    pub surface: String,
    pub mention_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub mentions: Vec<Mention>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub id: String,
    pub name: String,
    pub description: String,
}

impl RelationType {
    /// Text fed to the relation encoder: `"name: description"`.
    pub fn encoder_text(&self) -> String {
        if self.description.is_empty() {
            self.name.clone()
        } else {
            format!("{}: {}", self.name, self.description)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    #[serde(rename = "h")]
    pub head: usize,
    #[serde(rename = "t")]
    pub tail: usize,
    #[serde(rename = "r")]
    pub relation: String,
}

impl Triple {
    pub fn new(head: usize, relation: impl Into<String>, tail: usize) -> Self {
        Self {
            head,
            tail,
            relation: relation.into(),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    /// Duplicate-free, in first-occurrence order.
    pub triples: Vec<Triple>,
}

impl Document {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Global word offset of each sentence.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        offsets
    }

    /// Relation ids present in this document.
    pub fn relation_ids(&self) -> BTreeSet<&str> {
        self.triples.iter().map(|t| t.relation.as_str()).collect()
    }

    fn validate(&self, catalog: &BTreeMap<String, RelationType>) -> Result<()> {
        let ctx = |msg: String| Error::Invariant(format!("document {}: {msg}", self.doc_id));
        for (ei, entity) in self.entities.iter().enumerate() {
            if entity.mentions.is_empty() {
                return Err(ctx(format!("entity {ei} has no mentions")));
            }
            for (mi, m) in entity.mentions.iter().enumerate() {
                if m.entity_index != ei {
                    return Err(ctx(format!("mention {mi} of entity {ei} claims entity {}", m.entity_index)));
                }
                let sent = self.sentences.get(m.sentence_index).ok_or_else(|| {
                    ctx(format!("mention {mi} of entity {ei} refers to missing sentence {}", m.sentence_index))
                })?;
                let (start, end) = m.token_span;
                if start >= end || end > sent.len() {
                    return Err(ctx(format!(
                        "mention {mi} of entity {ei} has span [{start}, {end}) outside sentence {} of length {}",
                        m.sentence_index,
                        sent.len()
                    )));
                }
            }
        }
        let n = self.entities.len();
        for t in &self.triples {
            if t.head >= n || t.tail >= n {
                return Err(ctx(format!("triple {t} refers to an entity outside 0..{n}")));
            }
            if t.head == t.tail {
                return Err(ctx(format!("triple {t} has identical head and tail")));
            }
            if !catalog.contains_key(&t.relation) {
                return Err(ctx(format!("triple {t} uses unknown relation id {}", t.relation)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub relation_catalog: BTreeMap<String, RelationType>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    DocredJson,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub documents: usize,
    pub triples: usize,
    pub duplicate_triples: usize,
}

// Raw serde layout of a DocRED document.
#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default)]
    labels: Vec<Triple>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMention {
    name: String,
    sent_id: usize,
    pos: (usize, usize),
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    mention_type: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRelation {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    allow_empty_description: bool,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Two-stage decode: syntax errors become [`Error::Parse`], shape errors
/// become [`Error::Schema`] naming the offending JSON path.
pub(crate) fn decode_json<T: DeserializeOwned>(context: &str, text: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::json_parse(context, text, &e))?;
    serde_path_to_error::deserialize(value).map_err(|e| Error::Schema {
        context: context.to_string(),
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses a relation catalog: `{ "P17": {"name": ..., "description": ...}, ... }`.
pub fn parse_catalog(text: &str) -> Result<BTreeMap<String, RelationType>> {
    let raw: BTreeMap<String, RawRelation> = decode_json("relation catalog", text)?;
    raw.into_iter()
        .map(|(id, r)| {
            if r.name.trim().is_empty() {
                return Err(Error::Invariant(format!("relation {id} has an empty name")));
            }
            if r.description.trim().is_empty() && !r.allow_empty_description {
                return Err(Error::Invariant(format!(
                    "relation {id} has an empty description (set allow_empty_description to permit it)"
                )));
            }
            let rel = RelationType {
                id: id.clone(),
                name: r.name,
                description: r.description,
            };
            Ok((id, rel))
        })
        .collect()
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<BTreeMap<String, RelationType>> {
    parse_catalog(&read_text(path.as_ref())?)
}

pub fn catalog_to_json(catalog: &BTreeMap<String, RelationType>) -> String {
    let raw: BTreeMap<&str, RawRelation> = catalog
        .values()
        .map(|r| {
            (
                r.id.as_str(),
                RawRelation {
                    name: r.name.clone(),
                    description: r.description.clone(),
                    allow_empty_description: r.description.is_empty(),
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("catalog serializes")
}

impl Corpus {
    /// Assembles a corpus, checking every document invariant.
    pub fn new(documents: Vec<Document>, relation_catalog: BTreeMap<String, RelationType>) -> Result<Self> {
        let mut index = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            doc.validate(&relation_catalog)?;
            let mut seen = HashSet::new();
            if let Some(dup) = doc.triples.iter().find(|t| !seen.insert(*t)) {
                return Err(Error::Invariant(format!("document {}: duplicate triple {dup}", doc.doc_id)));
            }
            if index.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::Invariant(format!("duplicate document id {}", doc.doc_id)));
            }
        }
        Ok(Self {
            documents,
            relation_catalog,
            index,
        })
    }

    pub fn load(
        path: impl AsRef<Path>,
        format: CorpusFormat,
        catalog: BTreeMap<String, RelationType>,
    ) -> Result<(Self, LoadSummary)> {
        let path = path.as_ref();
        let text = read_text(path)?;
        match format {
            CorpusFormat::DocredJson => Self::from_docred_json(&text, catalog, &path.display().to_string()),
        }
    }

    pub fn from_docred_json(
        text: &str,
        catalog: BTreeMap<String, RelationType>,
        context: &str,
    ) -> Result<(Self, LoadSummary)> {
        let raw: Vec<RawDocument> = decode_json(context, text)?;
        let mut summary = LoadSummary::default();
        let mut title_counts: HashMap<String, usize> = HashMap::new();
        let mut documents = Vec::with_capacity(raw.len());
        for rd in raw {
            let count = title_counts.entry(rd.title.clone()).or_default();
            let doc_id = if *count == 0 {
                rd.title.clone()
            } else {
                format!("{}#{}", rd.title, count)
            };
            *count += 1;
            let entities = rd
                .vertex_set
                .into_iter()
                .enumerate()
                .map(|(ei, ms)| Entity {
                    mentions: ms
                        .into_iter()
                        .map(|m| Mention {
                            entity_index: ei,
                            sentence_index: m.sent_id,
                            token_span: m.pos,
                            surface: m.name,
                            mention_type: m.mention_type,
                        })
                        .collect(),
                })
                .collect();
            let mut seen = HashSet::new();
            let mut triples = Vec::with_capacity(rd.labels.len());
            for t in rd.labels {
                if seen.insert(t.clone()) {
                    triples.push(t);
                } else {
                    summary.duplicate_triples += 1;
                }
            }
            summary.triples += triples.len();
            documents.push(Document {
                doc_id,
                title: rd.title,
                sentences: rd.sents,
                entities,
                triples,
            });
        }
        summary.documents = documents.len();
        if summary.duplicate_triples > 0 {
            log::info!("{context}: dropped {} duplicate triples", summary.duplicate_triples);
        }
        Ok((Self::new(documents, catalog)?, summary))
    }

    pub fn to_docred_json(&self) -> String {
        let raw: Vec<RawDocument> = self
            .documents
            .iter()
            .map(|d| RawDocument {
                title: d.title.clone(),
                sents: d.sentences.clone(),
                vertex_set: d
                    .entities
                    .iter()
                    .map(|e| {
                        e.mentions
                            .iter()
                            .map(|m| RawMention {
                                name: m.surface.clone(),
                                sent_id: m.sentence_index,
                                pos: m.token_span,
                                mention_type: m.mention_type.clone(),
                            })
                            .collect()
                    })
                    .collect(),
                labels: d.triples.clone(),
            })
            .collect();
        serde_json::to_string(&raw).expect("corpus serializes")
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document> {
        self.index
            .get(doc_id)
            .map(|&i| &self.documents[i])
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    pub fn relation(&self, id: &str) -> Result<&RelationType> {
        self.relation_catalog
            .get(id)
            .ok_or_else(|| Error::Invariant(format!("unknown relation id {id}")))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Which relation pool an episode draws its targets from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSplit {
    Train,
    Dev,
    TestIn,
    /// All relations of a separate cross-domain corpus.
    TestCross,
}

impl SourceSplit {
    pub fn name(self) -> &'static str {
        match self {
            SourceSplit::Train => "train",
            SourceSplit::Dev => "dev",
            SourceSplit::TestIn => "test_in",
            SourceSplit::TestCross => "test_cross",
        }
    }
}

impl std::str::FromStr for SourceSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test_in" => Ok(Self::TestIn),
            "test_cross" => Ok(Self::TestCross),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

/// Disjoint relation-type pools for meta-training, development and testing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RelationSplit {
    train_ids: BTreeSet<String>,
    dev_ids: BTreeSet<String>,
    test_ids: BTreeSet<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    train: Vec<String>,
    dev: Vec<String>,
    test: Vec<String>,
}

impl RelationSplit {
    pub fn new<I, S>(train: I, dev: I, test: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let train: BTreeSet<String> = train.into_iter().map(Into::into).collect();
        let dev: BTreeSet<String> = dev.into_iter().map(Into::into).collect();
        let test: BTreeSet<String> = test.into_iter().map(Into::into).collect();
        for (a, an, b, bn) in [
            (&train, "train", &dev, "dev"),
            (&train, "train", &test, "test"),
            (&dev, "dev", &test, "test"),
        ] {
            if let Some(id) = a.intersection(b).next() {
                return Err(Error::Invariant(format!("relation {id} appears in both {an} and {bn} splits")));
            }
        }
        Ok(Self {
            train_ids: train,
            dev_ids: dev,
            test_ids: test,
        })
    }

    /// The standard DocRED relation split (62 / 16 / 18 types).
    pub fn docred_standard() -> Self {
        Self::new(
            DOCRED_TRAIN.iter().copied(),
            DOCRED_DEV.iter().copied(),
            DOCRED_TEST.iter().copied(),
        )
        .expect("built-in split is disjoint")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawSplit = decode_json("relation split", text)?;
        Self::new(raw.train, raw.dev, raw.test)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "train": self.train_ids,
            "dev": self.dev_ids,
            "test": self.test_ids,
        })
        .to_string()
    }

    pub fn train_ids(&self) -> &BTreeSet<String> {
        &self.train_ids
    }

    pub fn dev_ids(&self) -> &BTreeSet<String> {
        &self.dev_ids
    }

    pub fn test_ids(&self) -> &BTreeSet<String> {
        &self.test_ids
    }

    /// Relation pool for a source split. Cross-domain episodes use every
    /// relation in the (separate) corpus catalog.
    pub fn pool(&self, source: SourceSplit, corpus: &Corpus) -> BTreeSet<String> {
        match source {
            SourceSplit::Train => self.train_ids.clone(),
            SourceSplit::Dev => self.dev_ids.clone(),
            SourceSplit::TestIn => self.test_ids.clone(),
            SourceSplit::TestCross => corpus.relation_catalog.keys().cloned().collect(),
        }
    }
}

pub fn relation_split_sizes(split: &RelationSplit) -> (usize, usize, usize) {
    (split.train_ids.len(), split.dev_ids.len(), split.test_ids.len())
}

const DOCRED_TRAIN: [&str; 62] = [
    "P131", "P577", "P175", "P569", "P570", "P527", "P161", "P264", "P19", "P54", "P40", "P30", "P69",
    "P400", "P26", "P607", "P22", "P159", "P178", "P170", "P1344", "P6", "P127", "P20", "P108", "P206",
    "P156", "P710", "P155", "P166", "P276", "P123", "P58", "P1412", "P449", "P800", "P706", "P37",
    "P162", "P580", "P241", "P937", "P31", "P585", "P403", "P749", "P36", "P205", "P172", "P576",
    "P1376", "P171", "P740", "P840", "P676", "P551", "P1336", "P1365", "P737", "P190", "P1198", "P807",
];

const DOCRED_DEV: [&str; 16] = [
    "P27", "P150", "P571", "P50", "P1441", "P57", "P179", "P136", "P112", "P137", "P355", "P176",
    "P86", "P488", "P1056", "P1366",
];

const DOCRED_TEST: [&str; 18] = [
    "P17", "P495", "P361", "P3373", "P463", "P102", "P1001", "P140", "P674", "P194", "P118", "P35",
    "P272", "P279", "P364", "P582", "P25", "P39",
];

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn catalog() -> BTreeMap<String, RelationType> {
        parse_catalog(
            r#"{"P17": {"name": "country", "description": "sovereign state of this item"},
                "P131": {"name": "located in", "description": "administrative territory"}}"#,
        )
        .unwrap()
    }

    const MINIMAL: &str = r#"[{"title": "doc", "sents": [["Alice", "visited", "Paris"]],
        "vertexSet": [[{"name": "Alice", "sent_id": 0, "pos": [0, 1], "type": "PER"}],
                      [{"name": "Paris", "sent_id": 0, "pos": [2, 3], "type": "LOC"}]],
        "labels": [{"h": 0, "t": 1, "r": "P131", "evidence": [0]}]}]"#;

    #[test]
    fn loads_minimal_document() {
        let (corpus, summary) = Corpus::from_docred_json(MINIMAL, catalog(), "test").unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.documents[0].triples.len(), 1);
        assert_eq!(summary.duplicate_triples, 0);
        assert_eq!(corpus.documents[0].entities[1].mentions[0].mention_type.as_deref(), Some("LOC"));
    }

    #[test]
    fn out_of_range_head_names_document_and_triple() {
        let text = MINIMAL.replace(r#""h": 0"#, r#""h": 5"#);
        let err = Corpus::from_docred_json(&text, catalog(), "test").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Invariant(_)));
        assert!(msg.contains("document doc") && msg.contains("(5, P131, 1)"), "{msg}");
    }

    #[test]
    fn unknown_relation_and_bad_span_are_rejected() {
        let text = MINIMAL.replace("P131", "P999");
        assert!(Corpus::from_docred_json(&text, catalog(), "t").unwrap_err().to_string().contains("P999"));
        let text = MINIMAL.replace("[2, 3]", "[2, 4]");
        assert!(matches!(Corpus::from_docred_json(&text, catalog(), "t"), Err(Error::Invariant(_))));
        let text = MINIMAL.replace("[2, 3]", "[2, 2]");
        assert!(matches!(Corpus::from_docred_json(&text, catalog(), "t"), Err(Error::Invariant(_))));
    }

    #[test]
    fn entity_without_mentions_is_an_error() {
        let text = MINIMAL.replace(r#""vertexSet": ["#, r#""vertexSet": [[], "#);
        let err = Corpus::from_docred_json(&text, catalog(), "t").unwrap_err();
        assert!(err.to_string().contains("no mentions"), "{err}");
    }

    #[test]
    fn duplicate_triples_are_dropped_and_counted() {
        let text = MINIMAL.replace(
            r#""labels": [{"h": 0, "t": 1, "r": "P131", "evidence": [0]}]"#,
            r#""labels": [{"h": 0, "t": 1, "r": "P131", "evidence": [0]}, {"h": 0, "t": 1, "r": "P131", "evidence": []}]"#,
        );
        let (corpus, summary) = Corpus::from_docred_json(&text, catalog(), "t").unwrap();
        assert_eq!(summary.duplicate_triples, 1);
        assert_eq!(corpus.documents[0].triples.len(), 1);
    }

    #[test]
    fn malformed_json_is_a_parse_error_and_missing_field_names_path() {
        let err = Corpus::from_docred_json("[{\"title\": ", catalog(), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let text = MINIMAL.replace(r#""sents""#, r#""sentences""#);
        match Corpus::from_docred_json(&text, catalog(), "t").unwrap_err() {
            Error::Schema { path, message, .. } => {
                assert!(path.starts_with("[0]"), "{path}");
                assert!(message.contains("sents"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn round_trip_preserves_structure() {
        let (a, _) = Corpus::from_docred_json(MINIMAL, catalog(), "t").unwrap();
        let (b, _) = Corpus::from_docred_json(&a.to_docred_json(), catalog(), "t").unwrap();
        assert_eq!(a, b);
        let cat = parse_catalog(&catalog_to_json(&a.relation_catalog)).unwrap();
        assert_eq!(cat, a.relation_catalog);
    }

    #[test]
    fn duplicate_titles_get_distinct_ids() {
        let one = &MINIMAL[1..MINIMAL.len() - 1];
        let text = format!("[{one}, {one}]");
        let (c, _) = Corpus::from_docred_json(&text, catalog(), "t").unwrap();
        assert_eq!(c.documents[1].doc_id, "doc#1");
        assert!(c.document("doc#1").is_ok());
    }

    #[test]
    fn catalog_requires_description_unless_flagged() {
        assert!(parse_catalog(r#"{"X": {"name": "x", "description": ""}}"#).is_err());
        assert!(parse_catalog(r#"{"X": {"name": "", "description": "d"}}"#).is_err());
        let c = parse_catalog(r#"{"X": {"name": "x", "description": "", "allow_empty_description": true}}"#).unwrap();
        assert_eq!(c["X"].encoder_text(), "x");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        assert_eq!(relation_split_sizes(&RelationSplit::docred_standard()), (62, 16, 18));
        assert_eq!(relation_split_sizes(&RelationSplit::default()), (0, 0, 0));
        let err = RelationSplit::new(vec!["P1", "P2"], vec![], vec!["P2"]).unwrap_err();
        assert!(err.to_string().contains("P2"));
        let s = RelationSplit::docred_standard();
        assert_eq!(RelationSplit::parse(&s.to_json()).unwrap(), s);
    }
}
