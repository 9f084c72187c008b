//! N-Doc episodes: sampling, NOTA pair enumeration, statistics and the
//! JSON-lines episode file format.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, RelationSplit, SourceSplit, Triple};
use crate::{Error, Result};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

/// Maximum rejection-sampling attempts per episode.
pub const MAX_SAMPLING_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportDoc {
    pub doc_id: String,
    /// Complete triple set restricted to the episode's target relations.
    pub triples: Vec<Triple>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<SupportDoc>,
    pub query_doc_id: String,
    pub target_relations: Vec<String>,
    pub gold_query_triples: Vec<Triple>,
}

impl Episode {
    pub fn n_docs(&self) -> usize {
        self.support.len()
    }

    /// Support instance count per target relation.
    pub fn support_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> =
            self.target_relations.iter().map(|r| (r.as_str(), 0)).collect();
        for t in self.support.iter().flat_map(|s| &s.triples) {
            if let Some(c) = counts.get_mut(t.relation.as_str()) {
                *c += 1;
            }
        }
        counts
    }

    pub fn target_set(&self) -> BTreeSet<&str> {
        self.target_relations.iter().map(String::as_str).collect()
    }

    /// Checks every episode invariant against the corpus it refers to.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(format!("episode (query {}): {m}", self.query_doc_id)));
        if self.support.is_empty() {
            return fail("no support documents".into());
        }
        if self.target_relations.is_empty() {
            return fail("no target relations".into());
        }
        let targets = self.target_set();
        if targets.len() != self.target_relations.len() {
            return fail("duplicate target relations".into());
        }
        let mut ids = BTreeSet::new();
        ids.insert(self.query_doc_id.as_str());
        for s in &self.support {
            if !ids.insert(s.doc_id.as_str()) {
                return fail(format!("document {} used twice", s.doc_id));
            }
            let doc = corpus.document(&s.doc_id)?;
            for t in &s.triples {
                if !targets.contains(t.relation.as_str()) || !doc.triples.contains(t) {
                    return fail(format!("support triple {t} of {} is not a target triple of that document", s.doc_id));
                }
            }
            let expected = doc.triples.iter().filter(|t| targets.contains(t.relation.as_str())).count();
            if expected != s.triples.len() {
                return fail(format!("support triples of {} are incomplete", s.doc_id));
            }
        }
        if let Some((r, _)) = self.support_counts().into_iter().find(|(_, c)| *c == 0) {
            return fail(format!("target relation {r} has no support instance"));
        }
        let query = corpus.document(&self.query_doc_id)?;
        for t in &self.gold_query_triples {
            if !targets.contains(t.relation.as_str()) || !query.triples.contains(t) {
                return fail(format!("gold triple {t} is not a target triple of the query"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_docs: usize,
    pub seed: u64,
    pub max_target_relations: usize,
    pub source_split: SourceSplit,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_docs: 1,
            seed: 0,
            max_target_relations: usize::MAX,
            source_split: SourceSplit::Train,
        }
    }
}

/// Deterministic generator for draw `draw_index` under `seed`.
pub fn draw_rng(seed: u64, draw_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    rng
}

/// Samples episode number `draw_index` of the configured stream.
pub fn sample_training_episode(
    corpus: &Corpus,
    split: &RelationSplit,
    cfg: &EpisodeConfig,
    draw_index: u64,
) -> Result<Episode> {
    let pool = split.pool(cfg.source_split, corpus);
    let mut rng = draw_rng(cfg.seed, draw_index);
    sample_episode(corpus, &pool, cfg, &mut rng)
}

pub fn sample_episodes(
    corpus: &Corpus,
    split: &RelationSplit,
    cfg: &EpisodeConfig,
    count: usize,
) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| sample_training_episode(corpus, split, cfg, i))
        .collect()
}

/// Rejection sampler: uniform query, `n_docs` uniform distinct support
/// documents, targets = support relations within `pool`, capped by a
/// uniform subset.
pub fn sample_episode(
    corpus: &Corpus,
    pool: &BTreeSet<String>,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if cfg.n_docs == 0 {
        return Err(Error::InvalidArgument("n_docs must be at least 1".into()));
    }
    if !matches!(cfg.n_docs, 1 | 3) {
        log::warn!("n_docs = {} differs from the 1-Doc / 3-Doc settings", cfg.n_docs);
    }
    if corpus.len() < cfg.n_docs + 1 {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} documents, need at least {}",
            corpus.len(),
            cfg.n_docs + 1
        )));
    }
    if pool.is_empty() || cfg.max_target_relations == 0 {
        return Err(Error::Exhaustion { attempts: 0 });
    }
    let n = corpus.len();
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let query = rng.random_range(0..n);
        let support: Vec<usize> = sample(rng, n - 1, cfg.n_docs)
            .into_iter()
            .map(|i| if i >= query { i + 1 } else { i })
            .collect();
        let docs: Vec<&Document> = support.iter().map(|&i| &corpus.documents[i]).collect();
        let available: Vec<&str> = docs
            .iter()
            .flat_map(|d| d.relation_ids())
            .filter(|r| pool.contains(*r))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if available.is_empty() {
            continue;
        }
        let targets: BTreeSet<&str> = if available.len() > cfg.max_target_relations {
            sample(rng, available.len(), cfg.max_target_relations)
                .into_iter()
                .map(|i| available[i])
                .collect()
        } else {
            available.into_iter().collect()
        };
        let restrict = |d: &Document| -> Vec<Triple> {
            d.triples
                .iter()
                .filter(|t| targets.contains(t.relation.as_str()))
                .cloned()
                .collect()
        };
        let query_doc = &corpus.documents[query];
        return Ok(Episode {
            support: docs
                .iter()
                .map(|d| SupportDoc {
                    doc_id: d.doc_id.clone(),
                    triples: restrict(d),
                })
                .collect(),
            query_doc_id: query_doc.doc_id.clone(),
            target_relations: targets.iter().map(|s| s.to_string()).collect(),
            gold_query_triples: restrict(query_doc),
        });
    }
    Err(Error::Exhaustion {
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}

/// Ordered pairs holding at least one target relation.
pub fn positive_pairs<'a>(
    triples: impl IntoIterator<Item = &'a Triple>,
    targets: &BTreeSet<&str>,
) -> BTreeSet<(usize, usize)> {
    triples
        .into_iter()
        .filter(|t| targets.contains(t.relation.as_str()))
        .map(|t| (t.head, t.tail))
        .collect()
}

/// All ordered pairs `(h, t)`, `h ≠ t`, holding no target relation.
pub fn enumerate_nota_pairs(doc: &Document, targets: &BTreeSet<&str>) -> BTreeSet<(usize, usize)> {
    let positive = positive_pairs(&doc.triples, targets);
    ordered_pairs(doc.entity_count())
        .filter(|p| !positive.contains(p))
        .collect()
}

pub fn ordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |h| (0..n).filter(move |&t| t != h).map(move |t| (h, t)))
}

/// Fraction of ordered query pairs holding no target relation.
pub fn nota_rate(episode: &Episode, corpus: &Corpus) -> Result<f64> {
    let query = corpus.document(&episode.query_doc_id)?;
    let n = query.entity_count();
    if n < 2 {
        return Err(Error::UndefinedRate(episode.query_doc_id.clone()));
    }
    let total = n * (n - 1);
    let positive = positive_pairs(&episode.gold_query_triples, &episode.target_set()).len();
    Ok((total - positive) as f64 / total as f64)
}

/// `(average target relations per episode, average support instances per
/// target relation)`; the latter is averaged within each episode first.
pub fn episode_stats(episodes: &[Episode]) -> Result<(f64, f64)> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("episode_stats needs at least one episode"));
    }
    let n = episodes.len() as f64;
    let avg_n = episodes.iter().map(|e| e.target_relations.len() as f64).sum::<f64>() / n;
    let avg_k = episodes
        .iter()
        .map(|e| {
            let counts = e.support_counts();
            counts.values().sum::<usize>() as f64 / counts.len().max(1) as f64
        })
        .sum::<f64>()
        / n;
    Ok((avg_n, avg_k))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFileHeader {
    pub schema_version: u32,
    pub n_docs: usize,
    pub split_name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    support_doc_ids: Vec<String>,
    support_triples: Vec<Vec<Triple>>,
    query_doc_id: String,
    target_relation_ids: Vec<String>,
    gold_query_triples: Vec<Triple>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(e: &Episode) -> Self {
        Self {
            support_doc_ids: e.support.iter().map(|s| s.doc_id.clone()).collect(),
            support_triples: e.support.iter().map(|s| s.triples.clone()).collect(),
            query_doc_id: e.query_doc_id.clone(),
            target_relation_ids: e.target_relations.clone(),
            gold_query_triples: e.gold_query_triples.clone(),
        }
    }
}

pub fn episodes_to_jsonl(header: &EpisodeFileHeader, episodes: &[Episode]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for e in episodes {
        out.push_str(&serde_json::to_string(&EpisodeRecord::from(e)).expect("episode serializes"));
        out.push('\n');
    }
    out
}

pub fn write_episode_file(path: impl AsRef<Path>, header: &EpisodeFileHeader, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(episodes_to_jsonl(header, episodes).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_episode_jsonl(text: &str, context: &str) -> Result<(EpisodeFileHeader, Vec<Episode>)> {
    let mut offset = 0;
    let mut header: Option<EpisodeFileHeader> = None;
    let mut episodes = Vec::new();
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            context: context.to_string(),
            offset: start + e.column().saturating_sub(1),
            line: lineno + 1,
            column: e.column(),
            message: e.to_string(),
        };
        match &header {
            None => {
                let h: EpisodeFileHeader = serde_json::from_str(body).map_err(parse_err)?;
                if h.schema_version != EPISODE_SCHEMA_VERSION {
                    return Err(Error::VersionMismatch {
                        found: h.schema_version,
                        expected: EPISODE_SCHEMA_VERSION,
                    });
                }
                header = Some(h);
            }
            Some(_) => {
                let r: EpisodeRecord = serde_json::from_str(body).map_err(parse_err)?;
                if r.support_doc_ids.len() != r.support_triples.len() {
                    return Err(Error::Invariant(format!(
                        "{context} line {}: {} support documents but {} triple lists",
                        lineno + 1,
                        r.support_doc_ids.len(),
                        r.support_triples.len()
                    )));
                }
                episodes.push(Episode {
                    support: r
                        .support_doc_ids
                        .into_iter()
                        .zip(r.support_triples)
                        .map(|(doc_id, triples)| SupportDoc { doc_id, triples })
                        .collect(),
                    query_doc_id: r.query_doc_id,
                    target_relations: r.target_relation_ids,
                    gold_query_triples: r.gold_query_triples,
                });
            }
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        context: context.to_string(),
        offset: text.len(),
        line: 1,
        column: 0,
        message: "missing header line".into(),
    })?;
    Ok((header, episodes))
}

pub fn read_episode_file(path: impl AsRef<Path>) -> Result<(EpisodeFileHeader, Vec<Episode>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episode_jsonl(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Entity, Mention, RelationType};

    fn doc(id: &str, n_entities: usize, triples: Vec<Triple>) -> Document {
        let words: Vec<String> = (0..n_entities.max(1)).map(|i| format!("w{i}")).collect();
        Document {
            doc_id: id.into(),
            title: id.into(),
            sentences: vec![words],
            entities: (0..n_entities)
                .map(|i| Entity {
                    mentions: vec![Mention {
                        entity_index: i,
                        sentence_index: 0,
                        token_span: (i, i + 1),
                        surface: format!("w{i}"),
                        mention_type: None,
                    }],
                })
                .collect(),
            triples,
        }
    }

    fn catalog(ids: &[&str]) -> BTreeMap<String, RelationType> {
        ids.iter()
            .map(|id| {
                (
                    id.to_string(),
                    RelationType {
                        id: id.to_string(),
                        name: id.to_string(),
                        description: "d".into(),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn nota_pairs_examples() {
        let d = doc("a", 2, vec![Triple::new(0, "P17", 1)]);
        let targets = BTreeSet::from(["P17"]);
        assert_eq!(enumerate_nota_pairs(&d, &targets), BTreeSet::from([(1, 0)]));
        let d = doc("b", 3, vec![]);
        assert_eq!(enumerate_nota_pairs(&d, &targets).len(), 6);
    }

    #[test]
    fn non_target_relations_count_as_nota() {
        let d = doc("a", 2, vec![Triple::new(0, "P1", 1)]);
        assert_eq!(enumerate_nota_pairs(&d, &BTreeSet::from(["P17"])).len(), 2);
    }

    fn episode_with(query: Document, gold: Vec<Triple>, targets: &[&str]) -> (Episode, Corpus) {
        let support = doc("s", 2, vec![]);
        let corpus = Corpus::new(vec![support, query.clone()], catalog(&["P17", "P1"])).unwrap();
        let ep = Episode {
            support: vec![SupportDoc {
                doc_id: "s".into(),
                triples: vec![],
            }],
            query_doc_id: query.doc_id,
            target_relations: targets.iter().map(|s| s.to_string()).collect(),
            gold_query_triples: gold,
        };
        (ep, corpus)
    }

    #[test]
    fn nota_rate_examples() {
        let (ep, c) = episode_with(doc("q", 3, vec![]), vec![], &["P17"]);
        assert_eq!(nota_rate(&ep, &c).unwrap(), 1.0);
        let both = vec![Triple::new(0, "P17", 1), Triple::new(1, "P17", 0)];
        let (ep, c) = episode_with(doc("q", 2, both.clone()), both, &["P17"]);
        assert_eq!(nota_rate(&ep, &c).unwrap(), 0.0);
        let one = vec![Triple::new(0, "P17", 1), Triple::new(0, "P1", 1)];
        let (ep, c) = episode_with(doc("q", 3, one.clone()), one, &["P17", "P1"]);
        assert_eq!(nota_rate(&ep, &c).unwrap(), 5.0 / 6.0);
        let (ep, c) = episode_with(doc("q", 1, vec![]), vec![], &["P17"]);
        assert!(matches!(nota_rate(&ep, &c), Err(Error::UndefinedRate(_))));
    }

    fn ep(targets: &[&str], support: Vec<Triple>) -> Episode {
        Episode {
            support: vec![SupportDoc {
                doc_id: "s".into(),
                triples: support,
            }],
            query_doc_id: "q".into(),
            target_relations: targets.iter().map(|s| s.to_string()).collect(),
            gold_query_triples: vec![],
        }
    }

    #[test]
    fn stats_examples() {
        let triples = vec![
            Triple::new(0, "A", 1),
            Triple::new(1, "A", 2),
            Triple::new(2, "A", 0),
            Triple::new(0, "B", 2),
            Triple::new(1, "B", 0),
            Triple::new(2, "B", 1),
        ];
        assert_eq!(episode_stats(&[ep(&["A", "B"], triples)]).unwrap(), (2.0, 3.0));
        let two = [ep(&["A", "B"], vec![]), ep(&["A", "B", "C", "D"], vec![])];
        assert_eq!(episode_stats(&two).unwrap().0, 3.0);
        assert!(episode_stats(&[]).is_err());
    }

    #[test]
    fn single_carrier_document_is_always_the_support() {
        let docs = vec![
            doc("only", 2, vec![Triple::new(0, "P17", 1)]),
            doc("x", 2, vec![Triple::new(0, "P1", 1)]),
            doc("y", 2, vec![Triple::new(1, "P1", 0)]),
        ];
        let corpus = Corpus::new(docs, catalog(&["P17", "P1"])).unwrap();
        let split = RelationSplit::new(vec!["P17", "P1"], vec![], vec![]).unwrap();
        let cfg = EpisodeConfig::default();
        let mut saw = false;
        for i in 0..200 {
            let e = sample_training_episode(&corpus, &split, &cfg, i).unwrap();
            e.validate(&corpus).unwrap();
            if e.target_relations.iter().any(|r| r == "P17") {
                saw = true;
                assert_eq!(e.support[0].doc_id, "only");
            }
        }
        assert!(saw);
    }

    #[test]
    fn sampling_is_deterministic_and_capped() {
        let docs = (0..6)
            .map(|i| doc(&format!("d{i}"), 3, vec![Triple::new(0, "P17", 1), Triple::new(1, "P1", 2)]))
            .collect();
        let corpus = Corpus::new(docs, catalog(&["P17", "P1"])).unwrap();
        let split = RelationSplit::new(vec!["P17", "P1"], vec![], vec![]).unwrap();
        let cfg = EpisodeConfig {
            n_docs: 3,
            seed: 9,
            max_target_relations: 1,
            source_split: SourceSplit::Train,
        };
        let a = sample_training_episode(&corpus, &split, &cfg, 4).unwrap();
        let b = sample_training_episode(&corpus, &split, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.target_relations.len(), 1);
        assert_eq!(a.support.len(), 3);
        a.validate(&corpus).unwrap();
    }

    #[test]
    fn exhaustion_when_pool_never_matches() {
        let corpus = Corpus::new(
            vec![doc("a", 2, vec![Triple::new(0, "P1", 1)]), doc("b", 2, vec![])],
            catalog(&["P17", "P1"]),
        )
        .unwrap();
        let split = RelationSplit::new(vec!["P17"], vec![], vec![]).unwrap();
        let err = sample_training_episode(&corpus, &split, &EpisodeConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Exhaustion { attempts: MAX_SAMPLING_ATTEMPTS }));
    }

    fn header() -> EpisodeFileHeader {
        EpisodeFileHeader {
            schema_version: EPISODE_SCHEMA_VERSION,
            n_docs: 1,
            split_name: "test_in".into(),
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let eps = vec![
            ep(&["A"], vec![Triple::new(0, "A", 1)]),
            ep(&["B", "A"], vec![Triple::new(1, "B", 0)]),
        ];
        let text = episodes_to_jsonl(&header(), &eps);
        let (h, back) = parse_episode_jsonl(&text, "t").unwrap();
        assert_eq!(h, header());
        assert_eq!(back, eps);

        let (_, empty) = parse_episode_jsonl(&episodes_to_jsonl(&header(), &[]), "t").unwrap();
        assert!(empty.is_empty());

        let cut = &text[..text.len() - 10];
        match parse_episode_jsonl(cut, "t").unwrap_err() {
            Error::Parse { offset, line, .. } => {
                assert_eq!(line, 3);
                assert!(offset > text.find('\n').unwrap() && offset <= cut.len(), "{offset}");
            }
            other => panic!("unexpected {other}"),
        }

        let bad = text.replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        assert!(matches!(
            parse_episode_jsonl(&bad, "t"),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }
}
