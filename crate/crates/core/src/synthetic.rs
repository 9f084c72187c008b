//! Seeded synthetic corpora with trigger-word relations, for smoke tests
//! and demos.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, Entity, Mention, RelationType, Triple};
use crate::Result;

const TRIGGERS: [(&str, &str); 8] = [
    ("founded", "organization established by a person"),
    ("married", "person joined in marriage to another person"),
    ("located", "place situated inside a larger region"),
    ("directed", "film directed by a person"),
    ("owns", "entity that holds ownership of another"),
    ("follows", "item that comes after another in a series"),
    ("employs", "organization that has a person on staff"),
    ("borders", "region that shares a border with another"),
];

const NAMES: [&str; 24] = [
    "arden", "bexley", "corvin", "dalton", "elstow", "farrow", "garnet", "hollis", "ingram", "jarvis", "kellan",
    "lyndon", "marlow", "norris", "orwell", "penrose", "quill", "rowan", "sutton", "tamsin", "upton", "vesper",
    "winslow", "yardley",
];

const FILLER: [&str; 10] = [
    "the", "report", "said", "that", "during", "winter", "many", "people", "visited", "quietly",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub documents: usize,
    pub relations: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub max_triples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            documents: 10,
            relations: 3,
            min_entities: 3,
            max_entities: 5,
            max_triples: 2,
            seed: 0,
        }
    }
}

/// Relation ids are `R0`, `R1`, …; names are the trigger words.
pub fn synthetic_catalog(relations: usize) -> BTreeMap<String, RelationType> {
    assert!(relations <= TRIGGERS.len(), "at most {} synthetic relations", TRIGGERS.len());
    TRIGGERS[..relations]
        .iter()
        .enumerate()
        .map(|(i, (name, desc))| {
            let id = format!("R{i}");
            (
                id.clone(),
                RelationType {
                    id,
                    name: name.to_string(),
                    description: desc.to_string(),
                },
            )
        })
        .collect()
}

fn mention(entity: usize, sentence: usize, at: usize, name: &str) -> Mention {
    Mention {
        entity_index: entity,
        sentence_index: sentence,
        token_span: (at, at + 1),
        surface: name.to_string(),
        mention_type: None,
    }
}

fn filler(rng: &mut impl Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| FILLER.choose(rng).unwrap().to_string()).collect()
}

/// Each triple `(h, r, t)` gets a sentence `… h trigger_r t .`; entities
/// without triples appear in filler sentences. Every document holds at
/// least one triple.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    assert!(cfg.min_entities >= 2 && cfg.min_entities <= cfg.max_entities);
    assert!(cfg.max_entities <= NAMES.len() && cfg.max_triples >= 1);
    let catalog = synthetic_catalog(cfg.relations);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut documents = Vec::with_capacity(cfg.documents);
    for d in 0..cfg.documents {
        let n_e = rng.random_range(cfg.min_entities..=cfg.max_entities);
        let mut names: Vec<&str> = NAMES.to_vec();
        names.shuffle(&mut rng);
        names.truncate(n_e);

        let n_t = rng.random_range(1..=cfg.max_triples).min(n_e * (n_e - 1) / 2);
        let mut pairs = BTreeSet::new();
        let mut triples = Vec::new();
        while triples.len() < n_t {
            let h = rng.random_range(0..n_e);
            let t = rng.random_range(0..n_e);
            if h == t || pairs.contains(&(h, t)) || pairs.contains(&(t, h)) {
                continue;
            }
            pairs.insert((h, t));
            // round-robin so every type recurs evenly
            let r = (d * cfg.max_triples + triples.len()) % cfg.relations;
            triples.push(Triple::new(h, format!("R{r}"), t));
        }

        let mut sentences = Vec::new();
        let mut mentions: Vec<Vec<Mention>> = vec![Vec::new(); n_e];
        for tr in &triples {
            let r: usize = tr.relation[1..].parse().unwrap();
            let n_filler = rng.random_range(1..3);
            let mut words = filler(&mut rng, n_filler);
            let s = sentences.len();
            mentions[tr.head].push(mention(tr.head, s, words.len(), names[tr.head]));
            words.push(names[tr.head].to_string());
            words.push(TRIGGERS[r].0.to_string());
            mentions[tr.tail].push(mention(tr.tail, s, words.len(), names[tr.tail]));
            words.push(names[tr.tail].to_string());
            words.push(".".to_string());
            sentences.push(words);
        }
        for e in 0..n_e {
            if mentions[e].is_empty() {
                let mut words = filler(&mut rng, 2);
                let s = sentences.len();
                mentions[e].push(mention(e, s, words.len(), names[e]));
                words.push(names[e].to_string());
                words.extend(filler(&mut rng, 2));
                words.push(".".to_string());
                sentences.push(words);
            }
        }
        documents.push(Document {
            doc_id: format!("doc{d}"),
            title: format!("doc{d}"),
            sentences,
            entities: mentions.into_iter().map(|mentions| Entity { mentions }).collect(),
            triples,
        });
    }
    Corpus::new(documents, catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_valid_and_seeded() {
        let cfg = SyntheticConfig::default();
        let a = synthetic_corpus(&cfg).unwrap();
        let b = synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.to_docred_json(), b.to_docred_json());
        assert_eq!(a.len(), 10);
        let used: BTreeSet<&str> = a.documents.iter().flat_map(|d| d.relation_ids()).collect();
        assert_eq!(used.len(), 3);
    }
}
