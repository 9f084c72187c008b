//! Episode inference, macro F1 and the analysis slices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Triple};
use crate::episode::{nota_rate, Episode};
use crate::model::Model;
use crate::objectives::extracts;
use crate::representation::QueryPairRep;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub triples: BTreeSet<Triple>,
}

/// Extracts `(h, r, t)` iff `q·p^r > max_i q·p_i^nota`.
pub fn predict_episode(model: &Model, corpus: &Corpus, episode: &Episode) -> Result<PredictionSet> {
    let ep = model.forward(corpus, episode, false)?;
    let Some(queries) = ep.queries else {
        return Ok(PredictionSet::default());
    };
    let g = &ep.graph;
    let rows = |n| -> Vec<Vec<f64>> { g.value(n).rows().into_iter().map(|r| r.to_vec()).collect() };
    let relations = rows(ep.prototypes.relations);
    let nota = rows(ep.prototypes.nota);
    let mut triples = BTreeSet::new();
    for (q, &(head, tail)) in rows(queries).into_iter().zip(&ep.query_pairs) {
        let q = QueryPairRep { q, head, tail };
        for (r, p) in ep.targets.iter().zip(&relations) {
            if extracts(&q, p, &nota) {
                triples.insert(Triple::new(head, r.clone(), tail));
            }
        }
    }
    Ok(PredictionSet { triples })
}

/// Predictions for every episode, computed in parallel; order is preserved.
pub fn predict_episodes(model: &Model, corpus: &Corpus, episodes: &[Episode]) -> Result<Vec<PredictionSet>> {
    episodes
        .par_iter()
        .map(|e| predict_episode(model, corpus, e))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Aggregation {
    /// Counts pooled per relation across episodes.
    #[default]
    Pooled,
    /// Macro F1 within each episode, averaged over episodes.
    PerEpisodeMean,
}

impl FromStr for F1Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per-episode-mean" => Ok(Self::PerEpisodeMean),
            other => Err(Error::Config(format!("unknown F1 aggregation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl RelationScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub macro_f1: f64,
    pub per_relation: BTreeMap<String, RelationScore>,
    pub episode_count: usize,
    pub aggregation: F1Aggregation,
}

type Counts = BTreeMap<String, (usize, usize, usize)>;

fn count_episode(pred: &PredictionSet, episode: &Episode, keep: impl Fn(&str) -> bool, counts: &mut Counts) {
    for r in &episode.target_relations {
        if keep(r) {
            counts.entry(r.clone()).or_default();
        }
    }
    let targets = episode.target_set();
    let gold: BTreeSet<&Triple> = episode
        .gold_query_triples
        .iter()
        .filter(|t| targets.contains(t.relation.as_str()))
        .collect();
    for t in &pred.triples {
        if !targets.contains(t.relation.as_str()) || !keep(&t.relation) {
            continue;
        }
        let c = counts.entry(t.relation.clone()).or_default();
        if gold.contains(t) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for t in gold {
        if keep(&t.relation) && !pred.triples.contains(t) {
            counts.entry(t.relation.clone()).or_default().2 += 1;
        }
    }
}

fn scores(counts: &Counts, universe: &BTreeSet<String>) -> BTreeMap<String, RelationScore> {
    universe
        .iter()
        .map(|r| {
            let (tp, fp, fn_) = counts.get(r).copied().unwrap_or_default();
            (r.clone(), RelationScore::from_counts(tp, fp, fn_))
        })
        .collect()
}

fn mean_f1(per: &BTreeMap<String, RelationScore>) -> f64 {
    if per.is_empty() {
        0.0
    } else {
        per.values().map(|s| s.f1).sum::<f64>() / per.len() as f64
    }
}

/// Macro F1 over `universe`. Pooled: TP/FP/FN summed per relation over the
/// episodes where it is a target. Per-episode mean: macro F1 over each
/// episode's targets, averaged; `per_relation` still holds pooled counts.
pub fn macro_f1(
    predictions: &[PredictionSet],
    episodes: &[Episode],
    universe: &BTreeSet<String>,
    aggregation: F1Aggregation,
) -> Result<ScoreReport> {
    if predictions.len() != episodes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction sets for {} episodes",
            predictions.len(),
            episodes.len()
        )));
    }
    let mut pooled = Counts::new();
    for (p, e) in predictions.iter().zip(episodes) {
        count_episode(p, e, |r| universe.contains(r), &mut pooled);
    }
    let per_relation = scores(&pooled, universe);
    let macro_f1 = match aggregation {
        F1Aggregation::Pooled => mean_f1(&per_relation),
        F1Aggregation::PerEpisodeMean => {
            if episodes.is_empty() {
                0.0
            } else {
                let sum: f64 = predictions
                    .iter()
                    .zip(episodes)
                    .map(|(p, e)| {
                        let mut c = Counts::new();
                        count_episode(p, e, |r| universe.contains(r), &mut c);
                        let local: BTreeSet<String> =
                            e.target_relations.iter().filter(|r| universe.contains(*r)).cloned().collect();
                        mean_f1(&scores(&c, &local))
                    })
                    .sum();
                sum / episodes.len() as f64
            }
        }
    };
    Ok(ScoreReport {
        macro_f1,
        per_relation,
        episode_count: episodes.len(),
        aggregation,
    })
}

/// Union of the episodes' target relations.
pub fn target_universe(episodes: &[Episode]) -> BTreeSet<String> {
    episodes.iter().flat_map(|e| e.target_relations.iter().cloned()).collect()
}

/// Pooled macro F1 restricted to `(episode index, relation)` items.
pub fn macro_f1_on_items(
    predictions: &[PredictionSet],
    episodes: &[Episode],
    items: &[(usize, String)],
) -> Result<ScoreReport> {
    if predictions.len() != episodes.len() {
        return Err(Error::InvalidArgument("predictions and episodes misaligned".into()));
    }
    let mut by_episode: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for (i, r) in items {
        if *i >= episodes.len() {
            return Err(Error::InvalidArgument(format!("episode index {i} out of range")));
        }
        by_episode.entry(*i).or_default().insert(r);
    }
    let mut counts = Counts::new();
    for (&i, rels) in &by_episode {
        count_episode(&predictions[i], &episodes[i], |r| rels.contains(r), &mut counts);
    }
    let universe: BTreeSet<String> = items.iter().map(|(_, r)| r.clone()).collect();
    let per_relation = scores(&counts, &universe);
    Ok(ScoreReport {
        macro_f1: mean_f1(&per_relation),
        per_relation,
        episode_count: by_episode.len(),
        aggregation: F1Aggregation::Pooled,
    })
}

/// Half-open `[lo, hi)` interval, closed on the right for the last bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBin {
    pub lo: f64,
    pub hi: f64,
    pub closed: bool,
}

impl RateBin {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && (x < self.hi || (self.closed && x == self.hi))
    }
}

impl fmt::Display for RateBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let close = if self.closed { ']' } else { ')' };
        write!(f, "[{}%, {}%{close}", self.lo * 100.0, self.hi * 100.0)
    }
}

pub const DEFAULT_NOTA_BOUNDARIES: [f64; 5] = [0.0, 0.95, 0.97, 0.99, 1.0];

pub fn rate_bins(boundaries: &[f64]) -> Result<Vec<RateBin>> {
    if boundaries.len() < 2 || boundaries[0] != 0.0 || *boundaries.last().unwrap() != 1.0 {
        return Err(Error::InvalidArgument("bin boundaries must start at 0 and end at 1".into()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bin boundaries must be strictly increasing".into()));
    }
    let n = boundaries.len() - 1;
    Ok(boundaries
        .windows(2)
        .enumerate()
        .map(|(i, w)| RateBin {
            lo: w[0],
            hi: w[1],
            closed: i + 1 == n,
        })
        .collect())
}

/// Partitions episode indices by the NOTA rate of their query document.
pub fn bin_by_nota_rate(
    episodes: &[Episode],
    corpus: &Corpus,
    boundaries: &[f64],
) -> Result<Vec<(RateBin, Vec<usize>)>> {
    let bins = rate_bins(boundaries)?;
    let mut out: Vec<(RateBin, Vec<usize>)> = bins.iter().map(|&b| (b, Vec::new())).collect();
    for (i, e) in episodes.iter().enumerate() {
        let rate = nota_rate(e, corpus)?;
        let slot = out
            .iter_mut()
            .find(|(b, _)| b.contains(rate))
            .ok_or_else(|| Error::Invariant(format!("NOTA rate {rate} outside [0, 1]")))?;
        slot.1.push(i);
    }
    Ok(out)
}

/// Support instance count of a relation, capped at 10 ("≥10").
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SupportCategory(u8);

impl SupportCategory {
    pub fn from_count(count: usize) -> Self {
        Self(count.clamp(1, 10) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for SupportCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 >= 10 {
            f.write_str("≥10")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Groups every `(episode index, target relation)` by support count.
pub fn bin_by_support_count(episodes: &[Episode]) -> BTreeMap<SupportCategory, Vec<(usize, String)>> {
    let mut out: BTreeMap<SupportCategory, Vec<(usize, String)>> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        let counts = e.support_counts();
        for r in &e.target_relations {
            let c = counts.get(r.as_str()).copied().unwrap_or(0);
            out.entry(SupportCategory::from_count(c)).or_default().push((i, r.clone()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub episode: usize,
    pub relation: String,
    pub prototype: bool,
    pub values: Vec<f64>,
}

/// Writes support instance representations and relation prototypes as TSV:
/// `episode  relation  kind  v0 … v{2d-1}`, `kind` ∈ {instance, prototype}.
/// At most `per_relation` instances of each relation are written per
/// episode. Values use shortest round-trip formatting.
pub fn dump_support_embeddings(
    model: &Model,
    corpus: &Corpus,
    episodes: &[Episode],
    per_relation: Option<usize>,
    path: &Path,
) -> Result<usize> {
    let dim = 2 * model.hidden_size();
    let mut out = String::new();
    out.push_str("episode\trelation\tkind");
    for j in 0..dim {
        out.push_str(&format!("\tv{j}"));
    }
    out.push('\n');
    let mut rows = 0;
    for (i, e) in episodes.iter().enumerate() {
        let (instances, set) = model.support_instances(corpus, e)?;
        let mut written: BTreeMap<String, usize> = BTreeMap::new();
        for inst in instances {
            let r = inst.provenance.relation.clone().unwrap_or_default();
            let n = written.entry(r.clone()).or_default();
            if per_relation.is_some_and(|cap| *n >= cap) {
                continue;
            }
            *n += 1;
            push_row(&mut out, i, &r, "instance", &inst.s);
            rows += 1;
        }
        for (r, p) in &set.relation_prototypes {
            push_row(&mut out, i, r, "prototype", p);
            rows += 1;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn push_row(out: &mut String, episode: usize, relation: &str, kind: &str, values: &[f64]) {
    out.push_str(&format!("{episode}\t{relation}\t{kind}"));
    for v in values {
        out.push_str(&format!("\t{v:?}"));
    }
    out.push('\n');
}

pub fn parse_embedding_dump(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines().enumerate();
    lines.next();
    lines
        .map(|(n, line)| {
            let bad = |m: &str| Error::InvalidArgument(format!("embedding dump line {}: {m}", n + 1));
            let mut cols = line.split('\t');
            let episode = cols.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad("episode"))?;
            let relation = cols.next().ok_or_else(|| bad("relation"))?.to_string();
            let prototype = match cols.next() {
                Some("prototype") => true,
                Some("instance") => false,
                _ => return Err(bad("kind")),
            };
            let values = cols
                .map(|c| c.parse::<f64>().map_err(|_| bad("value")))
                .collect::<Result<Vec<_>>>()?;
            Ok(EmbeddingRow {
                episode,
                relation,
                prototype,
                values,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::SupportDoc;

    fn episode(targets: &[&str], gold: Vec<Triple>) -> Episode {
        Episode {
            support: vec![SupportDoc {
                doc_id: "s".into(),
                triples: vec![],
            }],
            query_doc_id: "q".into(),
            target_relations: targets.iter().map(|s| s.to_string()).collect(),
            gold_query_triples: gold,
        }
    }

    #[test]
    fn hand_counted_macro_f1() {
        // r1: tp 1, fp 1, fn 0; r2: tp 0, fp 0, fn 2
        let e = episode(
            &["r1", "r2"],
            vec![Triple::new(0, "r1", 1), Triple::new(0, "r2", 1), Triple::new(1, "r2", 0)],
        );
        let p = PredictionSet {
            triples: [Triple::new(0, "r1", 1), Triple::new(1, "r1", 0)].into(),
        };
        let universe = target_universe(std::slice::from_ref(&e));
        let report = macro_f1(&[p], &[e], &universe, F1Aggregation::Pooled).unwrap();
        assert!((report.per_relation["r1"].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(report.per_relation["r2"].f1, 0.0);
        assert!((report.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![Triple::new(0, "r", 1)];
        let e = episode(&["r"], gold.clone());
        let u = target_universe(std::slice::from_ref(&e));
        let perfect = PredictionSet {
            triples: gold.into_iter().collect(),
        };
        assert_eq!(macro_f1(&[perfect], std::slice::from_ref(&e), &u, F1Aggregation::Pooled).unwrap().macro_f1, 1.0);
        let empty = PredictionSet::default();
        assert_eq!(macro_f1(&[empty], &[e], &u, F1Aggregation::Pooled).unwrap().macro_f1, 0.0);
    }

    #[test]
    fn misaligned_inputs_fail() {
        let e = episode(&["r"], vec![]);
        assert!(macro_f1(&[], &[e], &BTreeSet::new(), F1Aggregation::Pooled).is_err());
    }

    #[test]
    fn default_bins_are_left_closed() {
        let bins = rate_bins(&DEFAULT_NOTA_BOUNDARIES).unwrap();
        assert_eq!(bins.len(), 4);
        assert!(bins[1].contains(0.95) && !bins[0].contains(0.95));
        assert!(bins[3].contains(1.0));
        assert_eq!(bins[3].to_string(), "[99%, 100%]");
        assert!(rate_bins(&[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(rate_bins(&[0.1, 1.0]).is_err());
    }

    #[test]
    fn support_categories() {
        assert_eq!(SupportCategory::from_count(3).to_string(), "3");
        assert_eq!(SupportCategory::from_count(14).to_string(), "≥10");
        assert_eq!(SupportCategory::from_count(10), SupportCategory::from_count(99));
    }
}
