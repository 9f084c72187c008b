//! Relation-weighted contrastive loss, its unweighted variant, the
//! relation-vs-NOTA probability, binary cross-entropy and the total loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::prototypes::PrototypeSet;
use crate::representation::{InstanceRep, QueryPairRep};
use crate::tape::{sigmoid, Graph, Matrix, NodeId};
use crate::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveVariant {
    #[default]
    Rcl,
    Scl,
    Off,
}

impl FromStr for ContrastiveVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcl" => Ok(Self::Rcl),
            "scl" => Ok(Self::Scl),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown contrastive variant {other:?}"))),
        }
    }
}

impl fmt::Display for ContrastiveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rcl => "rcl",
            Self::Scl => "scl",
            Self::Off => "off",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub variant: ContrastiveVariant,
}

impl ContrastiveConfig {
    pub fn new(tau: f64, variant: ContrastiveVariant) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        Ok(Self { tau, variant })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub rcl: f64,
    pub total: f64,
    pub query_pairs: usize,
    pub support_instances: usize,
    pub skipped_anchors: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveOutcome {
    pub loss: f64,
    pub contributing: usize,
    pub skipped: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1` within a relation, `1 + (cos(h_r, h_r̂) + 1)/2` across relations.
pub fn relation_pair_weight(h_r: &[f64], h_rhat: &[f64], same_relation: bool) -> Result<f64> {
    let (nr, nh) = (dot(h_r, h_r).sqrt(), dot(h_rhat, h_rhat).sqrt());
    if nr == 0.0 || nh == 0.0 {
        return Err(Error::ZeroVector("relation_pair_weight"));
    }
    if same_relation {
        return Ok(1.0);
    }
    let cos = (dot(h_r, h_rhat) / (nr.max(COSINE_EPS) * nh.max(COSINE_EPS))).clamp(-1.0, 1.0);
    Ok(1.0 + (cos + 1.0) / 2.0)
}

/// `log ω` for every pair of rows of `embeddings` (`R × d` → `R × R`).
pub fn log_weight_graph(g: &mut Graph, embeddings: NodeId) -> NodeId {
    let (r, d) = g.shape(embeddings);
    let sq = g.mul(embeddings, embeddings);
    let sumsq = g.sum_cols(sq);
    let sumsq = g.clamp(sumsq, COSINE_EPS * COSINE_EPS, f64::INFINITY);
    let log_sq = g.log(sumsq);
    let half = g.scale(log_sq, -0.5);
    let inv_norm = g.exp(half);
    let ones = g.constant(Matrix::ones((1, d)));
    let inv_b = g.matmul(inv_norm, ones);
    let unit = g.mul(embeddings, inv_b);
    let cos = g.matmul_t(unit, unit);
    let shifted = g.add_const(cos, 1.0);
    let halved = g.scale(shifted, 0.5);
    let off_diag = g.constant(Matrix::from_shape_fn((r, r), |(i, j)| if i == j { 0.0 } else { 1.0 }));
    let masked = g.mul(halved, off_diag);
    let w = g.add_const(masked, 1.0);
    g.log(w)
}

/// Contrastive loss over the rows of `reps` (`m × 2d`) labelled by relation
/// index. With `log_weights` (`R × R`) each anchor's denominator terms are
/// weighted by `ω`; without, all weights are one. Anchors without a positive
/// are skipped; `None` when every anchor is skipped.
pub fn contrastive_graph(
    g: &mut Graph,
    reps: NodeId,
    labels: &[usize],
    log_weights: Option<NodeId>,
    tau: f64,
) -> (Option<NodeId>, ContrastiveOutcome) {
    let m = labels.len();
    let sims = g.matmul_t(reps, reps);
    let sims = g.scale(sims, 1.0 / tau);
    let mut terms = Vec::new();
    for i in 0..m {
        let positives: Vec<usize> = (0..m).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let row = g.select_rows(sims, &[i]);
        let mut denom = g.select_cols(row, &others);
        if let Some(lw) = log_weights {
            let wr = g.select_rows(lw, &[labels[i]]);
            let other_labels: Vec<usize> = others.iter().map(|&j| labels[j]).collect();
            let wr = g.select_cols(wr, &other_labels);
            denom = g.add(denom, wr);
        }
        let col = g.transpose(denom);
        let lse = g.logsumexp_rows(col);
        let pos = g.select_cols(row, &positives);
        let pos = g.sum(pos);
        let pos = g.scale(pos, 1.0 / positives.len() as f64);
        terms.push(g.sub(lse, pos));
    }
    let outcome = ContrastiveOutcome {
        loss: 0.0,
        contributing: terms.len(),
        skipped: m - terms.len(),
    };
    if terms.is_empty() {
        return (None, outcome);
    }
    let stacked = g.concat_rows(&terms);
    let total = g.sum(stacked);
    let loss = g.scale(total, 1.0 / terms.len() as f64);
    let value = g.scalar(loss);
    (Some(loss), ContrastiveOutcome { loss: value, ..outcome })
}

fn contrastive_values(
    instances: &[InstanceRep],
    relation_embeddings: Option<&BTreeMap<String, Vec<f64>>>,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutcome> {
    if cfg.tau.is_nan() || cfg.tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", cfg.tau)));
    }
    let mut relations: Vec<&str> = Vec::new();
    let mut labels = Vec::with_capacity(instances.len());
    for inst in instances {
        let r = inst
            .provenance
            .relation
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("contrastive instance without relation".into()))?;
        let idx = match relations.iter().position(|&x| x == r) {
            Some(i) => i,
            None => {
                relations.push(r);
                relations.len() - 1
            }
        };
        labels.push(idx);
    }
    if instances.is_empty() {
        return Ok(ContrastiveOutcome {
            loss: 0.0,
            contributing: 0,
            skipped: 0,
        });
    }
    let dim = instances[0].s.len();
    let flat: Vec<f64> = instances.iter().flat_map(|i| i.s.iter().copied()).collect();
    let reps = Matrix::from_shape_vec((instances.len(), dim), flat)
        .map_err(|_| Error::InvalidArgument("instance representations of different sizes".into()))?;
    let mut g = Graph::new();
    let reps = g.constant(reps);
    let log_weights = match relation_embeddings {
        Some(emb) => {
            let rows = relations
                .iter()
                .map(|r| {
                    let e = emb
                        .get(*r)
                        .ok_or_else(|| Error::InvalidArgument(format!("no embedding for relation {r}")))?;
                    if e.iter().all(|&x| x == 0.0) {
                        return Err(Error::ZeroVector("rcl_loss"));
                    }
                    Ok(e.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let d = rows[0].len();
            let e = Matrix::from_shape_vec((rows.len(), d), rows.concat())
                .map_err(|_| Error::InvalidArgument("relation embeddings of different sizes".into()))?;
            let e = g.constant(e);
            Some(log_weight_graph(&mut g, e))
        }
        None => None,
    };
    Ok(contrastive_graph(&mut g, reps, &labels, log_weights, cfg.tau).1)
}

/// Relation-weighted contrastive loss. Instances carry their relation in
/// their provenance.
pub fn rcl_loss(
    instances: &[InstanceRep],
    relation_embeddings: &BTreeMap<String, Vec<f64>>,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutcome> {
    if cfg.variant != ContrastiveVariant::Rcl {
        return Err(Error::InvalidArgument(format!("rcl_loss called with variant {}", cfg.variant)));
    }
    contrastive_values(instances, Some(relation_embeddings), cfg)
}

/// Supervised contrastive loss: [`rcl_loss`] with every weight set to one.
pub fn scl_loss(instances: &[InstanceRep], cfg: &ContrastiveConfig) -> Result<ContrastiveOutcome> {
    if cfg.variant != ContrastiveVariant::Scl {
        return Err(Error::InvalidArgument(format!("scl_loss called with variant {}", cfg.variant)));
    }
    contrastive_values(instances, None, cfg)
}

/// `(q·p^r, max_i q·p_i^nota)`
pub fn decision_logits(q: &[f64], p_r: &[f64], nota: &[Vec<f64>]) -> (f64, f64) {
    let nota_max = nota.iter().map(|p| dot(q, p)).fold(f64::NEG_INFINITY, f64::max);
    (dot(q, p_r), nota_max)
}

/// Two-logit softmax of the relation logit against the best NOTA logit.
pub fn relation_probability(q: &QueryPairRep, p_r: &[f64], nota: &[Vec<f64>]) -> f64 {
    let (rel, nota_max) = decision_logits(&q.q, p_r, nota);
    sigmoid(rel - nota_max)
}

/// Extraction rule: the relation logit strictly beats every NOTA logit.
pub fn extracts(q: &QueryPairRep, p_r: &[f64], nota: &[Vec<f64>]) -> bool {
    let (rel, nota_max) = decision_logits(&q.q, p_r, nota);
    rel > nota_max
}

/// `q·p^r − max_i q·p_i^nota` for every query row and relation
/// (`P × R`), on the graph.
pub fn margin_graph(g: &mut Graph, queries: NodeId, relations: NodeId, nota: NodeId) -> NodeId {
    let r = g.shape(relations).0;
    let rel = g.matmul_t(queries, relations);
    let nl = g.matmul_t(queries, nota);
    let best = g.max_cols(nl);
    let ones = g.constant(Matrix::ones((1, r)));
    let best = g.matmul(best, ones);
    g.sub(rel, best)
}

/// Mean over query rows of the summed binary cross-entropy across target
/// relations. `labels` is `P × R` with entries in {0, 1}.
pub fn bce_graph(g: &mut Graph, queries: NodeId, relations: NodeId, nota: NodeId, labels: &Matrix) -> NodeId {
    let p = g.shape(queries).0;
    if p == 0 {
        return g.constant(Matrix::zeros((1, 1)));
    }
    let margin = margin_graph(g, queries, relations, nota);
    let prob = g.sigmoid(margin);
    let prob = g.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(prob);
    let neg = g.scale(prob, -1.0);
    let comp = g.add_const(neg, 1.0);
    let log_q = g.log(comp);
    let y = g.constant(labels.clone());
    let not_y = g.constant(labels.mapv(|v| 1.0 - v));
    let a = g.mul(y, log_p);
    let b = g.mul(not_y, log_q);
    let ll = g.add(a, b);
    let total = g.sum(ll);
    g.scale(total, -1.0 / p as f64)
}

/// Binary cross-entropy over query pairs and their gold relation sets.
pub fn bce_loss(query_pairs: &[(QueryPairRep, BTreeSet<String>)], prototypes: &PrototypeSet) -> Result<f64> {
    if query_pairs.is_empty() {
        return Ok(0.0);
    }
    if prototypes.nota_prototypes.is_empty() {
        return Err(Error::EmptyInput("no NOTA prototypes"));
    }
    let relations: Vec<(&String, &Vec<f64>)> = prototypes.relation_prototypes.iter().collect();
    let stack = |rows: Vec<&[f64]>| -> Result<Matrix> {
        let d = rows[0].len();
        Matrix::from_shape_vec((rows.len(), d), rows.concat())
            .map_err(|_| Error::InvalidArgument("vectors of different sizes".into()))
    };
    let q = stack(query_pairs.iter().map(|(q, _)| q.q.as_slice()).collect())?;
    let rel = stack(relations.iter().map(|(_, p)| p.as_slice()).collect())?;
    let nota = stack(prototypes.nota_prototypes.iter().map(Vec::as_slice).collect())?;
    let labels = Matrix::from_shape_fn((query_pairs.len(), relations.len()), |(i, j)| {
        f64::from(u8::from(query_pairs[i].1.contains(relations[j].0)))
    });
    let mut g = Graph::new();
    let (qn, rn, nn) = (g.constant(q), g.constant(rel), g.constant(nota));
    let loss = bce_graph(&mut g, qn, rn, nn, &labels);
    Ok(g.scalar(loss))
}

pub fn total_loss(bce: f64, rcl: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be non-negative")));
    }
    Ok(LossBreakdown {
        bce,
        rcl,
        total: bce + lambda * rcl,
        ..LossBreakdown::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::Provenance;

    fn inst(s: Vec<f64>, r: &str) -> InstanceRep {
        InstanceRep {
            s,
            provenance: Provenance {
                doc_id: "d".into(),
                head: 0,
                relation: Some(r.into()),
                tail: 1,
            },
        }
    }

    #[test]
    fn weight_examples() {
        let h = [0.3, -0.4];
        assert_eq!(relation_pair_weight(&h, &h, true).unwrap(), 1.0);
        assert_eq!(relation_pair_weight(&h, &h, false).unwrap(), 2.0);
        assert_eq!(relation_pair_weight(&h, &[-0.3, 0.4], false).unwrap(), 1.0);
        assert_eq!(relation_pair_weight(&[1.0, 0.0], &[0.0, 2.0], false).unwrap(), 1.5);
        assert!(relation_pair_weight(&[0.0, 0.0], &h, false).is_err());
    }

    #[test]
    fn two_orthogonal_instances_give_zero() {
        let cfg = ContrastiveConfig::new(0.4, ContrastiveVariant::Rcl).unwrap();
        let emb: BTreeMap<String, Vec<f64>> = [("r".to_string(), vec![1.0, 0.0])].into();
        let xs = [inst(vec![1.0, 0.0], "r"), inst(vec![0.0, 1.0], "r")];
        let out = rcl_loss(&xs, &emb, &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.contributing, 2);
    }

    #[test]
    fn singletons_are_skipped() {
        let cfg = ContrastiveConfig::new(0.4, ContrastiveVariant::Scl).unwrap();
        let xs = [inst(vec![1.0, 0.0], "a"), inst(vec![0.0, 1.0], "b")];
        let out = scl_loss(&xs, &cfg).unwrap();
        assert_eq!((out.loss, out.skipped, out.contributing), (0.0, 2, 0));
    }

    #[test]
    fn probability_examples() {
        let q = QueryPairRep {
            q: vec![1.0, 0.0],
            head: 0,
            tail: 1,
        };
        assert_eq!(relation_probability(&q, &[0.5, 0.0], &[vec![0.5, 9.0]]), 0.5);
        assert!(!extracts(&q, &[0.5, 0.0], &[vec![0.5, 9.0]]));
        assert!((relation_probability(&q, &[1.0, 0.0], &[vec![0.0, 1.0]]) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(relation_probability(&q, &[20.0, 0.0], &[vec![0.0, 0.0]]) > 0.9999);
    }

    #[test]
    fn total_is_bce_plus_weighted_rcl() {
        let t = total_loss(1.0, 2.0, 0.1).unwrap();
        assert_eq!(t.total, 1.0 + 0.1 * 2.0);
        assert_eq!(total_loss(0.7, 5.0, 0.0).unwrap().total, 0.7);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }
}
