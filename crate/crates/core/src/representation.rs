//! Pair, relation and instance attention, context embeddings and the
//! instance-aware entity fusion that yields support/query representations.
//!
//! Graph builders work on batches: row `i` of every input belongs to the
//! `i`-th entity pair. The plain-value functions evaluate the same builders
//! on a scratch graph.

use log::warn;
use rand::Rng;

use crate::encoding::{entity_attentions_graph, entity_embeddings_graph, EncodedDocument, MarkedDocument};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Graph, Matrix, NodeId};
use crate::{Error, Result};

pub const OVERLAP_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// `W` (relation bilinear map, `d×d`), `W_h`/`W_t` (`d×2d`), `b_h`/`b_t` (`1×d`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub w: Matrix,
    pub w_head: Matrix,
    pub w_tail: Matrix,
    pub b_head: Matrix,
    pub b_tail: Matrix,
}

impl ProjectionParams {
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let ids = ProjectionIds::register(&mut store, d, rng);
        ids.values(&store)
    }

    pub fn hidden_size(&self) -> usize {
        self.w.nrows()
    }
}

/// Handles of the projection parameters inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionIds {
    pub w: ParamId,
    pub w_head: ParamId,
    pub w_tail: ParamId,
    pub b_head: ParamId,
    pub b_tail: ParamId,
}

impl ProjectionIds {
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_uniform("proj.w", (d, d), d, true, rng),
            w_head: store.add_uniform("proj.w_head", (d, 2 * d), 2 * d, true, rng),
            w_tail: store.add_uniform("proj.w_tail", (d, 2 * d), 2 * d, true, rng),
            b_head: store.add_uniform("proj.b_head", (1, d), 2 * d, false, rng),
            b_tail: store.add_uniform("proj.b_tail", (1, d), 2 * d, false, rng),
        }
    }

    pub fn values(&self, store: &ParamStore) -> ProjectionParams {
        ProjectionParams {
            w: store.value(self.w).clone(),
            w_head: store.value(self.w_head).clone(),
            w_tail: store.value(self.w_tail).clone(),
            b_head: store.value(self.b_head).clone(),
            b_tail: store.value(self.b_tail).clone(),
        }
    }

    pub fn nodes(&self, g: &mut Graph, store: &ParamStore) -> ProjectionNodes {
        ProjectionNodes {
            w: g.param(store, self.w),
            w_head: g.param(store, self.w_head),
            w_tail: g.param(store, self.w_tail),
            b_head: g.param(store, self.b_head),
            b_tail: g.param(store, self.b_tail),
        }
    }

    pub fn all(&self) -> [ParamId; 5] {
        [self.w, self.w_head, self.w_tail, self.b_head, self.b_tail]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionNodes {
    pub w: NodeId,
    pub w_head: NodeId,
    pub w_tail: NodeId,
    pub b_head: NodeId,
    pub b_tail: NodeId,
}

impl ProjectionNodes {
    pub fn constants(g: &mut Graph, p: &ProjectionParams) -> Self {
        Self {
            w: g.constant(p.w.clone()),
            w_head: g.constant(p.w_head.clone()),
            w_tail: g.constant(p.w_tail.clone()),
            b_head: g.constant(p.b_head.clone()),
            b_tail: g.constant(p.b_tail.clone()),
        }
    }
}

/// `(doc_id, head, relation or None for NOTA, tail)`
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub doc_id: String,
    pub head: usize,
    pub relation: Option<String>,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRep {
    pub s: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPairRep {
    pub q: Vec<f64>,
    pub head: usize,
    pub tail: usize,
}

/// Number of tokens amplified by instance attention.
pub fn top_k_count(k_percent: f64, n: usize) -> usize {
    // the epsilon keeps exact products such as 25% of 4 from rounding up
    ((k_percent / 100.0 * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of the `top_k_count` largest `a_pair ⊙ a_rel` entries, ties to the
/// lower index.
pub fn top_k_indices(a_pair: &[f64], a_rel: &[f64], k_percent: f64) -> Vec<usize> {
    let count = top_k_count(k_percent, a_pair.len());
    let mut order: Vec<usize> = (0..a_pair.len()).collect();
    order.sort_by(|&i, &j| {
        let (pi, pj) = (a_pair[i] * a_rel[i], a_pair[j] * a_rel[j]);
        pj.total_cmp(&pi).then(i.cmp(&j))
    });
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Row-wise `(a_h ⊙ a_t) / (a_hᵀ a_t)`. Rows without overlap fall back to
/// the uniform distribution; their indices are returned.
pub fn pair_attention_graph(g: &mut Graph, a_heads: NodeId, a_tails: NodeId) -> (NodeId, Vec<usize>) {
    let prod = g.mul(a_heads, a_tails);
    g.normalize_rows(prod, OVERLAP_EPS)
}

/// `softmax(H W h_r / √d)` for every row of `relations` (`R×d`), giving `R×N_t`.
pub fn relation_attention_graph(g: &mut Graph, h: NodeId, w: NodeId, relations: NodeId) -> Result<NodeId> {
    let d = g.shape(h).1;
    let u = g.matmul_t(relations, w);
    let logits = g.matmul_t(u, h);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if g.value(logits).iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("relation attention logits".into()));
    }
    Ok(g.softmax_rows(logits))
}

/// Adds `a_rel` back onto the top-k% tokens of `a_pair ⊙ a_rel`, then
/// L1-normalises each row.
pub fn instance_attention_graph(g: &mut Graph, a_pair: NodeId, a_rel: NodeId, k_percent: f64) -> NodeId {
    let mask = {
        let (pv, rv) = (g.value(a_pair), g.value(a_rel));
        let mut mask = Matrix::zeros(pv.dim());
        for (i, (prow, rrow)) in pv.rows().into_iter().zip(rv.rows()).enumerate() {
            let p: Vec<f64> = prow.to_vec();
            let r: Vec<f64> = rrow.to_vec();
            for j in top_k_indices(&p, &r, k_percent) {
                mask[[i, j]] = 1.0;
            }
        }
        mask
    };
    let mask = g.constant(mask);
    let boost = g.mul(a_rel, mask);
    let u = g.add(a_pair, boost);
    g.normalize_rows(u, OVERLAP_EPS).0
}

/// `c = Hᵀ a` per row: `I×N_t` attention against `N_t×d` embeddings.
pub fn context_graph(g: &mut Graph, attention: NodeId, h: NodeId) -> NodeId {
    g.matmul(attention, h)
}

/// `tanh(W_side [h_e; c] + b_side)` per row.
pub fn fusion_graph(g: &mut Graph, entities: NodeId, contexts: NodeId, w_side: NodeId, b_side: NodeId) -> NodeId {
    let x = g.concat_cols(&[entities, contexts]);
    let y = g.matmul_t(x, w_side);
    let y = g.add_row(y, b_side);
    g.tanh(y)
}

/// Per-document nodes reused by every pair of the document.
#[derive(Clone, Copy, Debug)]
pub struct DocNodes {
    pub h: NodeId,
    pub a: NodeId,
    /// `n_e × d` pooled entity embeddings.
    pub entities: NodeId,
    /// `n_e × N_t` entity attention.
    pub attention: NodeId,
}

impl DocNodes {
    pub fn build(g: &mut Graph, h: NodeId, a: NodeId, marked: &MarkedDocument) -> Self {
        Self {
            h,
            a,
            entities: entity_embeddings_graph(g, h, marked),
            attention: entity_attentions_graph(g, a, marked),
        }
    }

    pub fn constants(g: &mut Graph, enc: &EncodedDocument) -> Self {
        let h = g.constant(enc.h.clone());
        let a = g.constant(enc.a.clone());
        Self::build(g, h, a, &enc.marked)
    }
}

/// Representations `[z_h; z_t]` (`I × 2d`) for a batch of ordered pairs of
/// one document. With `relation_attention` (`I × N_t`, one row per pair)
/// the instance attention path is used; otherwise the pair path.
pub fn pair_representations_graph(
    g: &mut Graph,
    doc: &DocNodes,
    pairs: &[(usize, usize)],
    relation_attention: Option<NodeId>,
    proj: &ProjectionNodes,
    k_percent: f64,
    doc_id: &str,
) -> NodeId {
    let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ah = g.select_rows(doc.attention, &heads);
    let at = g.select_rows(doc.attention, &tails);
    let (pair_att, degenerate) = pair_attention_graph(g, ah, at);
    for i in degenerate {
        warn!(
            "document {doc_id}: pair ({}, {}) has no attention overlap, using uniform attention",
            pairs[i].0, pairs[i].1
        );
    }
    let att = match relation_attention {
        Some(rel) => instance_attention_graph(g, pair_att, rel, k_percent),
        None => pair_att,
    };
    let ctx = context_graph(g, att, doc.h);
    let eh = g.select_rows(doc.entities, &heads);
    let et = g.select_rows(doc.entities, &tails);
    let zh = fusion_graph(g, eh, ctx, proj.w_head, proj.b_head);
    let zt = fusion_graph(g, et, ctx, proj.w_tail, proj.b_tail);
    g.concat_cols(&[zh, zt])
}

fn check_distribution(name: &str, a: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    if a.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidArgument(format!("{name} has negative or non-finite weights")));
    }
    Ok(())
}

pub fn pair_attention(a_h: &[f64], a_t: &[f64]) -> Result<Vec<f64>> {
    check_distribution("head attention", a_h)?;
    check_distribution("tail attention", a_t)?;
    if a_h.len() != a_t.len() {
        return Err(Error::InvalidArgument("attention lengths differ".into()));
    }
    let overlap: f64 = a_h.iter().zip(a_t).map(|(x, y)| x * y).sum();
    if overlap < OVERLAP_EPS {
        return Err(Error::DegenerateOverlap(overlap));
    }
    let mut g = Graph::new();
    let (h, t) = (g.row(a_h), g.row(a_t));
    let (out, _) = pair_attention_graph(&mut g, h, t);
    Ok(g.row_vec(out))
}

pub fn relation_attention(h: &Matrix, w: &Matrix, h_r: &[f64]) -> Result<Vec<f64>> {
    let d = h.ncols();
    if w.dim() != (d, d) || h_r.len() != d {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: H {:?}, W {:?}, h_r {}",
            h.dim(),
            w.dim(),
            h_r.len()
        )));
    }
    let mut g = Graph::new();
    let hn = g.constant(h.clone());
    let wn = g.constant(w.clone());
    let rn = g.row(h_r);
    let out = relation_attention_graph(&mut g, hn, wn, rn)?;
    Ok(g.row_vec(out))
}

pub fn instance_attention(a_pair: &[f64], a_rel: &[f64], k_percent: f64) -> Result<Vec<f64>> {
    if a_pair.len() != a_rel.len() {
        return Err(Error::InvalidArgument("attention lengths differ".into()));
    }
    if !(0.0..=100.0).contains(&k_percent) {
        return Err(Error::InvalidArgument(format!("top-k percentage {k_percent} outside [0, 100]")));
    }
    let mut g = Graph::new();
    let (p, r) = (g.row(a_pair), g.row(a_rel));
    let out = instance_attention_graph(&mut g, p, r, k_percent);
    Ok(g.row_vec(out))
}

pub fn context_embedding(h: &Matrix, attention: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.row(attention);
    let hn = g.constant(h.clone());
    let out = context_graph(&mut g, a, hn);
    g.row_vec(out)
}

pub fn entity_fusion(h_e: &[f64], c: &[f64], side: Side, params: &ProjectionParams) -> Vec<f64> {
    let (w, b) = match side {
        Side::Head => (&params.w_head, &params.b_head),
        Side::Tail => (&params.w_tail, &params.b_tail),
    };
    let mut g = Graph::new();
    let (e, cn) = (g.row(h_e), g.row(c));
    let (wn, bn) = (g.constant(w.clone()), g.constant(b.clone()));
    let out = fusion_graph(&mut g, e, cn, wn, bn);
    g.row_vec(out)
}

fn single_pair(
    enc: &EncodedDocument,
    head: usize,
    tail: usize,
    h_r: Option<&[f64]>,
    params: &ProjectionParams,
    k_percent: f64,
) -> Result<Vec<f64>> {
    if head == tail {
        return Err(Error::InvalidArgument("head and tail must differ".into()));
    }
    let n_e = enc.marked.entity_count;
    if head >= n_e || tail >= n_e {
        return Err(Error::InvalidArgument(format!("entity index out of range ({n_e} entities)")));
    }
    let mut g = Graph::new();
    let doc = DocNodes::constants(&mut g, enc);
    let proj = ProjectionNodes::constants(&mut g, params);
    let rel = match h_r {
        Some(h_r) => {
            let r = g.row(h_r);
            Some(relation_attention_graph(&mut g, doc.h, proj.w, r)?)
        }
        None => None,
    };
    let s = pair_representations_graph(&mut g, &doc, &[(head, tail)], rel, &proj, k_percent, &enc.marked.doc_id);
    Ok(g.row_vec(s))
}

/// Support instance representation: the instance attention path with a
/// relation embedding, the pair path (NOTA) without.
pub fn instance_representation(
    enc: &EncodedDocument,
    head: usize,
    tail: usize,
    relation: Option<(&str, &[f64])>,
    params: &ProjectionParams,
    k_percent: f64,
) -> Result<InstanceRep> {
    let s = single_pair(enc, head, tail, relation.map(|r| r.1), params, k_percent)?;
    Ok(InstanceRep {
        s,
        provenance: Provenance {
            doc_id: enc.marked.doc_id.clone(),
            head,
            relation: relation.map(|r| r.0.to_string()),
            tail,
        },
    })
}

pub fn query_pair_representation(
    enc: &EncodedDocument,
    head: usize,
    tail: usize,
    params: &ProjectionParams,
) -> Result<QueryPairRep> {
    Ok(QueryPairRep {
        q: single_pair(enc, head, tail, None, params, 0.0)?,
        head,
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn pair_attention_examples() {
        assert_eq!(pair_attention(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        let out = pair_attention(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
        assert!(matches!(pair_attention(&[1.0, 0.0], &[0.0, 1.0]), Err(Error::DegenerateOverlap(_))));
    }

    #[test]
    fn relation_attention_examples() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let w = Matrix::eye(2);
        let out = relation_attention(&h, &w, &[1.0, 0.0]).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        assert_abs_diff_eq!(out[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(out[0], 0.6698, epsilon = 1e-4);
        assert_eq!(relation_attention(&h, &w, &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn top_k_count_rounds_up() {
        assert_eq!(top_k_count(0.0, 7), 0);
        assert_eq!(top_k_count(100.0, 7), 7);
        assert_eq!(top_k_count(15.0, 10), 2);
        assert_eq!(top_k_count(25.0, 4), 1);
        assert_eq!(top_k_count(33.0, 3), 1);
        assert_eq!(top_k_count(34.0, 3), 2);
    }

    #[test]
    fn instance_attention_examples() {
        let p = [0.6, 0.3, 0.1];
        let r = [0.1, 0.8, 0.1];
        let same = instance_attention(&p, &r, 0.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(same[i], p[i], epsilon = 1e-15);
        }
        let mean = instance_attention(&p, &r, 100.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(mean[i], (p[i] + r[i]) / 2.0, epsilon = 1e-15);
        }
        let one = instance_attention(&p, &r, 33.0).unwrap();
        let expect = [0.6 / 1.8, 1.1 / 1.8, 0.1 / 1.8];
        for i in 0..3 {
            assert_abs_diff_eq!(one[i], expect[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        assert_eq!(top_k_indices(&[0.25; 4], &[0.25; 4], 50.0), vec![0, 1]);
    }

    #[test]
    fn fusion_bounds() {
        let d = 3;
        let mut p = ProjectionParams {
            w: Matrix::zeros((d, d)),
            w_head: Matrix::zeros((d, 2 * d)),
            w_tail: Matrix::zeros((d, 2 * d)),
            b_head: Matrix::zeros((1, d)),
            b_tail: Matrix::zeros((1, d)),
        };
        assert_eq!(entity_fusion(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], Side::Head, &p), vec![0.0; 3]);
        p.b_tail.fill(10.0);
        let z = entity_fusion(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], Side::Tail, &p);
        assert!(z.iter().all(|&x| x > 0.9999 && x < 1.0));
    }

    #[test]
    fn context_of_one_hot_is_the_row() {
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(context_embedding(&h, &[0.0, 1.0, 0.0]), vec![3.0, 4.0]);
        let mean = context_embedding(&h, &[1.0 / 3.0; 3]);
        assert_abs_diff_eq!(mean[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(mean[1], 4.0, epsilon = 1e-14);
    }
}
