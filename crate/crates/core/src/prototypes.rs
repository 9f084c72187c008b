//! Relation prototypes (mean of support instances) and task-specific NOTA
//! prototypes (base vectors blended with a selected support NOTA instance).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::corpus::Triple;
use crate::encoding::EncodedDocument;
use crate::episode::Episode;
use crate::params::{ParamId, ParamStore};
use crate::representation::{
    pair_representations_graph, relation_attention_graph, DocNodes, InstanceRep, ProjectionNodes,
    ProjectionParams, Provenance,
};
use crate::tape::{argmax, Graph, Matrix, NodeId};
use crate::{Error, Result};

/// Learnable base NOTA vectors, one per row (`N_nota × 2d`).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNotaBank {
    pub vectors: Matrix,
}

impl BaseNotaBank {
    pub fn random(count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let id = Self::register(&mut store, count, dim, rng);
        Self {
            vectors: store.value(id).clone(),
        }
    }

    /// Adds the bank to `store`, uniform in `±1/√dim`.
    pub fn register(store: &mut ParamStore, count: usize, dim: usize, rng: &mut impl Rng) -> ParamId {
        assert!(count >= 1, "the NOTA bank needs at least one vector");
        store.add_uniform("nota_bank", (count, dim), dim, false, rng)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub relation_prototypes: BTreeMap<String, Vec<f64>>,
    pub nota_prototypes: Vec<Vec<f64>>,
    pub relation_embeddings: BTreeMap<String, Vec<f64>>,
    /// Support NOTA instance chosen for each base vector, if any.
    pub selected_nota: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrototypeConfig {
    pub k_percent: f64,
    pub alpha: f64,
    pub tnpg_disabled: bool,
    /// Off: relation instances use the pair attention path only.
    pub instance_attention: bool,
}

/// One support document as seen by the support-instance builder.
pub struct SupportDocInput<'a> {
    pub nodes: DocNodes,
    pub doc_id: &'a str,
    pub entity_count: usize,
    pub triples: &'a [Triple],
}

/// Support instance representations on a graph. Relation rows are labelled
/// with the index of their relation in the episode's target list.
#[derive(Clone, Debug)]
pub struct SupportNodes {
    pub relation_reps: Option<NodeId>,
    pub relation_labels: Vec<usize>,
    pub relation_provenance: Vec<Provenance>,
    pub nota_reps: Option<NodeId>,
    pub nota_provenance: Vec<Provenance>,
}

/// Builds every relation instance (one per triple, so a pair holding `m`
/// target relations yields `m` instances) and every NOTA pair.
#[allow(clippy::too_many_arguments)]
pub fn support_instances_graph(
    g: &mut Graph,
    docs: &[SupportDocInput<'_>],
    targets: &[String],
    relation_embeddings: NodeId,
    proj: &ProjectionNodes,
    k_percent: f64,
    instance_attention: bool,
) -> Result<SupportNodes> {
    let index: BTreeMap<&str, usize> = targets.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let mut rel_parts = Vec::new();
    let mut rel_labels = Vec::new();
    let mut rel_prov = Vec::new();
    let mut nota_parts = Vec::new();
    let mut nota_prov = Vec::new();

    for doc in docs {
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        let mut positive = BTreeSet::new();
        for t in doc.triples {
            if let Some(&r) = index.get(t.relation.as_str()) {
                pairs.push((t.head, t.tail));
                labels.push(r);
                positive.insert((t.head, t.tail));
                rel_prov.push(Provenance {
                    doc_id: doc.doc_id.to_string(),
                    head: t.head,
                    relation: Some(t.relation.clone()),
                    tail: t.tail,
                });
            }
        }
        if !pairs.is_empty() {
            let rel_att = if instance_attention {
                let all = relation_attention_graph(g, doc.nodes.h, proj.w, relation_embeddings)?;
                Some(g.select_rows(all, &labels))
            } else {
                None
            };
            rel_parts.push(pair_representations_graph(
                g, &doc.nodes, &pairs, rel_att, proj, k_percent, doc.doc_id,
            ));
            rel_labels.extend(labels);
        }

        let nota_pairs: Vec<(usize, usize)> = crate::episode::ordered_pairs(doc.entity_count)
            .filter(|p| !positive.contains(p))
            .collect();
        if !nota_pairs.is_empty() {
            nota_parts.push(pair_representations_graph(
                g, &doc.nodes, &nota_pairs, None, proj, 0.0, doc.doc_id,
            ));
            nota_prov.extend(nota_pairs.iter().map(|&(head, tail)| Provenance {
                doc_id: doc.doc_id.to_string(),
                head,
                relation: None,
                tail,
            }));
        }
    }
    let join = |g: &mut Graph, parts: Vec<NodeId>| match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(g.concat_rows(&parts)),
    };
    Ok(SupportNodes {
        relation_reps: join(g, rel_parts),
        relation_labels: rel_labels,
        relation_provenance: rel_prov,
        nota_reps: join(g, nota_parts),
        nota_provenance: nota_prov,
    })
}

#[derive(Clone, Debug)]
pub struct PrototypeNodes {
    /// `R × 2d`, in target order.
    pub relations: NodeId,
    /// `N_nota × 2d`.
    pub nota: NodeId,
    pub selected: Vec<Option<usize>>,
}

/// Row-wise mean of the instances of each relation.
pub fn relation_prototypes_graph(g: &mut Graph, reps: NodeId, labels: &[usize], n_relations: usize) -> Result<NodeId> {
    let rows = (0..n_relations)
        .map(|r| {
            let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == r).map(|(i, _)| i).collect();
            if idx.is_empty() {
                return Err(Error::EmptyInput("relation prototype without support instances"));
            }
            let sel = g.select_rows(reps, &idx);
            Ok(g.mean_rows(sel))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat_rows(&rows))
}

/// For every base vector, the index of the support NOTA instance maximising
/// `s·p_base − max_r s·p^r`; ties go to the lowest index.
pub fn select_nota_indices(nota_reps: &Matrix, bank: &Matrix, relation_protos: &Matrix) -> Vec<usize> {
    let rel_best: Vec<f64> = nota_reps
        .dot(&relation_protos.t())
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let base = nota_reps.dot(&bank.t());
    (0..bank.nrows())
        .map(|i| argmax((0..nota_reps.nrows()).map(|j| base[[j, i]] - rel_best[j])).0)
        .collect()
}

pub fn prototypes_graph(
    g: &mut Graph,
    support: &SupportNodes,
    n_relations: usize,
    bank: NodeId,
    alpha: f64,
    tnpg_disabled: bool,
) -> Result<PrototypeNodes> {
    check_alpha(alpha)?;
    let reps = support
        .relation_reps
        .ok_or(Error::EmptyInput("episode without support relation instances"))?;
    let relations = relation_prototypes_graph(g, reps, &support.relation_labels, n_relations)?;
    let n_bank = g.shape(bank).0;
    let fallback = PrototypeNodes {
        relations,
        nota: bank,
        selected: vec![None; n_bank],
    };
    let Some(nota_reps) = support.nota_reps else {
        return Ok(fallback);
    };
    if tnpg_disabled || alpha == 1.0 {
        return Ok(fallback);
    }
    let chosen = select_nota_indices(g.value(nota_reps), g.value(bank), g.value(relations));
    let picked = g.select_rows(nota_reps, &chosen);
    let base = g.scale(bank, alpha);
    let inst = g.scale(picked, 1.0 - alpha);
    Ok(PrototypeNodes {
        relations,
        nota: g.add(base, inst),
        selected: chosen.into_iter().map(Some).collect(),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn rows_matrix(rows: &[&[f64]]) -> Result<Matrix> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidArgument("vectors of different sizes".into()));
    }
    Ok(Matrix::from_shape_vec((rows.len(), dim), rows.concat()).expect("shape checked"))
}

pub fn relation_prototype(instances: &[InstanceRep]) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::EmptyInput("relation prototype without support instances"));
    }
    let rows: Vec<&[f64]> = instances.iter().map(|i| i.s.as_slice()).collect();
    let mut g = Graph::new();
    let m = g.constant(rows_matrix(&rows)?);
    let out = g.mean_rows(m);
    Ok(g.row_vec(out))
}

/// The support NOTA instance best matching `p_base` against the relation
/// prototypes.
pub fn select_nota_instance<'a>(
    p_base: &[f64],
    nota_reps: &'a [InstanceRep],
    relation_protos: &BTreeMap<String, Vec<f64>>,
) -> Result<&'a InstanceRep> {
    if nota_reps.is_empty() {
        return Err(Error::EmptyInput("no support NOTA instances"));
    }
    if relation_protos.is_empty() {
        return Err(Error::EmptyInput("no relation prototypes"));
    }
    let s: Vec<&[f64]> = nota_reps.iter().map(|r| r.s.as_slice()).collect();
    let p: Vec<&[f64]> = relation_protos.values().map(Vec::as_slice).collect();
    let idx = select_nota_indices(&rows_matrix(&s)?, &rows_matrix(&[p_base])?, &rows_matrix(&p)?);
    Ok(&nota_reps[idx[0]])
}

/// `α·p_base + (1−α)·s`, or `p_base` unchanged without a selected instance.
pub fn nota_prototype(p_base: &[f64], selected: Option<&InstanceRep>, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let Some(sel) = selected else {
        return Ok(p_base.to_vec());
    };
    if sel.s.len() != p_base.len() {
        return Err(Error::InvalidArgument("vectors of different sizes".into()));
    }
    if alpha == 1.0 {
        return Ok(p_base.to_vec());
    }
    Ok(p_base.iter().zip(&sel.s).map(|(b, s)| alpha * b + (1.0 - alpha) * s).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupportInstances {
    pub relations: BTreeMap<String, Vec<InstanceRep>>,
    pub nota: Vec<InstanceRep>,
}

fn relation_matrix(targets: &[String], embeddings: &BTreeMap<String, Vec<f64>>) -> Result<Matrix> {
    let rows = targets
        .iter()
        .map(|r| {
            embeddings
                .get(r)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::InvalidArgument(format!("no embedding for relation {r}")))
        })
        .collect::<Result<Vec<_>>>()?;
    rows_matrix(&rows)
}

fn support_on_graph(
    g: &mut Graph,
    episode: &Episode,
    encodings: &[EncodedDocument],
    relation_embeddings: &BTreeMap<String, Vec<f64>>,
    params: &ProjectionParams,
    k_percent: f64,
    instance_attention: bool,
) -> Result<SupportNodes> {
    if encodings.len() != episode.support.len() {
        return Err(Error::InvalidArgument(format!(
            "{} encodings for {} support documents",
            encodings.len(),
            episode.support.len()
        )));
    }
    let proj = ProjectionNodes::constants(g, params);
    let emb = relation_matrix(&episode.target_relations, relation_embeddings)?;
    let emb = g.constant(emb);
    let docs: Vec<SupportDocInput<'_>> = episode
        .support
        .iter()
        .zip(encodings)
        .map(|(s, enc)| SupportDocInput {
            nodes: DocNodes::constants(g, enc),
            doc_id: &s.doc_id,
            entity_count: enc.marked.entity_count,
            triples: &s.triples,
        })
        .collect();
    support_instances_graph(g, &docs, &episode.target_relations, emb, &proj, k_percent, instance_attention)
}

fn rows_of(g: &Graph, node: Option<NodeId>) -> Vec<Vec<f64>> {
    node.map(|n| g.value(n).rows().into_iter().map(|r| r.to_vec()).collect())
        .unwrap_or_default()
}

pub fn collect_support_instances(
    episode: &Episode,
    encodings: &[EncodedDocument],
    relation_embeddings: &BTreeMap<String, Vec<f64>>,
    params: &ProjectionParams,
    k_percent: f64,
) -> Result<SupportInstances> {
    let mut g = Graph::new();
    let nodes = support_on_graph(&mut g, episode, encodings, relation_embeddings, params, k_percent, true)?;
    let mut out = SupportInstances::default();
    for (s, prov) in rows_of(&g, nodes.relation_reps).into_iter().zip(nodes.relation_provenance) {
        let r = prov.relation.clone().expect("relation instance");
        out.relations.entry(r).or_default().push(InstanceRep { s, provenance: prov });
    }
    out.nota = rows_of(&g, nodes.nota_reps)
        .into_iter()
        .zip(nodes.nota_provenance)
        .map(|(s, provenance)| InstanceRep { s, provenance })
        .collect();
    Ok(out)
}

pub fn build_prototype_set(
    episode: &Episode,
    encodings: &[EncodedDocument],
    relation_embeddings: &BTreeMap<String, Vec<f64>>,
    params: &ProjectionParams,
    bank: &BaseNotaBank,
    cfg: &PrototypeConfig,
) -> Result<PrototypeSet> {
    let mut g = Graph::new();
    let support = support_on_graph(
        &mut g,
        episode,
        encodings,
        relation_embeddings,
        params,
        cfg.k_percent,
        cfg.instance_attention,
    )?;
    let bank_node = g.constant(bank.vectors.clone());
    let protos = prototypes_graph(
        &mut g,
        &support,
        episode.target_relations.len(),
        bank_node,
        cfg.alpha,
        cfg.tnpg_disabled,
    )?;
    Ok(prototype_set_from_graph(&g, &protos, &episode.target_relations, relation_embeddings))
}

pub fn prototype_set_from_graph(
    g: &Graph,
    protos: &PrototypeNodes,
    targets: &[String],
    relation_embeddings: &BTreeMap<String, Vec<f64>>,
) -> PrototypeSet {
    PrototypeSet {
        relation_prototypes: targets.iter().cloned().zip(rows_of(g, Some(protos.relations))).collect(),
        nota_prototypes: rows_of(g, Some(protos.nota)),
        relation_embeddings: targets
            .iter()
            .filter_map(|r| relation_embeddings.get(r).map(|e| (r.clone(), e.clone())))
            .collect(),
        selected_nota: protos.selected.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(s: Vec<f64>) -> InstanceRep {
        InstanceRep {
            s,
            provenance: Provenance {
                doc_id: "d".into(),
                head: 0,
                relation: None,
                tail: 1,
            },
        }
    }

    #[test]
    fn prototype_is_the_mean() {
        assert_eq!(relation_prototype(&[rep(vec![0.5, -0.25])]).unwrap(), vec![0.5, -0.25]);
        assert_eq!(relation_prototype(&[rep(vec![0.5, -0.25]), rep(vec![-0.5, 0.25])]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(relation_prototype(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn nota_selection_examples() {
        let protos: BTreeMap<String, Vec<f64>> = [("r".to_string(), vec![0.0, 0.0])].into();
        let one = [rep(vec![-1.0, 0.0])];
        assert_eq!(select_nota_instance(&[1.0, 0.0], &one, &protos).unwrap().s, vec![-1.0, 0.0]);
        let two = [rep(vec![0.3, 0.0]), rep(vec![0.7, 0.0])];
        assert_eq!(select_nota_instance(&[1.0, 0.0], &two, &protos).unwrap().s, vec![0.7, 0.0]);
        let tie = [rep(vec![0.5, 0.1]), rep(vec![0.5, 0.2])];
        assert_eq!(select_nota_instance(&[1.0, 0.0], &tie, &protos).unwrap().s, vec![0.5, 0.1]);
        assert!(select_nota_instance(&[1.0, 0.0], &[], &protos).is_err());
    }

    #[test]
    fn nota_prototype_examples() {
        let s = rep(vec![0.0, 1.0]);
        let mixed = nota_prototype(&[1.0, 0.0], Some(&s), 0.9).unwrap();
        assert!((mixed[0] - 0.9).abs() < 1e-15 && (mixed[1] - 0.1).abs() < 1e-15);
        assert_eq!(nota_prototype(&[1.0, 0.0], Some(&s), 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(nota_prototype(&[1.0, 0.0], Some(&s), 0.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(nota_prototype(&[1.0, 0.0], None, 0.5).unwrap(), vec![1.0, 0.0]);
        assert!(nota_prototype(&[1.0, 0.0], Some(&s), 1.5).is_err());
    }
}
