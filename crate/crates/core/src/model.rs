//! Model state and the differentiable per-episode forward pass.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Triple};
use crate::encoding::{
    encode_graph, insert_markers, EncodedDocument, EncoderProvider, MarkedDocument, ToyEncoderConfig, ToyProvider,
};
use crate::episode::{ordered_pairs, Episode};
use crate::objectives::{bce_graph, contrastive_graph, log_weight_graph, ContrastiveVariant, LossBreakdown};
use crate::params::{ParamArchive, ParamId, ParamStore};
use crate::prototypes::{
    prototype_set_from_graph, prototypes_graph, BaseNotaBank, PrototypeNodes, PrototypeSet, SupportDocInput,
    SupportNodes,
};
use crate::representation::{pair_representations_graph, DocNodes, InstanceRep, ProjectionIds, ProjectionNodes};
use crate::tape::{Graph, Matrix, NodeId};
use crate::{Error, Result};

/// Environment variable naming the directory of local encoder archives.
pub const MODEL_DIR_ENV: &str = "FEWDOC_MODEL_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    InDomain,
    CrossDomain,
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(Self::InDomain),
            "cross_domain" => Ok(Self::CrossDomain),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InDomain => "in_domain",
            Self::CrossDomain => "cross_domain",
        })
    }
}

/// `(k, τ, N_nota, α, λ)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub top_k_percent: f64,
    pub tau: f64,
    pub n_nota: usize,
    pub alpha: f64,
    pub lambda: f64,
}

impl Hyperparameters {
    pub fn for_family(family: TaskFamily) -> Self {
        match family {
            TaskFamily::InDomain => Self {
                top_k_percent: 15.0,
                tau: 0.4,
                n_nota: 15,
                alpha: 0.9,
                lambda: 0.1,
            },
            TaskFamily::CrossDomain => Self {
                top_k_percent: 10.0,
                tau: 0.4,
                n_nota: 20,
                alpha: 0.95,
                lambda: 0.1,
            },
        }
    }

    pub fn as_tuple(&self) -> (f64, f64, usize, f64, f64) {
        (self.top_k_percent, self.tau, self.n_nota, self.alpha, self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=100.0).contains(&self.top_k_percent) {
            return bad(format!("top-k percentage {} outside [0, 100]", self.top_k_percent));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        if self.n_nota == 0 {
            return bad("NOTA prototype count must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        Ok(())
    }
}

/// `toy` or `pretrained:<name>`; the latter loads `<name>.json` from
/// `$FEWDOC_MODEL_DIR` (default `models/`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderSpec {
    Toy,
    Pretrained(String),
}

impl FromStr for EncoderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "toy" => Ok(Self::Toy),
            Some(("pretrained", name)) if !name.is_empty() => Ok(Self::Pretrained(name.to_string())),
            _ => Err(Error::Config(format!("unknown encoder {s:?} (expected toy or pretrained:<name>)"))),
        }
    }
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Toy => f.write_str("toy"),
            Self::Pretrained(n) => write!(f, "pretrained:{n}"),
        }
    }
}

impl Serialize for EncoderSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EncoderSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// On-disk encoder archive for `pretrained:<name>`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderArchive {
    pub config: ToyEncoderConfig,
    pub params: ParamArchive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub toy: ToyEncoderConfig,
    pub seed: u64,
    pub hyper: Hyperparameters,
    pub contrastive: ContrastiveVariant,
    pub disable_tnpg: bool,
    pub disable_ibpc: bool,
    pub freeze_relation_encoder: bool,
}

impl ModelConfig {
    pub fn new(family: TaskFamily) -> Self {
        Self {
            encoder: EncoderSpec::Toy,
            toy: ToyEncoderConfig::default(),
            seed: 0,
            hyper: Hyperparameters::for_family(family),
            contrastive: ContrastiveVariant::Rcl,
            disable_tnpg: false,
            disable_ibpc: false,
            freeze_relation_encoder: false,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    provider: Box<dyn EncoderProvider>,
    pub projection: ProjectionIds,
    pub bank: ParamId,
    marked: Mutex<HashMap<String, Arc<MarkedDocument>>>,
}

/// Everything recorded while running one episode forward.
pub struct EpisodeGraph {
    pub graph: Graph,
    pub targets: Vec<String>,
    pub relation_embeddings: NodeId,
    pub support: SupportNodes,
    pub prototypes: PrototypeNodes,
    pub query_pairs: Vec<(usize, usize)>,
    /// `|query_pairs| × 2d`; absent when the query has fewer than two entities.
    pub queries: Option<NodeId>,
    pub loss: Option<NodeId>,
    pub breakdown: LossBreakdown,
}

impl Model {
    /// Seeded model with the encoder named in `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let provider: Box<dyn EncoderProvider> = match &config.encoder {
            EncoderSpec::Toy => Box::new(ToyProvider::new(&config.toy, &mut params, &mut rng)),
            EncoderSpec::Pretrained(name) => {
                let dir = std::env::var_os(MODEL_DIR_ENV).map_or_else(|| PathBuf::from("models"), PathBuf::from);
                let path = dir.join(format!("{name}.json"));
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let archive: EncoderArchive = crate::corpus::decode_json(&path.display().to_string(), &text)?;
                let provider = ToyProvider::new(&archive.config, &mut params, &mut rng);
                params.load_matching(&archive.params)?;
                Box::new(provider)
            }
        };
        Self::assemble(config, params, provider, &mut rng)
    }

    /// Model around a caller-supplied encoder whose parameters already live
    /// in `params`.
    pub fn with_provider(config: ModelConfig, params: ParamStore, provider: Box<dyn EncoderProvider>) -> Result<Self> {
        config.hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Self::assemble(config, params, provider, &mut rng)
    }

    fn assemble(
        config: ModelConfig,
        mut params: ParamStore,
        provider: Box<dyn EncoderProvider>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = provider.hidden_size();
        let projection = ProjectionIds::register(&mut params, d, rng);
        let bank = BaseNotaBank::register(&mut params, config.hyper.n_nota, 2 * d, rng);
        if config.freeze_relation_encoder {
            for id in provider.relation_param_ids() {
                params.set_trainable(id, false);
            }
        }
        Ok(Self {
            config,
            params,
            provider,
            projection,
            bank,
            marked: Mutex::new(HashMap::new()),
        })
    }

    pub fn provider(&self) -> &dyn EncoderProvider {
        self.provider.as_ref()
    }

    pub fn hidden_size(&self) -> usize {
        self.provider.hidden_size()
    }

    pub fn bank_values(&self) -> BaseNotaBank {
        BaseNotaBank {
            vectors: self.params.value(self.bank).clone(),
        }
    }

    /// Marker-inserted token sequence of a corpus document, memoised.
    pub fn marked_document(&self, corpus: &Corpus, doc_id: &str) -> Result<Arc<MarkedDocument>> {
        if let Some(m) = self.marked.lock().unwrap().get(doc_id) {
            return Ok(Arc::clone(m));
        }
        let doc = corpus.document(doc_id)?;
        let m = Arc::new(insert_markers(doc, self.provider.tokenizer())?);
        self.marked
            .lock()
            .unwrap()
            .entry(doc_id.to_string())
            .or_insert_with(|| Arc::clone(&m));
        Ok(m)
    }

    fn doc_nodes(&self, g: &mut Graph, corpus: &Corpus, doc_id: &str) -> Result<(DocNodes, Arc<MarkedDocument>)> {
        let marked = self.marked_document(corpus, doc_id)?;
        let (h, a) = encode_graph(g, self.provider(), &self.params, &marked)?;
        Ok((DocNodes::build(g, h, a, &marked), marked))
    }

    fn relation_nodes(&self, g: &mut Graph, corpus: &Corpus, targets: &[String]) -> Result<NodeId> {
        let rows = targets
            .iter()
            .map(|r| {
                let rel = corpus.relation(r)?;
                self.provider.relation_encode(g, &self.params, &rel.encoder_text())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }

    /// Runs an episode forward. With `with_loss`, the BCE and contrastive
    /// terms are added using the query gold triples.
    pub fn forward(&self, corpus: &Corpus, episode: &Episode, with_loss: bool) -> Result<EpisodeGraph> {
        let hyper = &self.config.hyper;
        let mut g = Graph::new();
        let targets = episode.target_relations.clone();
        if targets.is_empty() {
            return Err(Error::InvalidArgument("episode without target relations".into()));
        }
        let proj: ProjectionNodes = self.projection.nodes(&mut g, &self.params);
        let bank = g.param(&self.params, self.bank);
        let relation_embeddings = self.relation_nodes(&mut g, corpus, &targets)?;

        let mut support_docs = Vec::with_capacity(episode.support.len());
        for s in &episode.support {
            let (nodes, marked) = self.doc_nodes(&mut g, corpus, &s.doc_id)?;
            support_docs.push((nodes, marked.entity_count));
        }
        let inputs: Vec<SupportDocInput<'_>> = episode
            .support
            .iter()
            .zip(&support_docs)
            .map(|(s, &(nodes, entity_count))| SupportDocInput {
                nodes,
                doc_id: &s.doc_id,
                entity_count,
                triples: &s.triples,
            })
            .collect();
        let support = crate::prototypes::support_instances_graph(
            &mut g,
            &inputs,
            &targets,
            relation_embeddings,
            &proj,
            hyper.top_k_percent,
            !self.config.disable_ibpc,
        )?;
        let prototypes = prototypes_graph(
            &mut g,
            &support,
            targets.len(),
            bank,
            hyper.alpha,
            self.config.disable_tnpg,
        )?;
        if self.config.disable_tnpg && g.value(prototypes.nota) != self.params.value(self.bank) {
            return Err(Error::Invariant(
                "NOTA prototypes differ from the base bank with TNPG disabled".into(),
            ));
        }

        let (query, query_marked) = self.doc_nodes(&mut g, corpus, &episode.query_doc_id)?;
        let query_pairs: Vec<(usize, usize)> = ordered_pairs(query_marked.entity_count).collect();
        let queries = (!query_pairs.is_empty()).then(|| {
            pair_representations_graph(&mut g, &query, &query_pairs, None, &proj, 0.0, &episode.query_doc_id)
        });

        let mut out = EpisodeGraph {
            graph: g,
            targets,
            relation_embeddings,
            support,
            prototypes,
            query_pairs,
            queries,
            loss: None,
            breakdown: LossBreakdown::default(),
        };
        if with_loss {
            self.attach_loss(&mut out, &episode.gold_query_triples);
        }
        Ok(out)
    }

    fn attach_loss(&self, ep: &mut EpisodeGraph, gold: &[Triple]) {
        let hyper = &self.config.hyper;
        let g = &mut ep.graph;
        let index: BTreeMap<&str, usize> = ep.targets.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
        let pair_index: HashMap<(usize, usize), usize> =
            ep.query_pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut labels = Matrix::zeros((ep.query_pairs.len(), ep.targets.len()));
        for t in gold {
            if let (Some(&r), Some(&p)) = (index.get(t.relation.as_str()), pair_index.get(&(t.head, t.tail))) {
                labels[[p, r]] = 1.0;
            }
        }
        let bce = match ep.queries {
            Some(q) => bce_graph(g, q, ep.prototypes.relations, ep.prototypes.nota, &labels),
            None => {
                log::warn!("query document has fewer than two entities; classification loss is zero");
                g.constant(Matrix::zeros((1, 1)))
            }
        };
        let (rcl, outcome) = match (self.config.contrastive, ep.support.relation_reps) {
            (ContrastiveVariant::Off, _) | (_, None) => (None, None),
            (variant, Some(reps)) => {
                let lw = (variant == ContrastiveVariant::Rcl).then(|| log_weight_graph(g, ep.relation_embeddings));
                let (node, outcome) = contrastive_graph(g, reps, &ep.support.relation_labels, lw, hyper.tau);
                (node, Some(outcome))
            }
        };
        let bce_value = g.scalar(bce);
        let rcl_value = rcl.map_or(0.0, |n| g.scalar(n));
        let total = match rcl {
            Some(r) => {
                let weighted = g.scale(r, hyper.lambda);
                g.add(bce, weighted)
            }
            None => bce,
        };
        ep.loss = Some(total);
        ep.breakdown = LossBreakdown {
            bce: bce_value,
            rcl: rcl_value,
            total: g.scalar(total),
            query_pairs: ep.query_pairs.len(),
            support_instances: ep.support.relation_labels.len(),
            skipped_anchors: outcome.map_or(0, |o| o.skipped),
        };
    }

    /// Loss breakdown plus gradients of every trainable parameter.
    pub fn loss_and_gradients(&self, corpus: &Corpus, episode: &Episode) -> Result<(LossBreakdown, Vec<(ParamId, Matrix)>)> {
        let ep = self.forward(corpus, episode, true)?;
        let loss = ep.loss.expect("loss requested");
        Ok((ep.breakdown, ep.graph.param_grads(loss)))
    }

    pub fn prototype_set(&self, corpus: &Corpus, episode: &Episode) -> Result<PrototypeSet> {
        let ep = self.forward(corpus, episode, false)?;
        let embeddings: BTreeMap<String, Vec<f64>> = ep
            .targets
            .iter()
            .cloned()
            .zip(ep.graph.value(ep.relation_embeddings).rows().into_iter().map(|r| r.to_vec()))
            .collect();
        Ok(prototype_set_from_graph(&ep.graph, &ep.prototypes, &ep.targets, &embeddings))
    }

    /// Support relation instances with their representations.
    pub fn support_instances(&self, corpus: &Corpus, episode: &Episode) -> Result<(Vec<InstanceRep>, PrototypeSet)> {
        let ep = self.forward(corpus, episode, false)?;
        let reps = match ep.support.relation_reps {
            Some(n) => ep
                .graph
                .value(n)
                .rows()
                .into_iter()
                .zip(&ep.support.relation_provenance)
                .map(|(r, p)| InstanceRep {
                    s: r.to_vec(),
                    provenance: p.clone(),
                })
                .collect(),
            None => Vec::new(),
        };
        let embeddings: BTreeMap<String, Vec<f64>> = ep
            .targets
            .iter()
            .cloned()
            .zip(ep.graph.value(ep.relation_embeddings).rows().into_iter().map(|r| r.to_vec()))
            .collect();
        let set = prototype_set_from_graph(&ep.graph, &ep.prototypes, &ep.targets, &embeddings);
        Ok((reps, set))
    }

    /// Plain-value encoding of a corpus document.
    pub fn encode(&self, corpus: &Corpus, doc_id: &str) -> Result<EncodedDocument> {
        let marked = self.marked_document(corpus, doc_id)?;
        crate::encoding::encode_long_document(&marked, self.provider(), &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_spec_parsing() {
        assert_eq!("toy".parse::<EncoderSpec>().unwrap(), EncoderSpec::Toy);
        assert_eq!(
            "pretrained:bert-base".parse::<EncoderSpec>().unwrap(),
            EncoderSpec::Pretrained("bert-base".into())
        );
        assert!("pretrained:".parse::<EncoderSpec>().is_err());
        assert!("bert".parse::<EncoderSpec>().is_err());
    }

    #[test]
    fn family_defaults() {
        assert_eq!(Hyperparameters::for_family(TaskFamily::InDomain).as_tuple(), (15.0, 0.4, 15, 0.9, 0.1));
        assert_eq!(Hyperparameters::for_family(TaskFamily::CrossDomain).as_tuple(), (10.0, 0.4, 20, 0.95, 0.1));
        assert!("other".parse::<TaskFamily>().is_err());
    }
}
