//! Marker insertion, document/relation encoding and mention pooling.
//!
//! Every mention is wrapped in a pair of `∗` marker tokens. The embedding
//! and attention row of the opening marker stand for the mention. Encoders
//! sit behind [`EncoderProvider`] and record their computation on a
//! [`Graph`] so gradients reach their weights.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, RelationType};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Graph, Matrix, NodeId};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MARKER_ID: u32 = 3;
const RESERVED: u32 = 4;

pub const MARKER: &str = "∗";

pub trait SubwordTokenizer: Send + Sync {
    fn tokenize_word(&self, word: &str) -> Vec<u32>;

    fn tokenize_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().flat_map(|w| self.tokenize_word(w)).collect()
    }

    fn vocab_size(&self) -> usize;
}

/// Splits a lowercased word into fixed-width character pieces and hashes
/// each piece (continuations prefixed `##`) into the vocabulary. The marker
/// string always maps to [`MARKER_ID`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingTokenizer {
    pub vocab_size: usize,
    pub piece_chars: usize,
}

impl HashingTokenizer {
    pub fn new(vocab_size: usize, piece_chars: usize) -> Self {
        assert!(vocab_size > RESERVED as usize, "vocabulary too small");
        assert!(piece_chars > 0);
        Self {
            vocab_size,
            piece_chars,
        }
    }

    fn piece_id(&self, piece: &str) -> u32 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in piece.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        RESERVED + (h % (self.vocab_size as u64 - RESERVED as u64)) as u32
    }
}

impl SubwordTokenizer for HashingTokenizer {
    fn tokenize_word(&self, word: &str) -> Vec<u32> {
        if word == MARKER {
            return vec![MARKER_ID];
        }
        let chars: Vec<char> = word.to_lowercase().chars().collect();
        chars
            .chunks(self.piece_chars)
            .enumerate()
            .map(|(i, c)| {
                let piece: String = c.iter().collect();
                if i == 0 {
                    self.piece_id(&piece)
                } else {
                    self.piece_id(&format!("##{piece}"))
                }
            })
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkedDocument {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    /// `(entity, mention ordinal)` → index of the opening marker.
    pub mention_marker_index: BTreeMap<(usize, usize), usize>,
    /// `(entity, mention ordinal)` → index of the closing marker.
    pub mention_close_index: BTreeMap<(usize, usize), usize>,
    /// Number of tokens before markers were added.
    pub base_token_count: usize,
    pub entity_count: usize,
}

impl MarkedDocument {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Opening-marker positions of an entity, by mention ordinal.
    pub fn entity_markers(&self, entity: usize) -> Vec<usize> {
        self.mention_marker_index
            .range((entity, 0)..(entity + 1, 0))
            .map(|(_, &i)| i)
            .collect()
    }
}

/// Wraps every mention in `∗ … ∗`. Mentions are ordered by
/// `(start, −end, entity)`; at one boundary, closing markers of spans
/// ending there come before opening markers of spans starting there, and
/// closings are emitted in reverse opening order so nested spans stay
/// nested.
pub fn insert_markers(doc: &Document, tokenizer: &dyn SubwordTokenizer) -> Result<MarkedDocument> {
    let offsets = doc.sentence_offsets();
    let words: Vec<&str> = doc.sentences.iter().flatten().map(String::as_str).collect();
    let pieces: Vec<Vec<u32>> = words.iter().map(|w| tokenizer.tokenize_word(w)).collect();

    // (start, end, entity, ordinal) in global word coordinates
    let mut spans = Vec::new();
    for (ei, entity) in doc.entities.iter().enumerate() {
        for (mi, m) in entity.mentions.iter().enumerate() {
            let base = offsets[m.sentence_index];
            let (start, end) = (base + m.token_span.0, base + m.token_span.1);
            if pieces[start..end].iter().all(Vec::is_empty) {
                return Err(Error::EmptyMention {
                    doc_id: doc.doc_id.clone(),
                    entity: ei,
                    mention: mi,
                });
            }
            spans.push((start, end, ei, mi));
        }
    }
    let key = |s: &(usize, usize, usize, usize)| (s.0, std::cmp::Reverse(s.1), s.2, s.3);
    spans.sort_by_key(key);

    let n_words = words.len();
    let mut opens: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_words + 1];
    let mut closes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_words + 1];
    for s in &spans {
        opens[s.0].push((s.2, s.3));
    }
    for s in spans.iter().rev() {
        closes[s.1].push((s.2, s.3));
    }

    let mut tokens = Vec::with_capacity(pieces.iter().map(Vec::len).sum::<usize>() + 2 * spans.len());
    let mut open_idx = BTreeMap::new();
    let mut close_idx = BTreeMap::new();
    for w in 0..=n_words {
        for &m in &closes[w] {
            close_idx.insert(m, tokens.len());
            tokens.push(MARKER_ID);
        }
        if w == n_words {
            break;
        }
        for &m in &opens[w] {
            open_idx.insert(m, tokens.len());
            tokens.push(MARKER_ID);
        }
        tokens.extend_from_slice(&pieces[w]);
    }
    Ok(MarkedDocument {
        doc_id: doc.doc_id.clone(),
        base_token_count: pieces.iter().map(Vec::len).sum(),
        tokens,
        mention_marker_index: open_idx,
        mention_close_index: close_idx,
        entity_count: doc.entities.len(),
    })
}

/// Produces contextual token embeddings and last-layer attention for token
/// windows, plus sequence-level relation embeddings.
pub trait EncoderProvider: Send + Sync {
    fn hidden_size(&self) -> usize;

    /// Longest window accepted by [`EncoderProvider::encode_window`].
    fn max_len(&self) -> usize;

    fn tokenizer(&self) -> &dyn SubwordTokenizer;

    /// Returns `(H, A)` nodes: `n × d` embeddings and an `n × n`
    /// row-stochastic attention matrix (average over last-layer heads).
    fn encode_window(&self, g: &mut Graph, params: &ParamStore, ids: &[u32]) -> Result<(NodeId, NodeId)>;

    /// `1 × d` sequence-level embedding of `text`.
    fn relation_encode(&self, g: &mut Graph, params: &ParamStore, text: &str) -> Result<NodeId>;

    /// Parameters used only for relation descriptions.
    fn relation_param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub piece_chars: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn: 64,
            max_len: 512,
            piece_chars: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Post-norm transformer encoder with learned positions.
#[derive(Clone, Debug)]
pub struct ToyTransformer {
    cfg: ToyEncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_gain: ParamId,
    emb_ln_bias: ParamId,
    layers: Vec<LayerParams>,
}

const LN_EPS: f64 = 1e-5;

impl ToyTransformer {
    pub fn new(prefix: &str, cfg: &ToyEncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        assert!(cfg.hidden.is_multiple_of(cfg.heads), "hidden size must divide into heads");
        let d = cfg.hidden;
        let ln = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{name}.gain"), Matrix::ones((1, d)), false),
                store.add(format!("{name}.bias"), Matrix::zeros((1, d)), false),
            )
        };
        let tok_emb = store.add_uniform(format!("{prefix}.tok_emb"), (cfg.vocab_size, d), d, true, rng);
        let pos_emb = store.add_uniform(format!("{prefix}.pos_emb"), (cfg.max_len, d), d, true, rng);
        let (emb_ln_gain, emb_ln_bias) = ln(store, format!("{prefix}.emb_ln"));
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let wq = store.add_uniform(format!("{p}.wq"), (d, d), d, true, rng);
                let wk = store.add_uniform(format!("{p}.wk"), (d, d), d, true, rng);
                let wv = store.add_uniform(format!("{p}.wv"), (d, d), d, true, rng);
                let wo = store.add_uniform(format!("{p}.wo"), (d, d), d, true, rng);
                let bo = store.add(format!("{p}.bo"), Matrix::zeros((1, d)), false);
                let (ln1_gain, ln1_bias) = ln(store, format!("{p}.ln1"));
                let w1 = store.add_uniform(format!("{p}.w1"), (cfg.ffn, d), d, true, rng);
                let b1 = store.add(format!("{p}.b1"), Matrix::zeros((1, cfg.ffn)), false);
                let w2 = store.add_uniform(format!("{p}.w2"), (d, cfg.ffn), cfg.ffn, true, rng);
                let b2 = store.add(format!("{p}.b2"), Matrix::zeros((1, d)), false);
                let (ln2_gain, ln2_bias) = ln(store, format!("{p}.ln2"));
                LayerParams {
                    wq,
                    wk,
                    wv,
                    wo,
                    bo,
                    ln1_gain,
                    ln1_bias,
                    w1,
                    b1,
                    w2,
                    b2,
                    ln2_gain,
                    ln2_bias,
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
        }
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    /// Parameters owned by this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb, self.emb_ln_gain, self.emb_ln_bias];
        for l in &self.layers {
            ids.extend([
                l.wq, l.wk, l.wv, l.wo, l.bo, l.ln1_gain, l.ln1_bias, l.w1, l.b1, l.w2, l.b2, l.ln2_gain,
                l.ln2_bias,
            ]);
        }
        ids
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, ids: &[u32]) -> Result<(NodeId, NodeId)> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Encoder("empty token sequence".into()));
        }
        if n > self.cfg.max_len {
            return Err(Error::Encoder(format!("{n} tokens exceed window of {}", self.cfg.max_len)));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::Encoder(format!("token id {bad} outside vocabulary")));
        }
        let d = self.cfg.hidden;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();

        let tok = g.param(params, self.tok_emb);
        let pos = g.param(params, self.pos_emb);
        let te = g.select_rows(tok, &idx);
        let pe = g.select_rows(pos, &positions);
        let x = g.add(te, pe);
        let (lg, lb) = (g.param(params, self.emb_ln_gain), g.param(params, self.emb_ln_bias));
        let mut x = g.layer_norm(x, lg, lb, LN_EPS);

        let mut last_attention = None;
        for layer in &self.layers {
            let p = |g: &mut Graph, id| g.param(params, id);
            let (wq, wk, wv, wo, bo) = (p(g, layer.wq), p(g, layer.wk), p(g, layer.wv), p(g, layer.wo), p(g, layer.bo));
            let q = g.matmul_t(x, wq);
            let k = g.matmul_t(x, wk);
            let v = g.matmul_t(x, wv);
            let mut head_out = Vec::with_capacity(heads);
            let mut att_sum: Option<NodeId> = None;
            for h in 0..heads {
                let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
                let qh = g.select_cols(q, &cols);
                let kh = g.select_cols(k, &cols);
                let vh = g.select_cols(v, &cols);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = g.softmax_rows(scores);
                head_out.push(g.matmul(att, vh));
                att_sum = Some(match att_sum {
                    None => att,
                    Some(s) => g.add(s, att),
                });
            }
            let att_mean = g.scale(att_sum.expect("at least one head"), 1.0 / heads as f64);
            last_attention = Some(att_mean);
            let o = g.concat_cols(&head_out);
            let o = g.matmul_t(o, wo);
            let o = g.add_row(o, bo);
            let res = g.add(x, o);
            let (g1, b1n) = (p(g, layer.ln1_gain), p(g, layer.ln1_bias));
            x = g.layer_norm(res, g1, b1n, LN_EPS);

            let (w1, b1, w2, b2) = (p(g, layer.w1), p(g, layer.b1), p(g, layer.w2), p(g, layer.b2));
            let f = g.matmul_t(x, w1);
            let f = g.add_row(f, b1);
            let f = g.gelu(f);
            let f = g.matmul_t(f, w2);
            let f = g.add_row(f, b2);
            let res = g.add(x, f);
            let (g2, b2n) = (p(g, layer.ln2_gain), p(g, layer.ln2_bias));
            x = g.layer_norm(res, g2, b2n, LN_EPS);
        }
        let attention = match last_attention {
            Some(a) => a,
            None => g.constant(Matrix::from_elem((n, n), 1.0 / n as f64)),
        };
        Ok((x, attention))
    }
}

/// Seeded random-init transformer pair: one encoder for documents and one
/// for relation descriptions.
pub struct ToyProvider {
    tokenizer: HashingTokenizer,
    document: ToyTransformer,
    relation: ToyTransformer,
}

impl ToyProvider {
    pub fn new(cfg: &ToyEncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            tokenizer: HashingTokenizer::new(cfg.vocab_size, cfg.piece_chars),
            document: ToyTransformer::new("doc_encoder", cfg, store, rng),
            relation: ToyTransformer::new("rel_encoder", cfg, store, rng),
        }
    }

    pub fn document_encoder(&self) -> &ToyTransformer {
        &self.document
    }

    pub fn relation_encoder(&self) -> &ToyTransformer {
        &self.relation
    }
}

impl EncoderProvider for ToyProvider {
    fn hidden_size(&self) -> usize {
        self.document.cfg.hidden
    }

    fn max_len(&self) -> usize {
        self.document.cfg.max_len
    }

    fn tokenizer(&self) -> &dyn SubwordTokenizer {
        &self.tokenizer
    }

    fn encode_window(&self, g: &mut Graph, params: &ParamStore, ids: &[u32]) -> Result<(NodeId, NodeId)> {
        self.document.forward(g, params, ids)
    }

    fn relation_encode(&self, g: &mut Graph, params: &ParamStore, text: &str) -> Result<NodeId> {
        let mut ids = vec![CLS_ID];
        ids.extend(self.tokenizer.tokenize_text(text));
        ids.truncate(self.relation.cfg.max_len);
        let (h, _) = self.relation.forward(g, params, &ids)?;
        Ok(g.select_rows(h, &[0]))
    }

    fn relation_param_ids(&self) -> Vec<ParamId> {
        self.relation.param_ids()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDocument {
    /// `N_t × d`
    pub h: Matrix,
    /// `N_t × N_t`, rows sum to one.
    pub a: Matrix,
    pub marked: MarkedDocument,
}

/// Window start offsets: stride `max_len / 2`, last window reaching the end.
pub fn window_starts(token_count: usize, max_len: usize) -> Vec<usize> {
    if token_count <= max_len {
        return vec![0];
    }
    let stride = (max_len / 2).max(1);
    let mut starts = vec![0];
    while starts.last().unwrap() + max_len < token_count {
        starts.push(starts.last().unwrap() + stride);
    }
    starts
}

/// Encodes a marked document on `g`, splitting it into overlapping windows
/// when it exceeds the provider's window. Embeddings are averaged over the
/// covering windows; attention rows are averaged and renormalised.
pub fn encode_graph(
    g: &mut Graph,
    provider: &dyn EncoderProvider,
    params: &ParamStore,
    marked: &MarkedDocument,
) -> Result<(NodeId, NodeId)> {
    let n = marked.token_count();
    let max_len = provider.max_len();
    let wrap = |e: Error| Error::Encoder(format!("document {} ({n} tokens): {e}", marked.doc_id));
    if n <= max_len {
        return provider.encode_window(g, params, &marked.tokens).map_err(wrap);
    }
    let d = provider.hidden_size();
    let mut coverage = vec![0usize; n];
    let mut h_sum: Option<NodeId> = None;
    let mut a_sum: Option<NodeId> = None;
    for start in window_starts(n, max_len) {
        let end = (start + max_len).min(n);
        let (hw, aw) = provider
            .encode_window(g, params, &marked.tokens[start..end])
            .map_err(wrap)?;
        coverage[start..end].iter_mut().for_each(|c| *c += 1);
        let hp = g.pad_block(hw, (n, d), start, 0);
        let ap = g.pad_block(aw, (n, n), start, start);
        h_sum = Some(h_sum.map_or(hp, |s| g.add(s, hp)));
        a_sum = Some(a_sum.map_or(ap, |s| g.add(s, ap)));
    }
    let inv: Vec<f64> = coverage.iter().map(|&c| 1.0 / c as f64).collect();
    let h = g.scale_rows(h_sum.unwrap(), &inv);
    let a = g.scale_rows(a_sum.unwrap(), &inv);
    let (a, _) = g.normalize_rows(a, 1e-12);
    Ok((h, a))
}

/// Single-window encoding; documents longer than the window are rejected.
pub fn encode_document(
    marked: &MarkedDocument,
    provider: &dyn EncoderProvider,
    params: &ParamStore,
) -> Result<EncodedDocument> {
    if marked.token_count() > provider.max_len() {
        return Err(Error::Encoder(format!(
            "document {} has {} tokens, window is {}; use encode_long_document",
            marked.doc_id,
            marked.token_count(),
            provider.max_len()
        )));
    }
    encode_long_document(marked, provider, params)
}

pub fn encode_long_document(
    marked: &MarkedDocument,
    provider: &dyn EncoderProvider,
    params: &ParamStore,
) -> Result<EncodedDocument> {
    let mut g = Graph::new();
    let (h, a) = encode_graph(&mut g, provider, params, marked)?;
    Ok(EncodedDocument {
        h: g.value(h).clone(),
        a: g.value(a).clone(),
        marked: marked.clone(),
    })
}

/// Logsumexp-pooled entity embeddings, one row per entity (`n_e × d`).
pub fn entity_embeddings_graph(g: &mut Graph, h: NodeId, marked: &MarkedDocument) -> NodeId {
    let rows: Vec<NodeId> = (0..marked.entity_count)
        .map(|e| {
            let m = g.select_rows(h, &marked.entity_markers(e));
            g.logsumexp_rows(m)
        })
        .collect();
    g.concat_rows(&rows)
}

/// Mention-averaged entity attention, one row per entity (`n_e × N_t`).
pub fn entity_attentions_graph(g: &mut Graph, a: NodeId, marked: &MarkedDocument) -> NodeId {
    let rows: Vec<NodeId> = (0..marked.entity_count)
        .map(|e| {
            let m = g.select_rows(a, &marked.entity_markers(e));
            g.mean_rows(m)
        })
        .collect();
    g.concat_rows(&rows)
}

/// `log Σ_j exp(h_{m_j})` over the entity's opening-marker embeddings.
pub fn entity_embedding(enc: &EncodedDocument, entity: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let h = g.constant(enc.h.clone());
    let m = g.select_rows(h, &enc.marked.entity_markers(entity));
    let out = g.logsumexp_rows(m);
    g.row_vec(out)
}

/// Mean of the entity's opening-marker attention rows.
pub fn entity_attention(enc: &EncodedDocument, entity: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.constant(enc.a.clone());
    let m = g.select_rows(a, &enc.marked.entity_markers(entity));
    let out = g.mean_rows(m);
    g.row_vec(out)
}

pub fn encode_relation(rel: &RelationType, provider: &dyn EncoderProvider, params: &ParamStore) -> Result<Vec<f64>> {
    if rel.name.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("relation {} has an empty name", rel.id)));
    }
    let mut g = Graph::new();
    let node = provider.relation_encode(&mut g, params, &rel.encoder_text())?;
    Ok(g.row_vec(node))
}

/// Write-once cache of relation embeddings for inference. Must be cleared
/// whenever parameters change.
#[derive(Default)]
pub struct RelationCache {
    entries: Mutex<HashMap<String, Vec<f64>>>,
    hits: std::sync::atomic::AtomicUsize,
}

impl RelationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_encode(
        &self,
        rel: &RelationType,
        provider: &dyn EncoderProvider,
        params: &ParamStore,
    ) -> Result<Vec<f64>> {
        let key = rel.encoder_text();
        if let Some(v) = self.entries.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            return Ok(v.clone());
        }
        let v = encode_relation(rel, provider, params)?;
        self.entries.lock().unwrap().entry(key).or_insert_with(|| v.clone());
        Ok(v)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn clear(&self) {
        self.entries.lock().unwrap().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Entity, Mention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mention(entity: usize, sent: usize, span: (usize, usize)) -> Mention {
        Mention {
            entity_index: entity,
            sentence_index: sent,
            token_span: span,
            surface: String::new(),
            mention_type: None,
        }
    }

    fn doc(words: &[&str], entities: Vec<Vec<Mention>>) -> Document {
        Document {
            doc_id: "d".into(),
            title: "d".into(),
            sentences: vec![words.iter().map(|s| s.to_string()).collect()],
            entities: entities.into_iter().map(|mentions| Entity { mentions }).collect(),
            triples: vec![],
        }
    }

    /// One token per word, id = 10 + word index.
    struct WordTokenizer;

    impl SubwordTokenizer for WordTokenizer {
        fn tokenize_word(&self, word: &str) -> Vec<u32> {
            if word.is_empty() {
                vec![]
            } else {
                vec![10 + word.len() as u32]
            }
        }

        fn vocab_size(&self) -> usize {
            64
        }
    }

    #[test]
    fn single_mention_is_wrapped() {
        let d = doc(&["a", "bb", "ccc"], vec![vec![mention(0, 0, (2, 3))]]);
        let m = insert_markers(&d, &WordTokenizer).unwrap();
        assert_eq!(m.tokens, vec![11, 12, MARKER_ID, 13, MARKER_ID]);
        assert_eq!(m.mention_marker_index[&(0, 0)], 2);
        assert_eq!(m.mention_close_index[&(0, 0)], 4);
    }

    #[test]
    fn adjacent_mentions_do_not_interleave() {
        let d = doc(&["a", "bb"], vec![vec![mention(0, 0, (0, 1))], vec![mention(1, 0, (1, 2))]]);
        let m = insert_markers(&d, &WordTokenizer).unwrap();
        assert_eq!(m.tokens, vec![MARKER_ID, 11, MARKER_ID, MARKER_ID, 12, MARKER_ID]);
        assert_eq!(m.entity_markers(0), vec![0]);
        assert_eq!(m.entity_markers(1), vec![3]);
    }

    #[test]
    fn nested_spans_stay_nested() {
        let d = doc(&["a", "bb"], vec![vec![mention(0, 0, (0, 1))], vec![mention(1, 0, (0, 2))]]);
        let m = insert_markers(&d, &WordTokenizer).unwrap();
        // ∗(e1) ∗(e0) a ∗(e0) bb ∗(e1)
        assert_eq!(m.tokens, vec![MARKER_ID, MARKER_ID, 11, MARKER_ID, 12, MARKER_ID]);
        assert_eq!(m.mention_marker_index[&(1, 0)], 0);
        assert_eq!(m.mention_marker_index[&(0, 0)], 1);
        assert_eq!(m.mention_close_index[&(0, 0)], 3);
        assert_eq!(m.mention_close_index[&(1, 0)], 5);
    }

    #[test]
    fn empty_mention_is_an_error() {
        let d = doc(&["a", ""], vec![vec![mention(0, 0, (1, 2))]]);
        let err = insert_markers(&d, &WordTokenizer).unwrap_err();
        assert!(matches!(err, Error::EmptyMention { entity: 0, mention: 0, .. }));
    }

    #[test]
    fn hashing_tokenizer_is_deterministic_and_splits_long_words() {
        let t = HashingTokenizer::new(500, 4);
        assert_eq!(t.tokenize_word("Paris"), t.tokenize_word("paris"));
        assert_eq!(t.tokenize_word("abcdefghi").len(), 3);
        assert_eq!(t.tokenize_word(MARKER), vec![MARKER_ID]);
        assert!(t.tokenize_word("").is_empty());
        assert!(t.tokenize_text("a b c").iter().all(|&i| (RESERVED..500).contains(&i)));
    }

    #[test]
    fn window_starts_cover_the_document() {
        assert_eq!(window_starts(8, 8), vec![0]);
        assert_eq!(window_starts(9, 8), vec![0, 4]);
        assert_eq!(window_starts(20, 8), vec![0, 4, 8, 12]);
    }

    fn small_provider() -> (ToyProvider, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = ToyEncoderConfig {
            vocab_size: 64,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_len: 8,
            piece_chars: 3,
        };
        let p = ToyProvider::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (p, store)
    }

    #[test]
    fn toy_encoder_attention_is_row_stochastic_and_deterministic() {
        let (p, store) = small_provider();
        let d = doc(&["ab", "cd", "ef"], vec![vec![mention(0, 0, (0, 1))], vec![mention(1, 0, (2, 3))]]);
        let m = insert_markers(&d, p.tokenizer()).unwrap();
        let a = encode_document(&m, &p, &store).unwrap();
        let b = encode_document(&m, &p, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.h.dim(), (m.token_count(), 8));
        for row in a.a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn long_documents_are_windowed() {
        let (p, store) = small_provider();
        let words = ["one", "two", "three", "four", "five", "six", "seven"];
        let d = doc(&words, vec![vec![mention(0, 0, (0, 1))], vec![mention(1, 0, (5, 7))]]);
        let m = insert_markers(&d, p.tokenizer()).unwrap();
        assert!(m.token_count() > 8);
        assert!(encode_document(&m, &p, &store).is_err());
        let enc = encode_long_document(&m, &p, &store).unwrap();
        assert_eq!(enc.a.dim(), (m.token_count(), m.token_count()));
        for row in enc.a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_cache_replays_bitwise() {
        let (p, store) = small_provider();
        let rel = RelationType {
            id: "P1".into(),
            name: "capital".into(),
            description: "seat of government".into(),
        };
        let cache = RelationCache::new();
        let a = cache.get_or_encode(&rel, &p, &store).unwrap();
        let b = cache.get_or_encode(&rel, &p, &store).unwrap();
        assert_eq!(cache.hits(), 1);
        assert_eq!(a, b);
        assert_eq!(a, encode_relation(&rel, &p, &store).unwrap());
    }
}
