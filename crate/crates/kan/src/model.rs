//! The knowledge-aware attention network.
//!
//! Two components with the same structure encode the two position-augmented
//! views of a context, each guided by its protein's entity embedding: a
//! stack of diagonal-disabled multi-head attention blocks, each followed by
//! a position-wise sublayer (feed-forward or convolution), then a pooling
//! layer shared between the components. The pooled vectors and the pair's
//! relation embedding feed a two-class softmax. Every published ablation is
//! a configuration of this one forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{InstanceRecord, Vocab};
use crate::error::ModelError;
use crate::graph::{Graph, NodeId, ParamStore};
use crate::kb::{self, KbEmbeddings, TripleStore};
use crate::matrix::{MaskMatrix, Matrix};
use crate::rng::Rng;
use crate::vecfile::VectorTable;

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// One weight per feature per position.
    Mda,
    /// One weight per position.
    Traditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntityMode {
    TransE,
    WordAverage,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SublayerKind {
    Ffn,
    /// Convolution over the sequence axis with the given window.
    Cnn(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Kan,
    /// Three parallel convolutions (windows 3, 4, 5) replacing the
    /// attention stack; pooling still applies.
    CnnBaseline,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub n_blocks: usize,
    pub diag_mask: bool,
    pub pooling: Pooling,
    pub share_components: bool,
    pub share_across_blocks: bool,
    pub share_pooling: bool,
    pub single_component: bool,
    pub entity_mode: EntityMode,
    pub use_relation_embedding: bool,
    pub sublayer: SublayerKind,
    pub encoder: EncoderKind,
    pub max_distance: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 100,
            heads: 4,
            ffn_inner: 400,
            n_blocks: 2,
            diag_mask: true,
            pooling: Pooling::Mda,
            share_components: false,
            share_across_blocks: true,
            share_pooling: true,
            single_component: false,
            entity_mode: EntityMode::TransE,
            use_relation_embedding: true,
            sublayer: SublayerKind::Ffn,
            encoder: EncoderKind::Kan,
            max_distance: 100,
        }
    }
}

pub const VARIANT_NAMES: [&str; 15] = [
    "kan", "kan_se", "wo_mda", "wo_mask", "kan_cnn3", "kan_cnn4", "kan_cnn5", "kan_sc",
    "kan_dt", "kan_da", "wo_entity", "avg_entity", "wo_relation", "wo_kb", "cnn_mda",
];

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// Entity vectors concatenated to each query row.
    pub fn query_entities(&self) -> usize {
        match (self.entity_mode, self.single_component) {
            (EntityMode::None, _) => 0,
            (_, true) => 2,
            (_, false) => 1,
        }
    }

    fn query_width(&self) -> usize {
        self.d * (1 + self.query_entities())
    }

    /// Width of the classifier input.
    pub fn feature_width(&self) -> usize {
        let s = if self.single_component { self.d } else { 2 * self.d };
        s + if self.use_relation_embedding { self.d } else { 0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embedding dim {} must be divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.ffn_inner < 1 {
            return Err(ModelError::Config("ffn_inner must be at least 1".into()));
        }
        if self.n_blocks < 1 {
            return Err(ModelError::Config("n_blocks must be at least 1".into()));
        }
        if self.max_distance < 1 {
            return Err(ModelError::Config("max_distance must be at least 1".into()));
        }
        if let SublayerKind::Cnn(k) = self.sublayer {
            if !matches!(k, 3 | 4 | 5) {
                return Err(ModelError::Config(format!("cnn window {k} not in {{3,4,5}}")));
            }
        }
        Ok(())
    }

    /// Applies one of the named ablation variants on top of this config.
    pub fn with_variant(mut self, name: &str) -> Result<ModelConfig, ModelError> {
        match name {
            "kan" => {}
            "kan_se" => self.single_component = true,
            "wo_mda" => self.pooling = Pooling::Traditional,
            "wo_mask" => self.diag_mask = false,
            "kan_cnn3" => self.sublayer = SublayerKind::Cnn(3),
            "kan_cnn4" => self.sublayer = SublayerKind::Cnn(4),
            "kan_cnn5" => self.sublayer = SublayerKind::Cnn(5),
            "kan_sc" => self.share_components = true,
            "kan_dt" => self.share_across_blocks = false,
            "kan_da" => self.share_pooling = false,
            "wo_entity" => self.entity_mode = EntityMode::None,
            "avg_entity" => self.entity_mode = EntityMode::WordAverage,
            "wo_relation" => self.use_relation_embedding = false,
            "wo_kb" => {
                self.entity_mode = EntityMode::WordAverage;
                self.use_relation_embedding = false;
            }
            "cnn_mda" => {
                self.encoder = EncoderKind::CnnBaseline;
                self.n_blocks = 1;
            }
            other => {
                return Err(ModelError::UnknownVariant {
                    got: other.to_string(),
                    valid: VARIANT_NAMES.join(", "),
                })
            }
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Parameter naming and initialization

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Comp {
    One,
    Two,
}

impl ModelConfig {
    fn components(&self) -> Vec<Comp> {
        if self.single_component {
            vec![Comp::One]
        } else {
            vec![Comp::One, Comp::Two]
        }
    }

    fn comp_tag(&self, c: Comp) -> &'static str {
        if self.share_components {
            "cs"
        } else {
            match c {
                Comp::One => "c1",
                Comp::Two => "c2",
            }
        }
    }

    fn block_tag(&self, block: usize) -> String {
        if self.share_across_blocks {
            "bs".to_string()
        } else {
            format!("b{block}")
        }
    }

    fn pool_tag(&self, c: Comp) -> &'static str {
        if self.share_pooling {
            "pool.sh"
        } else {
            match c {
                Comp::One => "pool.c1",
                Comp::Two => "pool.c2",
            }
        }
    }
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Builds every trainable parameter for the config: weights Xavier-uniform,
/// biases zero, layer-norm gain 1 / bias 0. Word-table rows found in the
/// pre-trained vector file keep the file values; everything else (including
/// the unknown-token row) is learned from random init.
pub fn init_params(
    cfg: &ModelConfig,
    vocab: &Vocab,
    word_vectors: Option<&VectorTable>,
    seed: u64,
) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    if let Some(w) = word_vectors {
        if w.dim != cfg.d {
            return Err(ModelError::Config(format!(
                "word vector file has dim {}, model wants {}",
                w.dim, cfg.d
            )));
        }
    }
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let d = cfg.d;

    let mut word = xavier(&mut rng, vocab.len(), d);
    if let Some(vecs) = word_vectors {
        for (i, token) in vocab.tokens().iter().enumerate() {
            if let Some(v) = vecs.get(token) {
                for (c, &x) in v.iter().enumerate() {
                    word.set(i, c, x);
                }
            }
        }
    }
    store.insert("emb.word", word);
    store.insert("emb.pos", xavier(&mut rng, cfg.max_distance + 1, d));

    match cfg.encoder {
        EncoderKind::Kan => {
            for &c in &cfg.components() {
                let ct = cfg.comp_tag(c);
                for b in 0..cfg.n_blocks {
                    let bt = cfg.block_tag(b);
                    let prefix = format!("{ct}.{bt}");
                    if store.contains(&format!("{prefix}.wh")) {
                        continue;
                    }
                    for i in 0..cfg.heads {
                        store.insert(format!("{prefix}.h{i}.wq"), xavier(&mut rng, cfg.query_width(), cfg.d_head()));
                        store.insert(format!("{prefix}.h{i}.wk"), xavier(&mut rng, d, cfg.d_head()));
                        store.insert(format!("{prefix}.h{i}.wv"), xavier(&mut rng, d, cfg.d_head()));
                    }
                    store.insert(format!("{prefix}.wh"), xavier(&mut rng, cfg.heads * cfg.d_head(), d));
                    store.insert(format!("{prefix}.ln1.g"), Matrix::from_vec(1, d, vec![1.0; d]).expect("shape"));
                    store.insert(format!("{prefix}.ln1.b"), Matrix::zeros(1, d));
                    match cfg.sublayer {
                        SublayerKind::Ffn => {
                            store.insert(format!("{prefix}.ffn.w1"), xavier(&mut rng, d, cfg.ffn_inner));
                            store.insert(format!("{prefix}.ffn.b1"), Matrix::zeros(1, cfg.ffn_inner));
                            store.insert(format!("{prefix}.ffn.w2"), xavier(&mut rng, cfg.ffn_inner, d));
                            store.insert(format!("{prefix}.ffn.b2"), Matrix::zeros(1, d));
                        }
                        SublayerKind::Cnn(k) => {
                            store.insert(format!("{prefix}.cnn.w"), xavier(&mut rng, k * d, d));
                            store.insert(format!("{prefix}.cnn.b"), Matrix::zeros(1, d));
                        }
                    }
                    store.insert(format!("{prefix}.ln2.g"), Matrix::from_vec(1, d, vec![1.0; d]).expect("shape"));
                    store.insert(format!("{prefix}.ln2.b"), Matrix::zeros(1, d));
                }
            }
        }
        EncoderKind::CnnBaseline => {
            for &c in &cfg.components() {
                let ct = cfg.comp_tag(c);
                if store.contains(&format!("{ct}.cnnmerge.w")) {
                    continue;
                }
                for k in [3usize, 4, 5] {
                    store.insert(format!("{ct}.cnn{k}.w"), xavier(&mut rng, k * d, d));
                    store.insert(format!("{ct}.cnn{k}.b"), Matrix::zeros(1, d));
                }
                store.insert(format!("{ct}.cnnmerge.w"), xavier(&mut rng, 3 * d, d));
                store.insert(format!("{ct}.cnnmerge.b"), Matrix::zeros(1, d));
                store.insert(format!("{ct}.cnnln.g"), Matrix::from_vec(1, d, vec![1.0; d]).expect("shape"));
                store.insert(format!("{ct}.cnnln.b"), Matrix::zeros(1, d));
            }
        }
    }

    for &c in &cfg.components() {
        let pt = cfg.pool_tag(c);
        if store.contains(&format!("{pt}.watt")) {
            continue;
        }
        store.insert(format!("{pt}.watt"), xavier(&mut rng, d, d));
        store.insert(format!("{pt}.batt"), Matrix::zeros(1, d));
        if cfg.pooling == Pooling::Traditional {
            store.insert(format!("{pt}.wrow"), xavier(&mut rng, d, 1));
        }
    }

    store.insert("cls.w", xavier(&mut rng, 2, cfg.feature_width()));
    store.insert("cls.b", Matrix::zeros(1, 2));
    Ok(store)
}

// ---------------------------------------------------------------------------
// Inputs

/// An instance resolved against the vocabulary and knowledge base, ready
/// for the forward pass.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub doc_id: String,
    pub pair: (String, String),
    pub token_ids: Vec<usize>,
    pub dist1: Vec<usize>,
    pub dist2: Vec<usize>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub er: Vec<f64>,
    pub label: Option<u8>,
}

/// Resolves tokens to vocabulary indices and fetches the pair's knowledge
/// vectors according to the configured entity mode.
pub fn prepare_input(
    rec: &InstanceRecord,
    cfg: &ModelConfig,
    vocab: &Vocab,
    kb: &KbEmbeddings,
    store: &TripleStore,
    mention_words: &BTreeMap<String, Vec<String>>,
    word_vectors: &VectorTable,
) -> ModelInput {
    let empty = Vec::new();
    let entity = |id: &str| -> Vec<f64> {
        let words = mention_words.get(id).unwrap_or(&empty);
        match cfg.entity_mode {
            EntityMode::TransE => kb::entity_embedding(kb, id, words, word_vectors),
            EntityMode::WordAverage => {
                if word_vectors.dim == cfg.d {
                    kb::init_entity_from_words(words, word_vectors)
                } else {
                    vec![0.0; cfg.d]
                }
            }
            EntityMode::None => vec![0.0; cfg.d],
        }
    };
    let er = if cfg.use_relation_embedding {
        kb::relation_embedding_for_pair(&rec.pair.0, &rec.pair.1, store, kb)
    } else {
        vec![0.0; cfg.d]
    };
    let clip = |dists: &[usize]| dists.iter().map(|&x| x.min(cfg.max_distance)).collect();
    ModelInput {
        doc_id: rec.doc_id.clone(),
        pair: rec.pair.clone(),
        token_ids: rec.tokens.iter().map(|t| vocab.lookup(t)).collect(),
        dist1: clip(&rec.dist1),
        dist2: clip(&rec.dist2),
        e1: entity(&rec.pair.0),
        e2: entity(&rec.pair.1),
        er,
        label: rec.label,
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// Concrete values captured during a forward pass, for inspection and
/// heatmap export.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Attention weights per component, block, head (each L x L).
    pub alphas: Vec<Vec<Vec<Matrix>>>,
    /// Pooling weights per component (L x d for MDA, L x 1 traditional).
    pub pool_weights: Vec<Matrix>,
    /// Pooled vectors per component.
    pub pooled: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    /// Predicted class with ties resolving to the negative class 0.
    pub fn predicted(&self) -> u8 {
        u8::from(self.probs[1] > self.probs[0])
    }

    pub fn positive_prob(&self) -> f64 {
        self.probs[1]
    }
}

pub struct ForwardPass {
    pub logits: NodeId,
    pub probs: NodeId,
    pub trace: ForwardTrace,
}

/// One diagonal-disabled multi-head attention block: queries are the input
/// rows with the entity embedding(s) appended, keys and values are the
/// input itself; scores scale by 1/sqrt(d_head); the masked softmax zeroes
/// the diagonal; heads concatenate, project back to d, and pass through a
/// residual + layer-norm.
pub fn dmha_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    entities: &[NodeId],
    alphas_out: &mut Vec<Matrix>,
) -> Result<NodeId, ModelError> {
    let l = g.value(x).rows();
    let mut q = x;
    for &e in entities {
        let eb = g.broadcast_rows(e, l)?;
        q = g.concat_cols(q, eb)?;
    }
    let mask = MaskMatrix::diagonal(l);
    let mask_ref = cfg.diag_mask.then_some(&mask);
    let scale = 1.0 / (cfg.d_head() as f64).sqrt();

    let mut heads: Option<NodeId> = None;
    for i in 0..cfg.heads {
        let wq = g.param(&format!("{prefix}.h{i}.wq"), store)?;
        let wk = g.param(&format!("{prefix}.h{i}.wk"), store)?;
        let wv = g.param(&format!("{prefix}.h{i}.wv"), store)?;
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(x, wk)?;
        let vp = g.matmul(x, wv)?;
        let kt = g.transpose(kp);
        let raw = g.matmul(qp, kt)?;
        let scores = g.scale(raw, scale);
        let alpha = g.masked_softmax_rows(scores, mask_ref)?;
        alphas_out.push(g.value(alpha).clone());
        let head = g.matmul(alpha, vp)?;
        heads = Some(match heads {
            None => head,
            Some(acc) => g.concat_cols(acc, head)?,
        });
    }
    let wh = g.param(&format!("{prefix}.wh"), store)?;
    let proj = g.matmul(heads.expect("at least one head"), wh)?;
    let res = g.add(x, proj)?;
    let gain = g.param(&format!("{prefix}.ln1.g"), store)?;
    let bias = g.param(&format!("{prefix}.ln1.b"), store)?;
    Ok(g.layer_norm(res, gain, bias, LN_EPS)?)
}

/// Position-wise feed-forward sublayer with its residual + layer-norm.
pub fn ffn_block(g: &mut Graph, store: &ParamStore, prefix: &str, v: NodeId) -> Result<NodeId, ModelError> {
    let l = g.value(v).rows();
    let w1 = g.param(&format!("{prefix}.ffn.w1"), store)?;
    let b1 = g.param(&format!("{prefix}.ffn.b1"), store)?;
    let w2 = g.param(&format!("{prefix}.ffn.w2"), store)?;
    let b2 = g.param(&format!("{prefix}.ffn.b2"), store)?;
    let h = g.matmul(v, w1)?;
    let b1b = g.broadcast_rows(b1, l)?;
    let h = g.add(h, b1b)?;
    let h = g.relu(h);
    let f = g.matmul(h, w2)?;
    let b2b = g.broadcast_rows(b2, l)?;
    let f = g.add(f, b2b)?;
    let res = g.add(v, f)?;
    let gain = g.param(&format!("{prefix}.ln2.g"), store)?;
    let bias = g.param(&format!("{prefix}.ln2.b"), store)?;
    Ok(g.layer_norm(res, gain, bias, LN_EPS)?)
}

/// Same-length 1-D convolution over the sequence axis: k shifted copies of
/// the input concatenated column-wise and projected by a (k*d) x d kernel.
/// Zero padding, left-heavy when the overhang is odd.
fn conv1d(g: &mut Graph, v: NodeId, k: usize, w: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
    let l = g.value(v).rows();
    let left = k / 2;
    let mut cat: Option<NodeId> = None;
    for tap in 0..k {
        let offset = tap as isize - left as isize;
        let shifted = g.shift_rows(v, offset);
        cat = Some(match cat {
            None => shifted,
            Some(acc) => g.concat_cols(acc, shifted)?,
        });
    }
    let conv = g.matmul(cat.expect("k >= 1"), w)?;
    let bb = g.broadcast_rows(b, l)?;
    Ok(g.add(conv, bb)?)
}

/// Convolutional sublayer used by the cnn-window variants: conv, ReLU,
/// then the same residual + layer-norm wrapper as the feed-forward.
pub fn cnn_sublayer(g: &mut Graph, store: &ParamStore, prefix: &str, v: NodeId, k: usize) -> Result<NodeId, ModelError> {
    let w = g.param(&format!("{prefix}.cnn.w"), store)?;
    let b = g.param(&format!("{prefix}.cnn.b"), store)?;
    let conv = conv1d(g, v, k, w, b)?;
    let act = g.relu(conv);
    let res = g.add(v, act)?;
    let gain = g.param(&format!("{prefix}.ln2.g"), store)?;
    let bias = g.param(&format!("{prefix}.ln2.b"), store)?;
    Ok(g.layer_norm(res, gain, bias, LN_EPS)?)
}

/// The convolutional baseline encoder: parallel windows 3, 4 and 5, each
/// ReLU-activated, concatenated and merged back to d, with a residual +
/// layer-norm on top. Entity embeddings play no part here.
pub fn cnn_baseline(g: &mut Graph, store: &ParamStore, comp_tag: &str, x: NodeId) -> Result<NodeId, ModelError> {
    let l = g.value(x).rows();
    let mut cat: Option<NodeId> = None;
    for k in [3usize, 4, 5] {
        let w = g.param(&format!("{comp_tag}.cnn{k}.w"), store)?;
        let b = g.param(&format!("{comp_tag}.cnn{k}.b"), store)?;
        let conv = conv1d(g, x, k, w, b)?;
        let act = g.relu(conv);
        cat = Some(match cat {
            None => act,
            Some(acc) => g.concat_cols(acc, act)?,
        });
    }
    let mw = g.param(&format!("{comp_tag}.cnnmerge.w"), store)?;
    let mb = g.param(&format!("{comp_tag}.cnnmerge.b"), store)?;
    let merged = g.matmul(cat.expect("three windows"), mw)?;
    let mbb = g.broadcast_rows(mb, l)?;
    let merged = g.add(merged, mbb)?;
    let act = g.relu(merged);
    let res = g.add(x, act)?;
    let gain = g.param(&format!("{comp_tag}.cnnln.g"), store)?;
    let bias = g.param(&format!("{comp_tag}.cnnln.b"), store)?;
    Ok(g.layer_norm(res, gain, bias, LN_EPS)?)
}

/// Multi-dimensional attention pooling: a feature-wise weight matrix,
/// softmax-normalized over the sequence axis per column, compresses the
/// sequence into one d-vector.
pub fn mda_pool(
    g: &mut Graph,
    store: &ParamStore,
    tag: &str,
    v: NodeId,
    weights_out: &mut Option<Matrix>,
) -> Result<NodeId, ModelError> {
    let l = g.value(v).rows();
    let watt = g.param(&format!("{tag}.watt"), store)?;
    let batt = g.param(&format!("{tag}.batt"), store)?;
    let proj = g.matmul(v, watt)?;
    let bb = g.broadcast_rows(batt, l)?;
    let pre = g.add(proj, bb)?;
    let pre = g.tanh(pre);
    let pre_t = g.transpose(pre);
    let sm = g.masked_softmax_rows(pre_t, None)?;
    let weights = g.transpose(sm);
    *weights_out = Some(g.value(weights).clone());
    let weighted = g.row_sum_weighted(weights, v)?;
    Ok(weighted)
}

/// Traditional attention pooling: one scalar score per row via a learned
/// d -> 1 projection, softmax over rows, weighted row sum.
pub fn traditional_pool(
    g: &mut Graph,
    store: &ParamStore,
    tag: &str,
    v: NodeId,
    weights_out: &mut Option<Matrix>,
) -> Result<NodeId, ModelError> {
    let l = g.value(v).rows();
    let watt = g.param(&format!("{tag}.watt"), store)?;
    let batt = g.param(&format!("{tag}.batt"), store)?;
    let wrow = g.param(&format!("{tag}.wrow"), store)?;
    let proj = g.matmul(v, watt)?;
    let bb = g.broadcast_rows(batt, l)?;
    let pre = g.add(proj, bb)?;
    let pre = g.tanh(pre);
    let scores = g.matmul(pre, wrow)?;
    let st = g.transpose(scores);
    let sm = g.masked_softmax_rows(st, None)?;
    let alpha = g.transpose(sm);
    *weights_out = Some(g.value(alpha).clone());
    let weighted = g.row_sum_weighted(alpha, v)?;
    Ok(weighted)
}

/// Runs the full forward pass on one instance, producing class
/// probabilities and a trace of attention and pooling weights.
pub fn kan_forward(
    g: &mut Graph,
    input: &ModelInput,
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<ForwardPass, ModelError> {
    cfg.validate()?;
    let word = g.param("emb.word", store)?;
    let pos = g.param("emb.pos", store)?;

    let mut trace = ForwardTrace::default();
    let mut pooled: Vec<NodeId> = Vec::new();

    for &c in &cfg.components() {
        let dists = match c {
            Comp::One => &input.dist1,
            Comp::Two => &input.dist2,
        };
        let words = g.gather_rows(word, &input.token_ids)?;
        let positions = g.gather_rows(pos, dists)?;
        let x = g.add(words, positions)?;

        let entity_nodes: Vec<NodeId> = if cfg.query_entities() == 0 {
            Vec::new()
        } else if cfg.single_component {
            vec![
                g.constant(Matrix::row(&input.e1)),
                g.constant(Matrix::row(&input.e2)),
            ]
        } else {
            let e = match c {
                Comp::One => &input.e1,
                Comp::Two => &input.e2,
            };
            vec![g.constant(Matrix::row(e))]
        };

        let comp_tag = cfg.comp_tag(c);
        let mut comp_alphas: Vec<Vec<Matrix>> = Vec::new();
        let encoded = match cfg.encoder {
            EncoderKind::Kan => {
                let mut v = x;
                for b in 0..cfg.n_blocks {
                    let prefix = format!("{comp_tag}.{}", cfg.block_tag(b));
                    let mut alphas = Vec::new();
                    v = dmha_block(g, cfg, store, &prefix, v, &entity_nodes, &mut alphas)?;
                    comp_alphas.push(alphas);
                    v = match cfg.sublayer {
                        SublayerKind::Ffn => ffn_block(g, store, &prefix, v)?,
                        SublayerKind::Cnn(k) => cnn_sublayer(g, store, &prefix, v, k)?,
                    };
                }
                v
            }
            EncoderKind::CnnBaseline => cnn_baseline(g, store, comp_tag, x)?,
        };
        trace.alphas.push(comp_alphas);

        let pool_tag = cfg.pool_tag(c);
        let mut weights = None;
        let s = match cfg.pooling {
            Pooling::Mda => mda_pool(g, store, pool_tag, encoded, &mut weights)?,
            Pooling::Traditional => traditional_pool(g, store, pool_tag, encoded, &mut weights)?,
        };
        trace.pool_weights.push(weights.expect("pooling records weights"));
        trace.pooled.push(g.value(s).data().to_vec());
        pooled.push(s);
    }

    let mut feature = pooled[0];
    for &s in &pooled[1..] {
        feature = g.concat_cols(feature, s)?;
    }
    if cfg.use_relation_embedding {
        let er = g.constant(Matrix::row(&input.er));
        feature = g.concat_cols(feature, er)?;
    }
    let ws = g.param("cls.w", store)?;
    let bs = g.param("cls.b", store)?;
    let wst = g.transpose(ws);
    let raw = g.matmul(feature, wst)?;
    let logits = g.add(raw, bs)?;
    let probs = g.masked_softmax_rows(logits, None)?;

    trace.logits = g.value(logits).data().to_vec();
    trace.probs = g.value(probs).data().to_vec();
    Ok(ForwardPass { logits, probs, trace })
}

// ---------------------------------------------------------------------------
// Attention export

/// Per-component mean of the head attention matrices of one block.
pub fn export_attention(trace: &ForwardTrace, block: usize) -> Result<Vec<Matrix>, ModelError> {
    let mut out = Vec::new();
    for (c, comp) in trace.alphas.iter().enumerate() {
        let heads = comp.get(block).ok_or_else(|| {
            ModelError::Config(format!(
                "block {block} out of range: component {} has {} blocks",
                c + 1,
                comp.len()
            ))
        })?;
        let (l, _) = heads[0].shape();
        let mut mean = Matrix::zeros(l, l);
        for h in heads {
            mean.add_assign(h);
        }
        mean.scale_assign(1.0 / heads.len() as f64);
        out.push(mean);
    }
    Ok(out)
}

/// Heatmap file: `L tok1 ... tokL` on the first line, then L rows of L
/// weights.
pub fn write_heatmap(path: &Path, tokens: &[String], grid: &Matrix) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{} {}", tokens.len(), tokens.join(" "))?;
    for r in 0..grid.rows() {
        let row: Vec<String> = grid.row_slice(r).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mda => "mda",
            Pooling::Traditional => "traditional",
        })
    }
}

impl fmt::Display for EntityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityMode::TransE => "transe",
            EntityMode::WordAverage => "word_average",
            EntityMode::None => "none",
        })
    }
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SublayerKind::Ffn => f.write_str("ffn"),
            SublayerKind::Cnn(k) => write!(f, "cnn{k}"),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Kan => "kan",
            EncoderKind::CnnBaseline => "cnn_baseline",
        })
    }
}

fn parse_field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, ModelError> {
    map.get(key)
        .ok_or_else(|| ModelError::Checkpoint(format!("missing config key '{key}'")))?
        .parse::<T>()
        .map_err(|_| ModelError::Checkpoint(format!("bad value for '{key}'")))
}

impl ModelConfig {
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("d".into(), self.d.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("ffn_inner".into(), self.ffn_inner.to_string()),
            ("n_blocks".into(), self.n_blocks.to_string()),
            ("diag_mask".into(), self.diag_mask.to_string()),
            ("pooling".into(), self.pooling.to_string()),
            ("share_components".into(), self.share_components.to_string()),
            ("share_across_blocks".into(), self.share_across_blocks.to_string()),
            ("share_pooling".into(), self.share_pooling.to_string()),
            ("single_component".into(), self.single_component.to_string()),
            ("entity_mode".into(), self.entity_mode.to_string()),
            ("use_relation_embedding".into(), self.use_relation_embedding.to_string()),
            ("sublayer".into(), self.sublayer.to_string()),
            ("encoder".into(), self.encoder.to_string()),
            ("max_distance".into(), self.max_distance.to_string()),
        ]
    }

    pub fn from_key_values(map: &BTreeMap<String, String>) -> Result<ModelConfig, ModelError> {
        let pooling = match map.get("pooling").map(String::as_str) {
            Some("mda") | None => Pooling::Mda,
            Some("traditional") => Pooling::Traditional,
            Some(other) => return Err(ModelError::Checkpoint(format!("bad pooling '{other}'"))),
        };
        let entity_mode = match map.get("entity_mode").map(String::as_str) {
            Some("transe") | None => EntityMode::TransE,
            Some("word_average") => EntityMode::WordAverage,
            Some("none") => EntityMode::None,
            Some(other) => return Err(ModelError::Checkpoint(format!("bad entity_mode '{other}'"))),
        };
        let sublayer = match map.get("sublayer").map(String::as_str) {
            Some("ffn") | None => SublayerKind::Ffn,
            Some("cnn3") => SublayerKind::Cnn(3),
            Some("cnn4") => SublayerKind::Cnn(4),
            Some("cnn5") => SublayerKind::Cnn(5),
            Some(other) => return Err(ModelError::Checkpoint(format!("bad sublayer '{other}'"))),
        };
        let encoder = match map.get("encoder").map(String::as_str) {
            Some("kan") | None => EncoderKind::Kan,
            Some("cnn_baseline") => EncoderKind::CnnBaseline,
            Some(other) => return Err(ModelError::Checkpoint(format!("bad encoder '{other}'"))),
        };
        let cfg = ModelConfig {
            d: parse_field(map, "d")?,
            heads: parse_field(map, "heads")?,
            ffn_inner: parse_field(map, "ffn_inner")?,
            n_blocks: parse_field(map, "n_blocks")?,
            diag_mask: parse_field(map, "diag_mask")?,
            pooling,
            share_components: parse_field(map, "share_components")?,
            share_across_blocks: parse_field(map, "share_across_blocks")?,
            share_pooling: parse_field(map, "share_pooling")?,
            single_component: parse_field(map, "single_component")?,
            entity_mode,
            use_relation_embedding: parse_field(map, "use_relation_embedding")?,
            sublayer,
            encoder,
            max_distance: parse_field(map, "max_distance")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes `config.txt` (key=value) and `params.txt` (named matrices, one
/// row of shortest-round-trip floats per matrix row) into the directory.
/// Loading reproduces every value bit-exactly.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut config = std::io::BufWriter::new(std::fs::File::create(dir.join("config.txt"))?);
    for (k, v) in cfg.to_key_values() {
        writeln!(config, "{k}={v}")?;
    }
    drop(config);

    let mut params = std::io::BufWriter::new(std::fs::File::create(dir.join("params.txt"))?);
    writeln!(params, "params {}", store.len())?;
    for (name, m) in store.iter() {
        writeln!(params, "param {} {} {}", name, m.rows(), m.cols())?;
        for r in 0..m.rows() {
            let row: Vec<String> = m.row_slice(r).iter().map(|v| v.to_string()).collect();
            writeln!(params, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParamStore), ModelError> {
    let config_path = dir.join("config.txt");
    let mut map = BTreeMap::new();
    for line in BufReader::new(std::fs::File::open(&config_path)?).lines() {
        let line = line?;
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    let cfg = ModelConfig::from_key_values(&map)?;

    let params_path = dir.join("params.txt");
    let file = std::fs::File::open(&params_path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| ModelError::Checkpoint("empty params file".into()))??;
    let count: usize = header
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ModelError::Checkpoint(format!("bad params header '{header}'")))?;

    let mut store = ParamStore::new();
    for _ in 0..count {
        let head = lines
            .next()
            .ok_or_else(|| ModelError::Checkpoint("truncated params file".into()))??;
        let parts: Vec<&str> = head.split(' ').collect();
        if parts.len() != 4 || parts[0] != "param" {
            return Err(ModelError::Checkpoint(format!("bad param header '{head}'")));
        }
        let name = parts[1].to_string();
        let rows: usize = parts[2].parse().map_err(|_| ModelError::Checkpoint(format!("bad rows in '{head}'")))?;
        let cols: usize = parts[3].parse().map_err(|_| ModelError::Checkpoint(format!("bad cols in '{head}'")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = lines
                .next()
                .ok_or_else(|| ModelError::Checkpoint(format!("truncated rows for '{name}'")))??;
            for v in row.split(' ') {
                data.push(v.parse::<f64>().map_err(|_| {
                    ModelError::Checkpoint(format!("bad float '{v}' in '{name}'"))
                })?);
            }
        }
        let m = Matrix::from_vec(rows, cols, data)
            .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, m);
    }
    Ok((cfg, store))
}
