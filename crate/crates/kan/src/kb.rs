//! Knowledge-base triples and TransE embeddings.
//!
//! Facts arrive as (head, relation, tail) protein triples; TransE learns
//! entity and relation vectors so that head + relation lands near tail,
//! trained with a margin ranking loss against uniformly corrupted triples.
//! Lookups provide the fallbacks the model needs: mention-word averages for
//! entities outside the KB and a zero vector for pairs with no connecting
//! triple.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::KbError;
use crate::rng::Rng;
use crate::vecfile::VectorTable;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Deduplicated triples with entity/relation vocabularies in first-seen
/// order and a canonical-pair index for relation lookups.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    pair_index: HashMap<(String, String), Vec<usize>>,
    seen: HashSet<Triple>,
}

impl TripleStore {
    pub fn new() -> Self {
        TripleStore::default()
    }

    pub fn insert(&mut self, triple: Triple) {
        if triple.head.is_empty() || triple.tail.is_empty() {
            return;
        }
        if !self.seen.insert(triple.clone()) {
            return;
        }
        for id in [&triple.head, &triple.tail] {
            if !self.entity_index.contains_key(id) {
                self.entity_index.insert(id.clone(), self.entities.len());
                self.entities.push(id.clone());
            }
        }
        if !self.relation_index.contains_key(&triple.relation) {
            self.relation_index.insert(triple.relation.clone(), self.relations.len());
            self.relations.push(triple.relation.clone());
        }
        let key = canonical_pair(&triple.head, &triple.tail);
        self.pair_index.entry(key).or_default().push(self.triples.len());
        self.triples.push(triple);
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.seen.contains(triple)
    }

    /// Triples connecting the two ids in either direction.
    pub fn triples_for_pair(&self, id1: &str, id2: &str) -> Vec<&Triple> {
        let key = canonical_pair(id1, id2);
        match self.pair_index.get(&key) {
            Some(idx) => idx.iter().map(|&i| &self.triples[i]).collect(),
            None => Vec::new(),
        }
    }
}

pub fn canonical_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Loads tab-separated `head<TAB>relation<TAB>tail` lines. Duplicates
/// collapse; an empty file yields an empty store (the caller decides
/// whether to warn).
pub fn load_triples(path: &Path) -> Result<TripleStore, KbError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut store = TripleStore::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KbError::MalformedTriple {
                path: display,
                line: i + 1,
                fields: fields.len(),
            });
        }
        store.insert(Triple {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    L1,
    L2,
}

#[derive(Clone, Debug)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub norm_order: NormOrder,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        TransEConfig {
            dim: 100,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 100,
            negatives_per_positive: 1,
            norm_order: NormOrder::L2,
            seed: 1,
        }
    }
}

/// Learned entity and relation vectors.
#[derive(Clone, Debug)]
pub struct KbEmbeddings {
    pub dim: usize,
    pub entities: BTreeMap<String, Vec<f64>>,
    pub relations: BTreeMap<String, Vec<f64>>,
}

impl KbEmbeddings {
    pub fn entity_table(&self) -> VectorTable {
        VectorTable { dim: self.dim, vectors: self.entities.clone() }
    }

    pub fn relation_table(&self) -> VectorTable {
        VectorTable { dim: self.dim, vectors: self.relations.clone() }
    }

    pub fn from_tables(entities: VectorTable, relations: VectorTable) -> Self {
        KbEmbeddings {
            dim: entities.dim,
            entities: entities.vectors,
            relations: relations.vectors,
        }
    }
}

/// ||h + r - t|| under the given norm; lower means more plausible.
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64], norm: NormOrder) -> Result<f64, KbError> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(KbError::VectorLengthMismatch {
            left: h.len(),
            right: if h.len() != r.len() { r.len() } else { t.len() },
        });
    }
    let mut acc = 0.0;
    match norm {
        NormOrder::L1 => {
            for i in 0..h.len() {
                acc += (h[i] + r[i] - t[i]).abs();
            }
        }
        NormOrder::L2 => {
            for i in 0..h.len() {
                let d = h[i] + r[i] - t[i];
                acc += d * d;
            }
            acc = acc.sqrt();
        }
    }
    Ok(acc)
}

/// max(0, margin + score(pos) - score(neg)).
pub fn margin_ranking_loss(pos_score: f64, neg_score: f64, margin: f64) -> f64 {
    (margin + pos_score - neg_score).max(0.0)
}

/// Gradients of the hinge loss for one positive/negative pair sharing the
/// relation vector. None when the hinge is inactive.
pub struct PairGrads {
    pub pos_head: Vec<f64>,
    pub pos_tail: Vec<f64>,
    pub neg_head: Vec<f64>,
    pub neg_tail: Vec<f64>,
    pub relation: Vec<f64>,
}

pub fn margin_loss_grads(
    pos_h: &[f64],
    relation: &[f64],
    pos_t: &[f64],
    neg_h: &[f64],
    neg_t: &[f64],
    margin: f64,
    norm: NormOrder,
) -> Result<(f64, Option<PairGrads>), KbError> {
    let pos_score = transe_score(pos_h, relation, pos_t, norm)?;
    let neg_score = transe_score(neg_h, relation, neg_t, norm)?;
    let loss = margin_ranking_loss(pos_score, neg_score, margin);
    if loss <= 0.0 {
        return Ok((loss, None));
    }
    let d = pos_h.len();
    // ds/dh of ||h + r - t||: unit residual direction (L2) or sign (L1).
    let direction = |h: &[f64], t: &[f64], score: f64| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let res = h[i] + relation[i] - t[i];
                match norm {
                    NormOrder::L1 => res.signum(),
                    NormOrder::L2 => {
                        if score > 0.0 {
                            res / score
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect()
    };
    let pos_dir = direction(pos_h, pos_t, pos_score);
    let neg_dir = direction(neg_h, neg_t, neg_score);
    let grads = PairGrads {
        pos_head: pos_dir.clone(),
        pos_tail: pos_dir.iter().map(|v| -v).collect(),
        neg_head: neg_dir.iter().map(|v| -v).collect(),
        neg_tail: neg_dir.clone(),
        relation: (0..d).map(|i| pos_dir[i] - neg_dir[i]).collect(),
    };
    Ok((loss, Some(grads)))
}

/// Arithmetic mean of the in-vocabulary token vectors of a mention; the
/// zero vector when nothing is in vocabulary.
pub fn init_entity_from_words(mention: &[String], words: &VectorTable) -> Vec<f64> {
    let mut acc = vec![0.0; words.dim];
    let mut count = 0usize;
    for token in mention {
        if let Some(v) = words.get(token) {
            for (a, b) in acc.iter_mut().zip(v.iter()) {
                *a += b;
            }
            count += 1;
        }
    }
    if count > 0 {
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
    }
    acc
}

/// Margin-ranking TransE over uniformly corrupted triples. Relation vectors
/// start from N(0, 1/sqrt(d)); entity vectors from `init` where present,
/// otherwise the same normal draw. Entity vectors are renormalized to unit
/// length at the end of every epoch. Deterministic under the config seed.
pub fn transe_train(
    store: &TripleStore,
    cfg: &TransEConfig,
    init: &BTreeMap<String, Vec<f64>>,
) -> Result<KbEmbeddings, KbError> {
    if store.is_empty() {
        return Err(KbError::EmptyStore);
    }
    for (id, v) in init {
        if v.len() != cfg.dim {
            return Err(KbError::InitDimensionMismatch {
                entity: id.clone(),
                got: v.len(),
                want: cfg.dim,
            });
        }
    }

    let mut rng = Rng::new(cfg.seed);
    let std = 1.0 / (cfg.dim as f64).sqrt();
    let n_entities = store.entities().len();

    let mut entity_vecs: Vec<Vec<f64>> = store
        .entities()
        .iter()
        .map(|id| match init.get(id) {
            Some(v) => v.clone(),
            None => (0..cfg.dim).map(|_| rng.normal() * std).collect(),
        })
        .collect();
    let mut relation_vecs: Vec<Vec<f64>> = store
        .relations()
        .iter()
        .map(|_| (0..cfg.dim).map(|_| rng.normal() * std).collect())
        .collect();

    let entity_idx = |id: &str| -> usize { store.entity_index[id] };
    let relation_idx = |id: &str| -> usize { store.relation_index[id] };

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..store.len()).collect();
        rng.shuffle(&mut order);
        for &t in &order {
            let triple = &store.triples()[t];
            let h = entity_idx(&triple.head);
            let r = relation_idx(&triple.relation);
            let tl = entity_idx(&triple.tail);
            for _ in 0..cfg.negatives_per_positive.max(1) {
                let corrupt_head = rng.below(2) == 0;
                let original = if corrupt_head { h } else { tl };
                let replacement = if n_entities > 1 {
                    let mut cand = rng.below(n_entities - 1);
                    if cand >= original {
                        cand += 1;
                    }
                    cand
                } else {
                    original
                };
                let (nh, nt) = if corrupt_head { (replacement, tl) } else { (h, replacement) };

                let (_, grads) = margin_loss_grads(
                    &entity_vecs[h],
                    &relation_vecs[r],
                    &entity_vecs[tl],
                    &entity_vecs[nh],
                    &entity_vecs[nt],
                    cfg.margin,
                    cfg.norm_order,
                )?;
                if let Some(g) = grads {
                    let lr = cfg.learning_rate;
                    apply(&mut entity_vecs, h, &g.pos_head, lr);
                    apply(&mut entity_vecs, tl, &g.pos_tail, lr);
                    apply(&mut entity_vecs, nh, &g.neg_head, lr);
                    apply(&mut entity_vecs, nt, &g.neg_tail, lr);
                    for (v, gr) in relation_vecs[r].iter_mut().zip(g.relation.iter()) {
                        *v -= lr * gr;
                    }
                }
            }
        }
        for v in entity_vecs.iter_mut() {
            normalize(v);
        }
    }

    let mut entities = BTreeMap::new();
    for (id, v) in store.entities().iter().zip(entity_vecs) {
        entities.insert(id.clone(), v);
    }
    let mut relations = BTreeMap::new();
    for (id, v) in store.relations().iter().zip(relation_vecs) {
        relations.insert(id.clone(), v);
    }
    Ok(KbEmbeddings { dim: cfg.dim, entities, relations })
}

fn apply(vecs: &mut [Vec<f64>], idx: usize, grad: &[f64], lr: f64) {
    for (v, g) in vecs[idx].iter_mut().zip(grad.iter()) {
        *v -= lr * g;
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        // Degenerate all-zero vector; pin it to a unit basis vector so the
        // post-epoch unit-norm invariant holds.
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    }
}

/// TransE vector if the entity is known, else its mention-word average,
/// else zeros.
pub fn entity_embedding(
    kb: &KbEmbeddings,
    id: &str,
    mention: &[String],
    words: &VectorTable,
) -> Vec<f64> {
    if let Some(v) = kb.entities.get(id) {
        return v.clone();
    }
    if words.dim == kb.dim {
        return init_entity_from_words(mention, words);
    }
    vec![0.0; kb.dim]
}

/// Mean relation vector over every triple connecting the pair in either
/// direction; zeros when the pair is absent from the KB.
pub fn relation_embedding_for_pair(
    id1: &str,
    id2: &str,
    store: &TripleStore,
    kb: &KbEmbeddings,
) -> Vec<f64> {
    let mut acc = vec![0.0; kb.dim];
    let mut count = 0usize;
    for triple in store.triples_for_pair(id1, id2) {
        if let Some(r) = kb.relations.get(&triple.relation) {
            for (a, b) in acc.iter_mut().zip(r.iter()) {
                *a += b;
            }
            count += 1;
        }
    }
    if count > 0 {
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
    }
    acc
}
