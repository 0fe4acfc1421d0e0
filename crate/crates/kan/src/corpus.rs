//! Document preprocessing: candidate pair generation, mention masking,
//! position distances, vocabulary and instance embedding.
//!
//! Documents arrive tokenized and entity-annotated, one JSON object per
//! line. A candidate instance is one co-occurring protein pair plus its
//! masked context: the tokens strictly between the two mentions and three
//! expansion words on both sides (clipped at document boundaries). Pairs
//! more than two sentences apart are skipped. The pair's own mentions are
//! removed, every other protein mention becomes "gene0", numeric tokens
//! become "NUMBER", and pure-punctuation tokens are dropped. Distances are
//! measured on the original token positions, so masking never disturbs
//! them.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::kb::{self, KbEmbeddings, TripleStore};
use crate::matrix::Matrix;
use crate::vecfile::VectorTable;

pub const MASK_OTHER_MENTION: &str = "gene0";
pub const MASK_NUMBER: &str = "NUMBER";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_MAX_SENTENCE_DISTANCE: usize = 3;
pub const DEFAULT_MAX_POSITION_DISTANCE: usize = 100;
const EXPANSION_WORDS: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mention {
    pub id: String,
    pub sent: usize,
    /// Token span within the sentence, `end` exclusive.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub mentions: Vec<Mention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_pairs: Option<Vec<(String, String)>>,
}

impl Document {
    /// Flat token offsets per sentence, plus the total count.
    fn flat_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut total = 0;
        for s in &self.sentences {
            offsets.push(total);
            total += s.len();
        }
        (offsets, total)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let mention_ids: Vec<&str> = self.mentions.iter().map(|m| m.id.as_str()).collect();
        for m in &self.mentions {
            let len = self.sentences.get(m.sent).map_or(0, Vec::len);
            if m.sent >= self.sentences.len() || m.start >= m.end || m.end > len {
                return Err(CorpusError::SpanOutOfRange {
                    doc_id: self.doc_id.clone(),
                    id: m.id.clone(),
                    sent: m.sent,
                    start: m.start,
                    end: m.end,
                    len,
                });
            }
        }
        if let Some(pairs) = &self.gold_pairs {
            for (a, b) in pairs {
                for id in [a, b] {
                    if !mention_ids.contains(&id.as_str()) {
                        return Err(CorpusError::MalformedDocument {
                            path: self.doc_id.clone(),
                            line: 0,
                            msg: format!("gold pair references unknown entity '{id}'"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// One context token with its original flat position and, when the token
/// belongs to an annotated mention, that mention's index.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextToken {
    pub surface: String,
    pub position: usize,
    pub mention: Option<usize>,
}

/// A candidate pair before masking: ids in document order with the flat
/// positions of the two mention starts.
#[derive(Clone, Debug)]
pub struct CandidateSkeleton {
    pub doc_id: String,
    pub id1: String,
    pub id2: String,
    pub pos1: usize,
    pub pos2: usize,
    pub context: Vec<ContextToken>,
}

/// A masked token that remembers where it stood in the original text.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedToken {
    pub surface: String,
    pub position: usize,
}

#[derive(Clone, Debug)]
pub struct CandidateInstance {
    pub doc_id: String,
    pub pair: (String, String),
    pub pos1: usize,
    pub pos2: usize,
    pub tokens: Vec<String>,
    pub dist1: Vec<usize>,
    pub dist2: Vec<usize>,
    pub label: Option<u8>,
}

/// Which mention, if any, covers each flat token position. Overlapping
/// spans are annotation errors.
fn mention_coverage(doc: &Document) -> Result<Vec<Option<usize>>, CorpusError> {
    let (offsets, total) = doc.flat_offsets();
    let mut coverage: Vec<Option<usize>> = vec![None; total];
    for (i, m) in doc.mentions.iter().enumerate() {
        for t in m.start..m.end {
            let pos = offsets[m.sent] + t;
            if let Some(prev) = coverage[pos] {
                return Err(CorpusError::OverlappingMentions {
                    doc_id: doc.doc_id.clone(),
                    a: doc.mentions[prev].id.clone(),
                    b: m.id.clone(),
                    pos_a: offsets[doc.mentions[prev].sent] + doc.mentions[prev].start,
                    pos_b: offsets[m.sent] + m.start,
                });
            }
            coverage[pos] = Some(i);
        }
    }
    Ok(coverage)
}

/// Enumerates candidate pairs: every ordered co-occurrence of two mentions
/// with distinct ids whose sentence distance is strictly below the cutoff.
/// The context is the tokens strictly between the mentions plus up to three
/// expansion words on each side.
pub fn generate_candidates(
    doc: &Document,
    max_sentence_distance: usize,
) -> Result<Vec<CandidateSkeleton>, CorpusError> {
    doc.validate()?;
    let coverage = mention_coverage(doc)?;
    let (offsets, total) = doc.flat_offsets();
    let flat_tokens: Vec<&String> = doc.sentences.iter().flatten().collect();

    // Mentions in document order.
    let mut order: Vec<usize> = (0..doc.mentions.len()).collect();
    order.sort_by_key(|&i| (offsets[doc.mentions[i].sent] + doc.mentions[i].start, i));

    let mut out = Vec::new();
    for (oi, &a) in order.iter().enumerate() {
        for &b in &order[oi + 1..] {
            let (ma, mb) = (&doc.mentions[a], &doc.mentions[b]);
            if ma.id == mb.id {
                continue;
            }
            let sent_distance = mb.sent.abs_diff(ma.sent);
            if sent_distance >= max_sentence_distance {
                continue;
            }
            let a_start = offsets[ma.sent] + ma.start;
            let a_end = offsets[ma.sent] + ma.end;
            let b_start = offsets[mb.sent] + mb.start;
            let b_end = offsets[mb.sent] + mb.end;

            let left = a_start.saturating_sub(EXPANSION_WORDS)..a_start;
            let between = a_end..b_start.max(a_end);
            let right = b_end..(b_end + EXPANSION_WORDS).min(total);
            let context: Vec<ContextToken> = left
                .chain(between)
                .chain(right)
                .map(|pos| ContextToken {
                    surface: flat_tokens[pos].clone(),
                    position: pos,
                    mention: coverage[pos],
                })
                .collect();

            out.push(CandidateSkeleton {
                doc_id: doc.doc_id.clone(),
                id1: ma.id.clone(),
                id2: mb.id.clone(),
                pos1: a_start,
                pos2: b_start,
                context,
            });
        }
    }
    Ok(out)
}

fn is_numeric_token(token: &str) -> bool {
    if !token.chars().any(|c| c.is_ascii_digit()) {
        return false;
    }
    if token.parse::<f64>().is_ok() {
        return true;
    }
    if let Some(last) = token.chars().last() {
        if last.is_ascii_punctuation() {
            let stripped = &token[..token.len() - last.len_utf8()];
            return stripped.chars().any(|c| c.is_ascii_digit()) && stripped.parse::<f64>().is_ok();
        }
    }
    false
}

fn is_special_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

/// Masks a context in order: the pair's own mentions are dropped, each
/// other-mention occurrence collapses to one "gene0" (keeping the position
/// of its first token), numeric tokens become "NUMBER", and tokens made of
/// nothing but special characters are dropped. Idempotent.
pub fn mask_tokens(
    context: &[ContextToken],
    pair_ids: (&str, &str),
    mentions: &[Mention],
) -> Vec<MaskedToken> {
    let mut out: Vec<MaskedToken> = Vec::with_capacity(context.len());
    // Mention index behind the token pushed last, to collapse a multi-token
    // mention into a single substitute.
    let mut open_mention: Option<usize> = None;
    for tok in context {
        match tok.mention {
            Some(mi) => {
                let id = mentions[mi].id.as_str();
                if id == pair_ids.0 || id == pair_ids.1 {
                    open_mention = None;
                    continue;
                }
                if open_mention != Some(mi) {
                    out.push(MaskedToken { surface: MASK_OTHER_MENTION.to_string(), position: tok.position });
                    open_mention = Some(mi);
                }
            }
            None => {
                open_mention = None;
                let surface = &tok.surface;
                if is_special_token(surface) {
                    continue;
                }
                let masked = if is_numeric_token(surface) { MASK_NUMBER } else { surface.as_str() };
                out.push(MaskedToken { surface: masked.to_string(), position: tok.position });
            }
        }
    }
    out
}

/// Absolute distances from each kept token to the two mention positions,
/// measured on original flat positions and clipped to `max_distance`.
pub fn position_distances(
    tokens: &[MaskedToken],
    pos1: usize,
    pos2: usize,
    max_distance: usize,
) -> (Vec<usize>, Vec<usize>) {
    let clip = |p: usize, m: usize| -> usize { p.abs_diff(m).min(max_distance) };
    let dist1 = tokens.iter().map(|t| clip(t.position, pos1)).collect();
    let dist2 = tokens.iter().map(|t| clip(t.position, pos2)).collect();
    (dist1, dist2)
}

/// label = 1 iff the unordered pair appears in the document's gold pairs.
pub fn label_for_pair(doc: &Document, id1: &str, id2: &str) -> Option<u8> {
    doc.gold_pairs.as_ref().map(|pairs| {
        let hit = pairs.iter().any(|(a, b)| {
            (a == id1 && b == id2) || (a == id2 && b == id1)
        });
        u8::from(hit)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub documents: usize,
    pub candidate_pairs: usize,
    pub kept: usize,
    pub dropped_distance: usize,
    pub dropped_short: usize,
}

/// Distinct-id mention co-occurrences excluded by the sentence-distance
/// rule, for reporting.
fn count_distance_dropped(doc: &Document, max_sentence_distance: usize) -> usize {
    let mut dropped = 0;
    for (i, a) in doc.mentions.iter().enumerate() {
        for b in &doc.mentions[i + 1..] {
            if a.id != b.id && a.sent.abs_diff(b.sent) >= max_sentence_distance {
                dropped += 1;
            }
        }
    }
    dropped
}

/// Full preprocessing: candidates, masking, distance features and labels.
/// Instances shorter than two tokens after masking are dropped (the
/// diagonal-disabled attention needs at least two positions). Output is
/// ordered by (doc_id, pos1, pos2).
pub fn preprocess_documents(
    docs: &[Document],
    max_sentence_distance: usize,
    max_position_distance: usize,
) -> Result<(Vec<CandidateInstance>, PipelineStats), CorpusError> {
    let mut stats = PipelineStats { documents: docs.len(), ..PipelineStats::default() };
    let mut out = Vec::new();
    for doc in docs {
        let skeletons = generate_candidates(doc, max_sentence_distance)?;
        stats.candidate_pairs += skeletons.len();
        stats.dropped_distance += count_distance_dropped(doc, max_sentence_distance);
        for sk in skeletons {
            let masked = mask_tokens(&sk.context, (&sk.id1, &sk.id2), &doc.mentions);
            if masked.len() < 2 {
                stats.dropped_short += 1;
                continue;
            }
            let (dist1, dist2) = position_distances(&masked, sk.pos1, sk.pos2, max_position_distance);
            let label = label_for_pair(doc, &sk.id1, &sk.id2);
            out.push(CandidateInstance {
                doc_id: sk.doc_id,
                pair: (sk.id1, sk.id2),
                pos1: sk.pos1,
                pos2: sk.pos2,
                tokens: masked.into_iter().map(|t| t.surface).collect(),
                dist1,
                dist2,
                label,
            });
        }
    }
    out.sort_by(|a, b| {
        (&a.doc_id, a.pos1, a.pos2, &a.pair)
            .cmp(&(&b.doc_id, b.pos1, b.pos2, &b.pair))
    });
    stats.kept = out.len();
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Tokens ordered by (frequency desc, token asc), with the unknown
    /// token pinned at index 0.
    pub fn build<'a>(token_lists: impl Iterator<Item = &'a [String]>) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for list in token_lists {
            for t in list {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        counts.remove(UNK_TOKEN);
        let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut freq = vec![0usize];
        for (t, c) in entries {
            tokens.push(t);
            freq.push(c);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, counts: freq, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    /// Index of a token, falling back to the unknown index 0.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (t, c) in self.tokens.iter().zip(self.counts.iter()) {
            writeln!(out, "{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vocab, CorpusError> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, count) = line.split_once('\t').ok_or_else(|| CorpusError::MalformedDocument {
                path: display.clone(),
                line: i + 1,
                msg: "expected `token<TAB>count`".to_string(),
            })?;
            let count: usize = count.parse().map_err(|_| CorpusError::MalformedDocument {
                path: display.clone(),
                line: i + 1,
                msg: format!("bad count '{count}'"),
            })?;
            tokens.push(token.to_string());
            counts.push(count);
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, counts, index })
    }
}

// ---------------------------------------------------------------------------
// Corpus and instance files

pub fn read_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedDocument {
            path: display.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        doc.validate().map_err(|e| match e {
            CorpusError::MalformedDocument { msg, .. } => CorpusError::MalformedDocument {
                path: display.clone(),
                line: i + 1,
                msg,
            },
            other => other,
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// The serialized form of an instance, one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub tokens: Vec<String>,
    pub dist1: Vec<usize>,
    pub dist2: Vec<usize>,
    pub pair: (String, String),
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl From<CandidateInstance> for InstanceRecord {
    fn from(inst: CandidateInstance) -> Self {
        InstanceRecord {
            tokens: inst.tokens,
            dist1: inst.dist1,
            dist2: inst.dist2,
            pair: inst.pair,
            doc_id: inst.doc_id,
            label: inst.label,
        }
    }
}

pub fn write_instances(path: &Path, instances: &[InstanceRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<InstanceRecord>, CorpusError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedDocument {
            path: display.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Mention surfaces per entity id, for mention-average embeddings: all
/// tokens of all mentions of the entity, in document order.
pub fn mention_words(docs: &[Document]) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for doc in docs {
        for m in &doc.mentions {
            let entry = map.entry(m.id.clone()).or_default();
            if let Some(sentence) = doc.sentences.get(m.sent) {
                for t in &sentence[m.start.min(sentence.len())..m.end.min(sentence.len())] {
                    entry.push(t.clone());
                }
            }
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Instance embedding (concrete matrices, outside the autodiff graph)

/// Context embeddings with position information plus the pair's knowledge
/// vectors.
#[derive(Clone, Debug)]
pub struct EmbeddedInstance {
    pub x1: Matrix,
    pub x2: Matrix,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub er: Vec<f64>,
    pub label: Option<u8>,
}

/// Adds the position embedding for each distance channel to the word
/// embedding of every context token: x_i[l] = word(token_l) + pos(dist_i[l]).
/// Out-of-vocabulary tokens use the row for the unknown token.
pub fn embed_instance(
    inst: &InstanceRecord,
    vocab: &Vocab,
    word_table: &Matrix,
    position_table: &Matrix,
    kb: &KbEmbeddings,
    store: &TripleStore,
    mention_words: &BTreeMap<String, Vec<String>>,
    word_vectors: &VectorTable,
) -> Result<EmbeddedInstance, CorpusError> {
    let d = word_table.cols();
    if position_table.cols() != d {
        return Err(CorpusError::MalformedDocument {
            path: inst.doc_id.clone(),
            line: 0,
            msg: format!(
                "word and position embedding widths differ: {d} vs {}",
                position_table.cols()
            ),
        });
    }
    let l = inst.tokens.len();
    let build = |dists: &[usize]| -> Matrix {
        let mut x = Matrix::zeros(l, d);
        for (row, (tok, &dist)) in inst.tokens.iter().zip(dists.iter()).enumerate() {
            let widx = vocab.lookup(tok);
            let pidx = dist.min(position_table.rows() - 1);
            for c in 0..d {
                x.set(row, c, word_table.at(widx, c) + position_table.at(pidx, c));
            }
        }
        x
    };
    let empty = Vec::new();
    let words1 = mention_words.get(&inst.pair.0).unwrap_or(&empty);
    let words2 = mention_words.get(&inst.pair.1).unwrap_or(&empty);
    Ok(EmbeddedInstance {
        x1: build(&inst.dist1),
        x2: build(&inst.dist2),
        e1: kb::entity_embedding(kb, &inst.pair.0, words1, word_vectors),
        e2: kb::entity_embedding(kb, &inst.pair.1, words2, word_vectors),
        er: kb::relation_embedding_for_pair(&inst.pair.0, &inst.pair.1, store, kb),
        label: inst.label,
    })
}
