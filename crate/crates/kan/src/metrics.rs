//! Document-level aggregation and micro-averaged precision/recall/F1.
//!
//! A pair is predicted positive as soon as any of its candidate instances
//! is; its score is the best positive probability among them. Scoring is
//! set arithmetic over (document, canonical pair) keys, in exact-match mode
//! or with both sides mapped through an id-equivalence table first.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::CorpusError;
use crate::kb::canonical_pair;

/// One instance-level model decision.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub doc_id: String,
    pub pair: (String, String),
    pub predicted_positive: bool,
    pub positive_prob: f64,
}

/// One (document, pair) decision after aggregation. The pair is in
/// canonical lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub pair: (String, String),
    pub predicted: bool,
    pub score: f64,
}

/// OR over instance decisions, max over positive probabilities, one record
/// per (doc_id, pair). Output is sorted, so instance order never matters.
pub fn aggregate_predictions(instances: &[InstancePrediction]) -> Vec<PredictionRecord> {
    let mut map: BTreeMap<(String, (String, String)), (bool, f64)> = BTreeMap::new();
    for inst in instances {
        let key = (inst.doc_id.clone(), canonical_pair(&inst.pair.0, &inst.pair.1));
        let entry = map.entry(key).or_insert((false, f64::NEG_INFINITY));
        entry.0 |= inst.predicted_positive;
        if inst.positive_prob > entry.1 {
            entry.1 = inst.positive_prob;
        }
    }
    map.into_iter()
        .map(|((doc_id, pair), (predicted, score))| PredictionRecord { doc_id, pair, predicted, score })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> MetricReport {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricReport { tp, fp, fn_, precision, recall, f1 }
    }
}

pub type PairKey = (String, (String, String));

pub fn pair_key(doc_id: &str, id1: &str, id2: &str) -> PairKey {
    (doc_id.to_string(), canonical_pair(id1, id2))
}

#[derive(Clone, Debug)]
pub struct ScoreOutcome {
    pub report: MetricReport,
    /// Distinct ids that had no entry in the id map (left unmapped).
    pub unmapped_ids: usize,
}

/// Micro-averaged precision/recall/F1 from global TP/FP/FN counts. With an
/// id map, both sides are mapped (identity for missing ids, counted as
/// warnings), re-canonicalized and re-deduplicated before counting.
pub fn micro_prf(
    predictions: &BTreeSet<PairKey>,
    gold: &BTreeSet<PairKey>,
    id_map: Option<&BTreeMap<String, String>>,
) -> ScoreOutcome {
    let mut unmapped: BTreeSet<String> = BTreeSet::new();
    let remap = |set: &BTreeSet<PairKey>, unmapped: &mut BTreeSet<String>| -> BTreeSet<PairKey> {
        match id_map {
            None => set.clone(),
            Some(map) => set
                .iter()
                .map(|(doc, (a, b))| {
                    let translate = |id: &String, unmapped: &mut BTreeSet<String>| -> String {
                        match map.get(id) {
                            Some(mapped) => mapped.clone(),
                            None => {
                                unmapped.insert(id.clone());
                                id.clone()
                            }
                        }
                    };
                    let ma = translate(a, unmapped);
                    let mb = translate(b, unmapped);
                    (doc.clone(), canonical_pair(&ma, &mb))
                })
                .collect(),
        }
    };
    let pred = remap(predictions, &mut unmapped);
    let gold = remap(gold, &mut unmapped);

    let tp = pred.intersection(&gold).count();
    let fp = pred.difference(&gold).count();
    let fn_ = gold.difference(&pred).count();
    ScoreOutcome {
        report: MetricReport::from_counts(tp, fp, fn_),
        unmapped_ids: unmapped.len(),
    }
}

// ---------------------------------------------------------------------------
// Files

/// Predictions file: `doc_id<TAB>id1<TAB>id2<TAB>score`, canonical pair
/// order, six-decimal scores, positive predictions only, sorted.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut positives: Vec<&PredictionRecord> = records.iter().filter(|r| r.predicted).collect();
    positives.sort_by(|a, b| (&a.doc_id, &a.pair).cmp(&(&b.doc_id, &b.pair)));
    for r in positives {
        writeln!(out, "{}\t{}\t{}\t{:.6}", r.doc_id, r.pair.0, r.pair.1, r.score)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<BTreeSet<PairKey>, CorpusError> {
    read_pair_file(path, 4)
}

/// Gold file: `doc_id<TAB>id1<TAB>id2`.
pub fn load_gold(path: &Path) -> Result<BTreeSet<PairKey>, CorpusError> {
    read_pair_file(path, 3)
}

fn read_pair_file(path: &Path, expect_fields: usize) -> Result<BTreeSet<PairKey>, CorpusError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut out = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != expect_fields {
            return Err(CorpusError::MalformedDocument {
                path: display,
                line: i + 1,
                msg: format!("expected {expect_fields} tab-separated fields, got {}", fields.len()),
            });
        }
        out.insert(pair_key(fields[0], fields[1], fields[2]));
    }
    Ok(out)
}

/// Id-mapping file: `entity-id<TAB>class-id`.
pub fn load_id_map(path: &Path) -> Result<BTreeMap<String, String>, CorpusError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, class) = line.split_once('\t').ok_or_else(|| CorpusError::MalformedDocument {
            path: display.clone(),
            line: i + 1,
            msg: "expected `entity-id<TAB>class-id`".to_string(),
        })?;
        out.insert(id.to_string(), class.to_string());
    }
    Ok(out)
}
