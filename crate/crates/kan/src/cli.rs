//! Command-line surface: preprocess, train-kb, train, eval, visualize.
//!
//! One flat key=value config file drives everything; any key can be
//! overridden on the command line with `--key value`. Every command is a
//! pure function of (config, input files, seed), so reruns produce
//! byte-identical outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::{self, InstanceRecord, Vocab};
use crate::error::{CorpusError, KbError, ModelError};
use crate::kb::{self, KbEmbeddings, NormOrder, TransEConfig, TripleStore};
use crate::metrics::{self, InstancePrediction, PairKey};
use crate::model::{
    self, export_attention, init_params, kan_forward, prepare_input, EncoderKind, EntityMode,
    ModelConfig, ModelInput,
};
use crate::train::{self, TrainConfig};
use crate::vecfile::{self, VectorTable};

/// Errors mapped onto process exit codes: usage/config problems exit 1,
/// data problems exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) => m,
            CliError::Data(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::UnknownVariant { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

const KNOWN_KEYS: [&str; 25] = [
    "variant",
    "d",
    "heads",
    "ffn_inner",
    "n_blocks",
    "max_sentence_distance",
    "max_position_distance",
    "epochs",
    "batch_size",
    "learning_rate",
    "adadelta_rho",
    "adadelta_eps",
    "seed",
    "dev_fraction",
    "transe_epochs",
    "transe_learning_rate",
    "transe_margin",
    "transe_negatives",
    "transe_norm",
    "corpus",
    "triples",
    "word_embeddings",
    "id_map",
    "gold",
    "output_dir",
];

// Keys only some commands read.
const EXTRA_KEYS: [&str; 3] = ["doc_id", "pair", "heatmap_block"];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn from_sources(
        config_path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for (k, v) in overrides {
            values.insert(k.clone(), v.clone());
        }
        for key in values.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) && !EXTRA_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown config key '{key}'")));
            }
        }
        Ok(RunConfig { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("bad value '{raw}' for key '{key}'"))),
        }
    }

    fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("config key '{key}' is required for this command")))
    }

    fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed", 1u64)
    }

    pub fn variant(&self) -> &str {
        self.get("variant").unwrap_or("kan")
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let base = ModelConfig {
            d: self.parse("d", 100usize)?,
            heads: self.parse("heads", 4usize)?,
            ffn_inner: self.parse("ffn_inner", 400usize)?,
            n_blocks: self.parse("n_blocks", 2usize)?,
            max_distance: self.parse("max_position_distance", 100usize)?,
            ..ModelConfig::default()
        };
        let cfg = base.with_variant(self.variant())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            learning_rate: self.parse("learning_rate", 0.1f64)?,
            batch_size: self.parse("batch_size", 100usize)?,
            epochs: self.parse("epochs", 10usize)?,
            adadelta_rho: self.parse("adadelta_rho", 0.95f64)?,
            adadelta_eps: self.parse("adadelta_eps", 1e-6f64)?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn transe_config(&self) -> Result<TransEConfig, CliError> {
        let norm = match self.parse("transe_norm", 2usize)? {
            1 => NormOrder::L1,
            2 => NormOrder::L2,
            other => return Err(CliError::Usage(format!("transe_norm must be 1 or 2, got {other}"))),
        };
        Ok(TransEConfig {
            dim: self.parse("d", 100usize)?,
            margin: self.parse("transe_margin", 1.0f64)?,
            learning_rate: self.parse("transe_learning_rate", 0.01f64)?,
            epochs: self.parse("transe_epochs", 100usize)?,
            negatives_per_positive: self.parse("transe_negatives", 1usize)?,
            norm_order: norm,
            seed: self.seed()?,
        })
    }

    pub fn max_sentence_distance(&self) -> Result<usize, CliError> {
        self.parse("max_sentence_distance", corpus::DEFAULT_MAX_SENTENCE_DISTANCE)
    }

    pub fn max_position_distance(&self) -> Result<usize, CliError> {
        self.parse("max_position_distance", corpus::DEFAULT_MAX_POSITION_DISTANCE)
    }

    pub fn output_dir(&self) -> Result<PathBuf, CliError> {
        self.require_path("output_dir")
    }
}

// ---------------------------------------------------------------------------
// Shared loading

fn load_word_vectors(cfg: &RunConfig) -> Result<Option<VectorTable>, CliError> {
    match cfg.optional_path("word_embeddings") {
        Some(path) => Ok(Some(vecfile::read_vectors(&path)?)),
        None => Ok(None),
    }
}

struct KbContext {
    store: TripleStore,
    kb: KbEmbeddings,
    words: VectorTable,
    mention_words: BTreeMap<String, Vec<String>>,
}

/// Loads whatever knowledge inputs the model config needs: the triple
/// store and learned embeddings for TransE entities or relation features,
/// word vectors for mention-average fallbacks.
fn load_kb_context(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    docs: &[corpus::Document],
) -> Result<KbContext, CliError> {
    let needs_kb = model_cfg.entity_mode == EntityMode::TransE || model_cfg.use_relation_embedding;
    let store = if needs_kb {
        kb::load_triples(&cfg.require_path("triples")?)?
    } else {
        TripleStore::new()
    };
    let kb = if needs_kb {
        let out = cfg.output_dir()?;
        let entities = vecfile::read_vectors(&out.join("entities.vec"))?;
        let relations = vecfile::read_vectors(&out.join("relations.vec"))?;
        if entities.dim != model_cfg.d {
            return Err(CliError::Usage(format!(
                "entity embeddings have dim {}, model wants {}",
                entities.dim, model_cfg.d
            )));
        }
        KbEmbeddings::from_tables(entities, relations)
    } else {
        KbEmbeddings { dim: model_cfg.d, entities: BTreeMap::new(), relations: BTreeMap::new() }
    };
    let words = load_word_vectors(cfg)?.unwrap_or_else(|| VectorTable::new(0));
    Ok(KbContext { store, kb, words, mention_words: corpus::mention_words(docs) })
}

fn prepare_inputs(
    records: &[InstanceRecord],
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    ctx: &KbContext,
) -> Vec<ModelInput> {
    records
        .iter()
        .map(|rec| prepare_input(rec, model_cfg, vocab, &ctx.kb, &ctx.store, &ctx.mention_words, &ctx.words))
        .collect()
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<String, CliError> {
    let corpus_path = cfg.require_path("corpus")?;
    let out_dir = cfg.output_dir()?;
    std::fs::create_dir_all(&out_dir)?;

    let docs = corpus::read_corpus(&corpus_path)?;
    let (instances, stats) =
        corpus::preprocess_documents(&docs, cfg.max_sentence_distance()?, cfg.max_position_distance()?)?;
    let records: Vec<InstanceRecord> = instances.into_iter().map(InstanceRecord::from).collect();
    corpus::write_instances(&out_dir.join("instances.jsonl"), &records)?;

    let vocab = Vocab::build(records.iter().map(|r| r.tokens.as_slice()));
    vocab.write(&out_dir.join("vocab.txt"))?;

    let mut summary = String::new();
    let _ = writeln!(summary, "documents\t{}", stats.documents);
    let _ = writeln!(summary, "instances\t{}", stats.kept);
    let _ = writeln!(summary, "dropped_by_distance\t{}", stats.dropped_distance);
    let _ = writeln!(summary, "dropped_too_short\t{}", stats.dropped_short);
    let _ = writeln!(summary, "vocab\t{}", vocab.len());
    Ok(summary)
}

pub fn cmd_train_kb(cfg: &RunConfig) -> Result<String, CliError> {
    let triples_path = cfg.require_path("triples")?;
    let out_dir = cfg.output_dir()?;
    std::fs::create_dir_all(&out_dir)?;

    let store = kb::load_triples(&triples_path)?;
    let transe_cfg = cfg.transe_config()?;

    let mut summary = String::new();
    if store.is_empty() {
        // An empty KB is a warning, not an error: ship empty embedding files.
        vecfile::write_vectors(&out_dir.join("entities.vec"), &VectorTable::new(transe_cfg.dim))?;
        vecfile::write_vectors(&out_dir.join("relations.vec"), &VectorTable::new(transe_cfg.dim))?;
        let _ = writeln!(summary, "warning: empty triple store");
        let _ = writeln!(summary, "entities\t0\nrelations\t0");
        return Ok(summary);
    }

    // Mention-average initialization when a corpus and word vectors are at
    // hand; entities without usable mentions start from the normal draw.
    let mut init = BTreeMap::new();
    if let (Some(words), Some(corpus_path)) = (load_word_vectors(cfg)?, cfg.optional_path("corpus")) {
        if words.dim != transe_cfg.dim {
            return Err(CliError::Usage(format!(
                "word vector dim {} does not match embedding dim {}",
                words.dim, transe_cfg.dim
            )));
        }
        let docs = corpus::read_corpus(&corpus_path)?;
        let mention_words = corpus::mention_words(&docs);
        for id in store.entities() {
            if let Some(tokens) = mention_words.get(id) {
                let v = kb::init_entity_from_words(tokens, &words);
                if v.iter().any(|&x| x != 0.0) {
                    init.insert(id.clone(), v);
                }
            }
        }
    }

    let kb = kb::transe_train(&store, &transe_cfg, &init)?;
    vecfile::write_vectors(&out_dir.join("entities.vec"), &kb.entity_table())?;
    vecfile::write_vectors(&out_dir.join("relations.vec"), &kb.relation_table())?;
    let _ = writeln!(summary, "triples\t{}", store.len());
    let _ = writeln!(summary, "entities\t{}", kb.entities.len());
    let _ = writeln!(summary, "relations\t{}", kb.relations.len());
    let _ = writeln!(summary, "mention_initialized\t{}", init.len());
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let out_dir = cfg.output_dir()?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;

    let records = corpus::read_instances(&out_dir.join("instances.jsonl"))?;
    if records.is_empty() {
        return Err(CliError::Usage("no instances to train on; run preprocess first".into()));
    }
    let vocab = Vocab::read(&out_dir.join("vocab.txt"))?;
    let docs = match cfg.optional_path("corpus") {
        Some(p) => corpus::read_corpus(&p)?,
        None => Vec::new(),
    };
    let ctx = load_kb_context(cfg, &model_cfg, &docs)?;
    let word_vectors = if ctx.words.dim == model_cfg.d { Some(&ctx.words) } else { None };

    let inputs = prepare_inputs(&records, &model_cfg, &vocab, &ctx);
    let dev_fraction: f64 = cfg.parse("dev_fraction", 0.0f64)?;
    let (train_set, dev_set) = split_by_document(&inputs, dev_fraction);

    let init = init_params(&model_cfg, &vocab, word_vectors, cfg.seed()?)?;
    let outcome = train::train(&model_cfg, &train_cfg, &train_set, dev_set.as_deref(), init)?;

    model::save_checkpoint(&out_dir.join("checkpoint"), &model_cfg, &outcome.params)?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("loss.log"))?);
    let mut summary = String::new();
    for entry in &outcome.log {
        writeln!(log_file, "{}\t{:.6}\t{:.6}", entry.epoch, entry.mean_loss, entry.train_accuracy)?;
        let _ = writeln!(
            summary,
            "epoch {}\tloss {:.6}\taccuracy {:.6}",
            entry.epoch, entry.mean_loss, entry.train_accuracy
        );
    }
    let _ = writeln!(summary, "kept_epoch\t{}", outcome.kept_epoch);
    Ok(summary)
}

/// Instances of the last `fraction` of documents become the dev split.
fn split_by_document(inputs: &[ModelInput], fraction: f64) -> (Vec<ModelInput>, Option<Vec<ModelInput>>) {
    if fraction <= 0.0 {
        return (inputs.to_vec(), None);
    }
    let mut doc_ids: Vec<&str> = Vec::new();
    for input in inputs {
        if doc_ids.last() != Some(&input.doc_id.as_str()) && !doc_ids.contains(&input.doc_id.as_str()) {
            doc_ids.push(&input.doc_id);
        }
    }
    let dev_docs = ((doc_ids.len() as f64 * fraction).ceil() as usize).min(doc_ids.len().saturating_sub(1));
    let cut: BTreeSet<&str> = doc_ids[doc_ids.len() - dev_docs..].iter().copied().collect();
    let (dev, train): (Vec<ModelInput>, Vec<ModelInput>) =
        inputs.iter().cloned().partition(|i| cut.contains(i.doc_id.as_str()));
    if dev.is_empty() {
        (train, None)
    } else {
        (train, Some(dev))
    }
}

fn checkpoint_and_vocab(cfg: &RunConfig) -> Result<(ModelConfig, crate::graph::ParamStore, Vocab), CliError> {
    let out_dir = cfg.output_dir()?;
    let ckpt_dir = out_dir.join("checkpoint");
    if !ckpt_dir.join("params.txt").exists() {
        return Err(CliError::Data(format!(
            "checkpoint not found at {}; run train first",
            ckpt_dir.display()
        )));
    }
    let (model_cfg, params) = model::load_checkpoint(&ckpt_dir)?;
    let vocab = Vocab::read(&out_dir.join("vocab.txt"))?;
    Ok((model_cfg, params, vocab))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let out_dir = cfg.output_dir()?;
    let (model_cfg, params, vocab) = checkpoint_and_vocab(cfg)?;
    let corpus_path = cfg.require_path("corpus")?;
    let docs = corpus::read_corpus(&corpus_path)?;
    let ctx = load_kb_context(cfg, &model_cfg, &docs)?;

    let (instances, _) =
        corpus::preprocess_documents(&docs, cfg.max_sentence_distance()?, cfg.max_position_distance()?)?;
    let records: Vec<InstanceRecord> = instances.into_iter().map(InstanceRecord::from).collect();
    let inputs = prepare_inputs(&records, &model_cfg, &vocab, &ctx);

    let mut predictions = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let trace = train::forward_trace(input, &params, &model_cfg)?;
        predictions.push(InstancePrediction {
            doc_id: input.doc_id.clone(),
            pair: input.pair.clone(),
            predicted_positive: trace.predicted() == 1,
            positive_prob: trace.positive_prob(),
        });
    }
    let aggregated = metrics::aggregate_predictions(&predictions);
    metrics::write_predictions(&out_dir.join("predictions.tsv"), &aggregated)?;

    let predicted_set: BTreeSet<PairKey> = aggregated
        .iter()
        .filter(|r| r.predicted)
        .map(|r| (r.doc_id.clone(), r.pair.clone()))
        .collect();
    let gold_set: BTreeSet<PairKey> = match cfg.optional_path("gold") {
        Some(path) => metrics::load_gold(&path)?,
        None => docs
            .iter()
            .flat_map(|d| {
                d.gold_pairs.iter().flatten().map(|(a, b)| metrics::pair_key(&d.doc_id, a, b))
            })
            .collect(),
    };

    let exact = metrics::micro_prf(&predicted_set, &gold_set, None);
    let mut lines = format!(
        "exact\t{:.6}\t{:.6}\t{:.6}\ttp={} fp={} fn={}\n",
        exact.report.precision, exact.report.recall, exact.report.f1,
        exact.report.tp, exact.report.fp, exact.report.fn_,
    );
    if let Some(map_path) = cfg.optional_path("id_map") {
        let id_map = metrics::load_id_map(&map_path)?;
        let mapped = metrics::micro_prf(&predicted_set, &gold_set, Some(&id_map));
        let _ = writeln!(
            lines,
            "mapped\t{:.6}\t{:.6}\t{:.6}\ttp={} fp={} fn={} unmapped_ids={}",
            mapped.report.precision, mapped.report.recall, mapped.report.f1,
            mapped.report.tp, mapped.report.fp, mapped.report.fn_, mapped.unmapped_ids,
        );
    }
    std::fs::write(out_dir.join("metrics.txt"), &lines)?;
    Ok(lines)
}

pub fn cmd_visualize(cfg: &RunConfig) -> Result<String, CliError> {
    let out_dir = cfg.output_dir()?;
    let (model_cfg, params, vocab) = checkpoint_and_vocab(cfg)?;
    if model_cfg.encoder == EncoderKind::CnnBaseline {
        return Err(CliError::Usage("the convolutional baseline has no attention weights to export".into()));
    }
    let doc_id = cfg
        .get("doc_id")
        .ok_or_else(|| CliError::Usage("config key 'doc_id' is required for visualize".into()))?
        .to_string();
    let pair_raw = cfg
        .get("pair")
        .ok_or_else(|| CliError::Usage("config key 'pair' is required for visualize (id1,id2)".into()))?;
    let (p1, p2) = pair_raw
        .split_once(',')
        .ok_or_else(|| CliError::Usage(format!("bad pair '{pair_raw}', expected id1,id2")))?;

    let corpus_path = cfg.require_path("corpus")?;
    let docs = corpus::read_corpus(&corpus_path)?;
    let ctx = load_kb_context(cfg, &model_cfg, &docs)?;
    let (instances, _) =
        corpus::preprocess_documents(&docs, cfg.max_sentence_distance()?, cfg.max_position_distance()?)?;

    let block = cfg.parse("heatmap_block", model_cfg.n_blocks - 1)?;
    let wanted = kb::canonical_pair(p1, p2);
    let heat_dir = out_dir.join("heatmaps");
    std::fs::create_dir_all(&heat_dir)?;

    let mut written = 0usize;
    for inst in instances
        .into_iter()
        .filter(|i| i.doc_id == doc_id && kb::canonical_pair(&i.pair.0, &i.pair.1) == wanted)
    {
        let rec = InstanceRecord::from(inst);
        let input = prepare_input(&rec, &model_cfg, &vocab, &ctx.kb, &ctx.store, &ctx.mention_words, &ctx.words);
        let mut g = crate::graph::Graph::new();
        let pass = kan_forward(&mut g, &input, &params, &model_cfg)?;
        let grids = export_attention(&pass.trace, block)?;
        for (c, grid) in grids.iter().enumerate() {
            let suffix = if c == 0 { "m1" } else { "m2" };
            let name = format!("{}_{}_{}_i{}.{}", doc_id, wanted.0, wanted.1, written, suffix);
            model::write_heatmap(&heat_dir.join(name), &rec.tokens, grid)?;
        }
        written += 1;
    }
    if written == 0 {
        return Err(CliError::Data(format!(
            "no candidate instance for pair {p1},{p2} in document {doc_id}"
        )));
    }
    Ok(format!("instances\t{written}\nblock\t{block}\n"))
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch

pub const USAGE: &str = "usage: kan <preprocess|train-kb|train|eval|visualize> [--config FILE] [--key value ...]";

pub fn run(args: &[String]) -> Result<String, CliError> {
    let command = args.first().ok_or_else(|| CliError::Usage(USAGE.to_string()))?;
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument '{flag}'; {USAGE}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("flag '--{key}' needs a value")))?;
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            overrides.push((key.replace('-', "_"), value.clone()));
        }
        i += 2;
    }
    let cfg = RunConfig::from_sources(config_path.as_deref(), &overrides)?;
    match command.as_str() {
        "preprocess" => cmd_preprocess(&cfg),
        "train-kb" => cmd_train_kb(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "visualize" => cmd_visualize(&cfg),
        other => Err(CliError::Usage(format!("unknown command '{other}'; {USAGE}"))),
    }
}
