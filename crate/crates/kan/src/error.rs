//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the differentiable core.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("matrix of {rows}x{cols} cannot hold {len} values")]
    BadShape { rows: usize, cols: usize, len: usize },

    #[error("{op}: incompatible shapes {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("mask of size {mask} does not fit {rows}x{cols} scores")]
    MaskSizeMismatch { mask: usize, rows: usize, cols: usize },

    #[error("softmax row {row} has no finite entry after masking")]
    DegenerateSoftmaxRow { row: usize },

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),

    #[error("gather index {index} out of range for table with {rows} rows")]
    GatherOutOfRange { index: usize, rows: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("expected {expected} labels for {expected} logit rows, got {got}")]
    LabelCountMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered while checking parameter '{0}'")]
    NonFinite(String),
}

/// Errors raised by the knowledge-base module.
#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}:{line}: expected 3 tab-separated fields, got {fields}")]
    MalformedTriple { path: String, line: usize, fields: usize },

    #[error("{path}:{line}: {msg}")]
    MalformedVector { path: String, line: usize, msg: String },

    #[error("embedding dimension mismatch: init vector for '{entity}' has {got}, config wants {want}")]
    InitDimensionMismatch { entity: String, got: usize, want: usize },

    #[error("vector length mismatch: {left} vs {right}")]
    VectorLengthMismatch { left: usize, right: usize },

    #[error("cannot train on an empty triple store")]
    EmptyStore,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by the preprocessing pipeline.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    MalformedDocument { path: String, line: usize, msg: String },

    #[error("document {doc_id}: mention span {id} [{start}..{end}) outside sentence {sent} of length {len}")]
    SpanOutOfRange {
        doc_id: String,
        id: String,
        sent: usize,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("document {doc_id}: overlapping mention spans {a} and {b} at flat positions {pos_a} and {pos_b}")]
    OverlappingMentions {
        doc_id: String,
        a: String,
        b: String,
        pos_a: usize,
        pos_b: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by model construction, training and evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),

    #[error("unknown variant '{got}'; valid names: {valid}")]
    UnknownVariant { got: String, valid: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
