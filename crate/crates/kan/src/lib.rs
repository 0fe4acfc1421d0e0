//! Knowledge-aware attention network for protein-protein interaction
//! extraction.
//!
//! The crate covers the whole pipeline at desk scale: TransE embeddings
//! learned from interaction triples, document preprocessing into masked
//! candidate instances, a two-component attention encoder with
//! diagonal-disabled multi-head attention and multi-dimensional attention
//! pooling, Adadelta training, micro-averaged evaluation, and attention
//! heatmap export. Everything runs in 64-bit floats on a minimal
//! reverse-mode differentiation core whose gradients are verified against
//! central finite differences.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kb;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;
pub mod vecfile;
