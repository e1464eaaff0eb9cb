//! Multi-level graph contrastive learning.
//!
//! The library trains a GCN encoder without labels by contrasting two views
//! of the same graph: the observed topology and a feature-space kNN graph
//! rebuilt from the encoder's own embeddings. Agreement is scored at two
//! levels, per-node (corresponding nodes across views are positives, all
//! other nodes are negatives) and per-graph (pooled summaries against
//! summaries of feature-shuffled corruptions). Embedding quality is measured
//! by a logistic-regression probe on frozen embeddings.
//!
//! Modules are layered bottom-up: [`sparse`] and [`graph`] hold data,
//! [`tensor`] provides a small reverse-mode autodiff tape, [`augment`] builds
//! alternative views, [`model`]/[`loss`]/[`pipeline`] compose them into the
//! training loop, and [`eval`] runs the probe protocol.

// Ties the OpenBLAS provider into the final binary so `ndarray`'s BLAS
// kernels resolve at link time.
extern crate blas_src;

pub mod augment;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod sparse;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
