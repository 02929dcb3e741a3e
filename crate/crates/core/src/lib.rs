//! Source-free universal domain adaptation with global one-vs-all clustering
//! and local k-NN consensus.
//!
//! The crate trains a small source classifier on synthetic data, adapts its
//! feature module to an unlabeled target domain that may contain fewer
//! (partial-set), more (open-set) or different (open-partial-set) classes,
//! and scores the result with entropy-based unknown rejection.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default). Every parallel section computes independent items and
//! reduces them in a fixed order, so results are bit-identical to the
//! sequential build.

pub mod adapt;
pub mod cli;
pub mod clustering;
pub mod data;
pub mod error;
pub mod global;
pub mod local;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod par;

pub use error::{GlcError, Result};
pub use numeric::{Matrix, RngState};
