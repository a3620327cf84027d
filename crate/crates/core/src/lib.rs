//! Multi-view knowledge-graph retrieval: graph storage, per-head structural
//! encodings, the gated triple scorer, training, evaluation and head analysis.

pub mod dde;
pub mod headlab;
pub mod embedding;
pub mod error;
pub mod kg;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod retriever;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
