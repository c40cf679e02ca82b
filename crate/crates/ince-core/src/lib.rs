//! Tabular deep-learning engine built around interaction-network contextual
//! embeddings: per-column embeddings, a fully-connected feature graph with a
//! CLS virtual node, stacked interaction-network layers, an MLP decoder, a
//! transformer-encoder baseline, closed-form parameter accounting, a
//! feature-interaction interpretability pipeline, and a benchmark harness.

pub mod adam;
pub mod bench;
pub mod checkpoint;
pub mod columnar;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod in_encoder;
pub mod interpret;
pub mod mat;
pub mod mlp;
pub mod model;
pub mod params;
pub mod rng;
pub mod schema;
pub mod shapley;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod transformer;

pub use error::{Error, Result};
pub use mat::Mat;
pub use tape::{NodeId, Tape};
