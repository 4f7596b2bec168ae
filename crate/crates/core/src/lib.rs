//! Next point-of-interest recommendation engine.
//!
//! The pipeline goes from raw check-in logs through preprocessing, a
//! popularity-weighted trajectory flow map, GCN POI embeddings, a transition
//! attention map, contextual embedding fusion, a transformer encoder with
//! three decoder heads, an operational-hours filter, and finally ranked
//! top-k recommendations with a training and evaluation harness.

pub mod dataio;
pub mod embeddings;
pub mod error;
pub mod flowgraph;
pub mod gnn;
pub mod model;
pub mod numcore;
pub mod popularity;
pub mod trainer;

pub use error::{CoreError, Result};
pub use numcore::rng::{Rng, Stream};
pub use numcore::tensor::Tensor;
