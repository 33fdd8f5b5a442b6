//! Hashtag recommendation for micro-videos.
//!
//! Posts carry visual, acoustic and text unit features. Each modality is pooled by
//! attention, placed as a node in a graph with users and similar posts, refined by
//! neighbourhood aggregation, and fused with the author's embedding before a softmax
//! over the hashtag vocabulary.

pub mod attention;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod graph;
pub mod modality;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use modality::Modality;
