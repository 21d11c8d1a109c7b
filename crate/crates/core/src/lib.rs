//! Schema inference over backbone token features.
//!
//! Token embeddings and attention from a vision transformer are discretized
//! into ingredients of a visual vocabulary and turned into ingredient-relation
//! graphs. A per-class atlas of such graphs is learned together with a shallow
//! graph-convolutional matcher, and images are classified by the inner
//! product of pooled graph embeddings.

pub mod atlas;
mod binio;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod feat2graph;
pub mod feature_io;
pub mod matcher;
pub mod numerics;
pub mod vocabulary;

pub use error::{Error, Result};
