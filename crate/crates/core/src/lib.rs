//! Text grouping adapter.
//!
//! Converts text-detector outputs into instance masks, pools instance
//! features from a fused pixel embedding map, trains a self-attention head
//! with one-to-many group-mask supervision and an affinity loss, and groups
//! instances into paragraphs by thresholding the predicted affinities.

pub mod assembly;
pub mod cascade;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod grouping_head;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pixel_embedding;
pub mod training;

pub use error::{Error, Result};
