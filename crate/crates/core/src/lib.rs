//! Training-free zero-shot image classification with attention-guided crops.
//!
//! The engine samples crop anchors from a self-supervised model's class-token
//! attention, encodes each crop twice (as a pixel crop through the whole
//! encoder, and as a crop of the pre-final-layer token grid through the last
//! layers only), and scores classes by soft-matching every crop against a
//! catalog of per-class description embeddings.

pub mod backend;
pub mod catalog;
pub mod config;
pub mod dataset;
pub mod error;
pub mod feat_select;
pub mod fixtures;
pub mod numeric;
pub mod overlay;
pub mod pipeline;
pub mod raw_select;
pub mod resample;
pub mod rng;
pub mod sampler;
pub mod scoring;
pub mod selftest;
pub mod tensor;

pub use backend::{AttentionSource, Branch, EmbeddingSet, ReferenceEncoder, SplitEncoder, SplitEncoderSpec};
pub use catalog::DescriptionCatalog;
pub use error::{Error, Result};
pub use numeric::UnitVector;
pub use tensor::{read_tensor, write_tensor, Tensor};
