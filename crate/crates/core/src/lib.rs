//! Vector-quantized prompt learning for paraphrase generation.
//!
//! A prompt encoder maps an input sentence to `M` continuous vectors, each
//! snapped to its nearest entry in a learned codebook. The quantized prompt is
//! prepended to the sentence embeddings and fed to a frozen encoder-decoder
//! language model, so the codebook is the only channel through which the
//! rewrite pattern reaches the generator. Training warms up on continuous
//! prompts, seeds the codebook with K-means centers, and revives dead codes
//! from recent encoder outputs when too few codes stay in use.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod text;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
