//! A desk-scale laboratory for visual autoregressive generation.
//!
//! The crate trains a small VQ image tokenizer, a class-conditional causal
//! transformer over its token sequences, and regularizes the transformer
//! with noisy-context training and codebook-embedding alignment. Around that
//! sit a guided sampler with a KV cache and a diagnostics suite for probing
//! how token-level errors turn into image-level errors.

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod sampler;
pub mod train;
pub mod transformer;
pub mod vq;

pub use error::{Error, Result};
