//! Decoder-only causal transformer over token sequences.

mod config;
mod model;

pub use config::{count_parameters, tap_layers, ArConfig, ParamCount, TapIndexing};
pub use model::{ArTransformer, ForwardOutput, KvCache, Taps, TokenBatch};
