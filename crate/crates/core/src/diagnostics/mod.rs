//! Metrics and controlled experiments probing exposure bias and the
//! relation between generator states and the tokenizer's embedding space.

mod experiments;
mod metrics;

pub use experiments::*;
pub use metrics::*;
