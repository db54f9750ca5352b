use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Which hidden state a tap index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TapIndexing {
    /// Tap `l` is the output of block `l`.
    #[default]
    PostBlock,
    /// Tap `l` is the input to block `l`; tap 0 is the embedded sequence.
    PreBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Codebook size `K`.
    pub vocab_size: usize,
    /// Tokens per image `N`.
    pub seq_len: usize,
    /// Real classes; label `num_classes` is the null class used for guidance.
    pub num_classes: usize,
    pub dropout: f64,
    pub tap_shallow: usize,
    pub tap_deep: usize,
    pub tap_indexing: TapIndexing,
    pub mlp_ratio: f64,
    /// Hidden width of the projection heads.
    pub head_hidden: usize,
    /// Codebook embedding dimension `c`, the projection heads' output size.
    pub codebook_dim: usize,
    /// Tie input embeddings and output logits to the frozen codebook.
    pub tie_codebook: bool,
}

impl Default for ArConfig {
    fn default() -> Self {
        let num_layers = 8;
        let (tap_shallow, tap_deep) = tap_layers(num_layers);
        Self {
            num_layers,
            hidden_dim: 256,
            num_heads: 8,
            vocab_size: 256,
            seq_len: 64,
            num_classes: 10,
            dropout: 0.1,
            tap_shallow,
            tap_deep,
            tap_indexing: TapIndexing::PostBlock,
            mlp_ratio: 4.0,
            head_hidden: 2048,
            codebook_dim: 16,
            tie_codebook: false,
        }
    }
}

/// Default tap placement for a model of depth `num_layers`: the first block
/// for the current-token target and roughly three quarters of the depth for
/// the next-token target.
pub fn tap_layers(num_layers: usize) -> (usize, usize) {
    let deep = ((3 * num_layers) as f64 / 4.0).round() as usize;
    (0, deep.clamp(1, num_layers.saturating_sub(1).max(1)))
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(config_err!("num_layers, hidden_dim and num_heads must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(config_err!("num_heads {} does not divide hidden_dim {}", self.num_heads, self.hidden_dim));
        }
        if !(self.tap_shallow < self.tap_deep && self.tap_deep < self.num_layers) {
            return Err(config_err!(
                "taps must satisfy 0 <= shallow < deep < num_layers, got ({}, {}) with {} layers",
                self.tap_shallow,
                self.tap_deep,
                self.num_layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 || self.seq_len == 0 || self.num_classes == 0 {
            return Err(config_err!("vocab_size >= 2, seq_len > 0 and num_classes > 0 required"));
        }
        if self.mlp_ratio <= 0.0 || self.head_hidden == 0 || self.codebook_dim == 0 {
            return Err(config_err!("mlp_ratio, head_hidden and codebook_dim must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn null_class(&self) -> u32 {
        self.num_classes as u32
    }
}

/// Trainable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub heads: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.backbone + self.heads
    }
}

/// Closed-form parameter count for a configuration.
pub fn count_parameters(c: &ArConfig) -> ParamCount {
    let d = c.hidden_dim;
    let k = c.vocab_size;
    let m = c.mlp_hidden();
    let hd = c.head_dim();
    let linear = |i: usize, o: usize| i * o + o;

    let embeddings = if c.tie_codebook {
        // input projection c -> D, output projection D -> c, plus a per-token logit bias
        linear(c.codebook_dim, d) + linear(d, c.codebook_dim) + k
    } else {
        k * d + linear(d, k)
    };
    let class_table = (c.num_classes + 1) * d;
    let positions = c.seq_len * d;
    let block = linear(d, 6 * d) // adaLN modulation
        + linear(d, 3 * d) // qkv
        + 2 * (2 * hd) // q/k norm gain + bias
        + linear(d, d) // attention output
        + linear(d, m)
        + linear(m, d);
    let final_layer = linear(d, 2 * d);
    let backbone = embeddings + class_table + positions + c.num_layers * block + final_layer;
    let head = linear(d, c.head_hidden) + linear(c.head_hidden, c.codebook_dim);
    ParamCount { backbone, heads: 2 * head }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_rule_matches_reference_depths() {
        assert_eq!(tap_layers(20), (0, 15));
        assert_eq!(tap_layers(8), (0, 6));
        assert_eq!(tap_layers(4), (0, 3));
        assert_eq!(tap_layers(2), (0, 1));
    }

    #[test]
    fn validation() {
        assert!(ArConfig::default().validate().is_ok());
        let bad_heads = ArConfig { num_heads: 7, ..Default::default() };
        assert!(bad_heads.validate().is_err());
        let bad_taps = ArConfig { tap_shallow: 6, tap_deep: 6, ..Default::default() };
        assert!(bad_taps.validate().is_err());
        let bad_drop = ArConfig { dropout: 1.0, ..Default::default() };
        assert!(bad_drop.validate().is_err());
    }

    #[test]
    fn parameter_count_grows_with_depth() {
        let a = ArConfig::default();
        let b = ArConfig { num_layers: 16, ..a.clone() };
        assert!(count_parameters(&b).total() > count_parameters(&a).total());
    }
}
