//! Noisy-context corruption with an annealed noise cap, the codebook-embedding
//! alignment loss at two tapped layers, and the joint objective.

use candle_core::{Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::rng::StreamRng;
use crate::transformer::{ArTransformer, ForwardOutput, TokenBatch};

/// Cap on the per-sequence corruption level as a function of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// Every sequence uses exactly this level.
    Fixed { epsilon: f64 },
    /// Levels drawn from `U(0, max_level)` throughout training.
    UniformRange { max_level: f64 },
    /// `f(t) = 1 - t`.
    AnnealedLinear,
    /// `f(t) = max(0, 1 - t / zero_at)`; the default `zero_at = 0.75` gives a
    /// slope of 4/3.
    AnnealedTruncated { zero_at: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::AnnealedTruncated { zero_at: 0.75 }
    }
}

fn check_progress(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(input_err!("training progress must lie in [0, 1], got {t}"));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSchedule::Fixed { epsilon } => (0.0..=1.0).contains(&epsilon),
            NoiseSchedule::UniformRange { max_level } => (0.0..=1.0).contains(&max_level),
            NoiseSchedule::AnnealedLinear => true,
            NoiseSchedule::AnnealedTruncated { zero_at } => zero_at > 0.0 && zero_at <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(crate::error::config_err!("invalid noise schedule {self:?}"))
        }
    }

    /// Maximum noise level at normalized progress `t`.
    pub fn value(&self, t: f64) -> Result<f64> {
        check_progress(t)?;
        Ok(match *self {
            NoiseSchedule::Fixed { epsilon } => epsilon,
            NoiseSchedule::UniformRange { max_level } => max_level,
            NoiseSchedule::AnnealedLinear => 1.0 - t,
            NoiseSchedule::AnnealedTruncated { zero_at } => (1.0 - t / zero_at).max(0.0),
        })
    }

    /// Draw the corruption level for one sequence.
    pub fn sample_epsilon(&self, t: f64, rng: &mut StreamRng) -> Result<f64> {
        let cap = self.value(t)?;
        Ok(match self {
            NoiseSchedule::Fixed { .. } => cap,
            _ if cap == 0.0 => 0.0,
            _ => rng.random::<f64>() * cap,
        })
    }
}

/// Weight of the embedding-alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// One corrupted sequence together with the draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub noisy: Vec<u32>,
    /// `true` where the token was replaced.
    pub mask: Vec<bool>,
    /// Uniform replacement candidates, one per position.
    pub draws: Vec<u32>,
    pub epsilon: f64,
}

/// Replace each token independently with probability `epsilon` by a uniform
/// draw from `0..vocab`.
pub fn corrupt(seq: &[u32], epsilon: f64, vocab: usize, rng: &mut StreamRng) -> Result<CorruptionRecord> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(input_err!("corruption level must lie in [0, 1], got {epsilon}"));
    }
    if let Some(t) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(input_err!("token {t} out of range for vocabulary of {vocab}"));
    }
    let mut noisy = Vec::with_capacity(seq.len());
    let mut mask = Vec::with_capacity(seq.len());
    let mut draws = Vec::with_capacity(seq.len());
    for &x in seq {
        let b = rng.random::<f64>() < epsilon;
        let u = rng.random_range(0..vocab as u32);
        noisy.push(if b { u } else { x });
        mask.push(b);
        draws.push(u);
    }
    Ok(CorruptionRecord { noisy, mask, draws, epsilon })
}

/// Mean next-token negative log-likelihood of `targets` (`B x N`) under
/// `logits` (`B x N x K`).
pub fn ar_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// `1 - <a,b> / (|a||b| + 1e-8)` for two slices.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - crate::vq::cosine_similarity(a, b)
}

/// Cosine distance along the last dimension.
pub fn cosine_distance_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((1.0 - dot.div(&((na * nb)? + 1e-8)?)?)?)
}

/// Embedding-alignment loss.
///
/// For every position `p` in `1..N` of the (noisy) input the shallow tap,
/// projected by the shallow head, is pulled towards the codebook entry of the
/// clean token fed at `p` (that is `x[p-1]`), and the deep tap, projected by
/// the deep head, towards the entry of the clean token to be predicted
/// (`x[p]`). Both cosine distances are averaged over positions and batch and
/// summed, so the value lies in `[0, 4]`. `codebook` should be detached.
pub fn embedding_reg_loss(model: &ArTransformer, out: &ForwardOutput, clean: &TokenBatch, codebook: &Tensor) -> Result<Tensor> {
    let (l, ld) = (model.config.tap_shallow, model.config.tap_deep);
    let shallow = out.tapped.get(&l).ok_or_else(|| input_err!("forward output lacks tap {l}"))?;
    let deep = out.tapped.get(&ld).ok_or_else(|| input_err!("forward output lacks tap {ld}"))?;
    let (b, n) = (clean.batch, clean.len);
    if n < 2 {
        return Ok(Tensor::zeros((), shallow.dtype(), &Device::Cpu)?);
    }
    let ids = clean.tokens_tensor()?;
    let current = ids.narrow(1, 0, n - 1)?.contiguous()?.flatten_all()?;
    let next = ids.narrow(1, 1, n - 1)?.contiguous()?.flatten_all()?;
    let c = codebook.dim(1)?;
    let z_cur = codebook.index_select(&current, 0)?.reshape((b, n - 1, c))?;
    let z_next = codebook.index_select(&next, 0)?.reshape((b, n - 1, c))?;
    let p_cur = model.project_shallow(&shallow.narrow(1, 1, n - 1)?)?;
    let p_next = model.project_deep(&deep.narrow(1, 1, n - 1)?)?;
    let d_cur = cosine_distance_tensor(&p_cur, &z_cur)?.mean_all()?;
    let d_next = cosine_distance_tensor(&p_next, &z_next)?.mean_all()?;
    Ok((d_cur + d_next)?)
}

/// `ar + lambda * reg`.
pub fn total_loss(ar: &Tensor, reg: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda == 0.0 {
        return Ok(ar.clone());
    }
    Ok((ar + (reg * lambda)?)?)
}
