//! Decoupled-weight-decay Adam and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use crate::error::Result;
use crate::nn::ParamStore;

/// Gradients keyed by parameter name. Parameters that did not take part in the
/// loss have no entry.
pub type NamedGrads = BTreeMap<String, Tensor>;

/// Gradients are detached so that optimizer state never keeps a backward
/// graph alive across steps.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> NamedGrads {
    store
        .iter()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.clone(), g.detach())))
        .collect()
}

pub fn global_norm(grads: &NamedGrads) -> Result<f64> {
    let mut total = 0.0f64;
    for g in grads.values() {
        total += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
    }
    Ok(total.sqrt())
}

/// Rescale `grads` in place so their global norm is at most `max_norm`.
/// Returns `(norm before, norm after)`.
pub fn clip_grad_norm(grads: &mut NamedGrads, max_norm: f64) -> Result<(f64, f64)> {
    let before = global_norm(grads)?;
    if before > max_norm {
        let scale = max_norm / (before + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    let after = global_norm(grads)?;
    Ok((before, after))
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.96, eps: 1e-8, weight_decay: 0.03 }
    }
}

/// AdamW with per-parameter moment buffers. Weight decay applies to matrices
/// and embedding tables only (rank ≥ 2), never to biases or norm gains.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub steps: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &ParamStore, grads: &NamedGrads, lr: f64) -> Result<()> {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(var) = store.get(name) else { continue };
            let m = match self.first.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let p = &var.as_tensor().detach();
            let mut next = (p - (update * lr)?)?;
            if c.weight_decay > 0.0 && p.rank() >= 2 {
                next = (next - (p * (lr * c.weight_decay))?)?;
            }
            var.set(&next)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}
