use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageBatch, Tokenizer, TokenizerConfig};
use crate::error::{input_err, Error, Result};
use crate::nn::scalar;
use crate::optim::{collect_grads, AdamW, AdamWConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTrainConfig {
    pub tokenizer: TokenizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub commitment: f64,
    pub ema_decay: f64,
    /// Entries not selected in this many consecutive steps are re-seeded
    /// from the current batch's encoder outputs.
    pub restart_after: usize,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            commitment: 0.25,
            ema_decay: 0.99,
            restart_after: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenizerTrainLog {
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub restarts: usize,
}

struct EmaState {
    counts: Vec<f64>,
    sums: Vec<f64>,
}

fn latent_vectors(z: &Tensor) -> Result<(Vec<f32>, usize)> {
    let c = z.dim(1)?;
    Ok((z.permute((0, 2, 3, 1))?.flatten_all()?.to_vec1::<f32>()?, c))
}

/// Train the tokenizer with a straight-through estimator, a commitment term
/// and an EMA codebook with dead-entry restarts.
pub fn train_tokenizer(images: &ImageBatch, config: &TokenizerTrainConfig) -> Result<(Tokenizer, TokenizerTrainLog)> {
    if images.batch == 0 {
        return Err(input_err!("tokenizer training needs a nonempty dataset"));
    }
    let mut tok = Tokenizer::new(config.tokenizer.clone(), config.seed)?;
    let k = tok.codebook.size();
    let c = tok.codebook.dim();
    let mut opt = AdamW::new(AdamWConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 });
    let mut log = TokenizerTrainLog::default();

    // Seed the codebook with encoder outputs so every entry starts in the data manifold.
    let mut init_rng = rng::stream(config.seed, "tokenizer_codebook", 0);
    let probe: Vec<usize> = (0..config.batch_size.min(images.batch)).map(|_| init_rng.random_range(0..images.batch)).collect();
    let (z0, _) = tok.encode_tensor(&images.select(&probe).to_tensor()?)?;
    let (vecs, _) = latent_vectors(&z0)?;
    let nvec = vecs.len() / c;
    for j in 0..k {
        let src = init_rng.random_range(0..nvec);
        tok.codebook.entry_mut(j).copy_from_slice(&vecs[src * c..(src + 1) * c]);
    }
    let mut ema = EmaState {
        counts: vec![1.0; k],
        sums: tok.codebook.data().iter().map(|&x| x as f64).collect(),
    };

    let mut last_used = vec![0usize; k];
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..images.batch).collect();
    let mut first = true;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "tokenizer_data", epoch as u64));
        let mut restart_rng = rng::stream(config.seed, "tokenizer_restart", epoch as u64);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let x = images.select(chunk).to_tensor()?;
            let (z_e, _) = tok.encode_tensor(&x)?;
            let (vecs, _) = latent_vectors(&z_e.detach())?;
            let assign: Vec<usize> = vecs.chunks_exact(c).map(|v| tok.codebook.nearest(v)).collect();
            let (b, _, h, w) = z_e.dims4()?;
            let zq_data: Vec<f32> = assign.iter().flat_map(|&a| tok.codebook.entry(a).to_vec()).collect();
            let z_q = Tensor::from_vec(zq_data, (b, h, w, c), z_e.device())?.permute((0, 3, 1, 2))?.contiguous()?;
            let z_st = (&z_e + (&z_q - &z_e)?.detach())?;
            let recon = tok.decode_tensor(&z_st)?;
            let rec_loss = (recon - &x)?.sqr()?.mean_all()?;
            let commit = (&z_e - &z_q)?.sqr()?.mean_all()?;
            let loss = (&rec_loss + (commit * config.commitment)?)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Training(format!("tokenizer loss diverged at epoch {epoch} (value {value})")));
            }
            if first {
                log.initial_loss = value;
                first = false;
            }
            let grads = collect_grads(&tok.store, &loss.backward()?);
            opt.step(&tok.store, &grads, config.lr)?;

            // EMA codebook update.
            let d = config.ema_decay;
            let mut batch_counts = vec![0.0f64; k];
            let mut batch_sums = vec![0.0f64; k * c];
            step += 1;
            for (v, &a) in vecs.chunks_exact(c).zip(&assign) {
                batch_counts[a] += 1.0;
                last_used[a] = step;
                for (s, x) in batch_sums[a * c..(a + 1) * c].iter_mut().zip(v) {
                    *s += *x as f64;
                }
            }
            for j in 0..k {
                ema.counts[j] = d * ema.counts[j] + (1.0 - d) * batch_counts[j];
            }
            for (s, bs) in ema.sums.iter_mut().zip(&batch_sums) {
                *s = d * *s + (1.0 - d) * bs;
            }
            let n: f64 = ema.counts.iter().sum();
            for j in 0..k {
                let smoothed = (ema.counts[j] + 1e-5) / (n + k as f64 * 1e-5) * n;
                let entry = tok.codebook.entry_mut(j);
                for (e, s) in entry.iter_mut().zip(&ema.sums[j * c..(j + 1) * c]) {
                    *e = (*s / smoothed) as f32;
                }
            }
            let nvec = vecs.len() / c;
            for j in 0..k {
                if step - last_used[j] >= config.restart_after {
                    let src = restart_rng.random_range(0..nvec);
                    let v = &vecs[src * c..(src + 1) * c];
                    tok.codebook.entry_mut(j).copy_from_slice(v);
                    last_used[j] = step;
                    ema.counts[j] = 1.0;
                    for (s, x) in ema.sums[j * c..(j + 1) * c].iter_mut().zip(v) {
                        *s = *x as f64;
                    }
                    log.restarts += 1;
                }
            }
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("tokenizer epoch {epoch}: loss {mean:.5}");
        log.epoch_loss.push(mean);
    }
    debug_assert!(tok.codebook.data().iter().all(|x| x.is_finite()));
    Ok((tok, log))
}

/// Fraction of codebook entries selected at least once when tokenizing `images`.
pub fn codebook_usage(tok: &Tokenizer, images: &ImageBatch) -> Result<f64> {
    let grid = tok.tokenize(images, &vec![0; images.batch])?;
    let mut used = vec![false; tok.codebook.size()];
    for &i in &grid.indices {
        used[i as usize] = true;
    }
    Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
}
