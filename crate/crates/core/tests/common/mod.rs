#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use rear::rng::{stream, StreamRng};
use rear::transformer::{ArConfig, ArTransformer, TokenBatch};
use rear::vq::{Codebook, TokenSequence};

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, "test", 0)
}

pub fn gaussian(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn random_codebook(seed: u64, k: usize, c: usize) -> Codebook {
    let mut r = rng(seed);
    Codebook::new(gaussian(&mut r, k * c), k, c).unwrap()
}

pub fn tiny_config(k: usize, n: usize) -> ArConfig {
    ArConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        vocab_size: k,
        seq_len: n,
        num_classes: 3,
        dropout: 0.0,
        tap_shallow: 0,
        tap_deep: 1,
        head_hidden: 12,
        codebook_dim: 4,
        ..Default::default()
    }
}

/// A small model moved off its identity-block initialization.
pub fn tiny_model(k: usize, n: usize, dtype: DType, seed: u64) -> (ArTransformer, Codebook) {
    let cfg = tiny_config(k, n);
    let cb = random_codebook(seed + 1000, k, cfg.codebook_dim);
    let m = ArTransformer::new(cfg, dtype, seed, Some(&cb)).unwrap();
    m.jitter_parameters(0.3, seed).unwrap();
    (m, cb)
}

pub fn random_sequences(seed: u64, count: usize, n: usize, k: usize, classes: usize) -> Vec<TokenSequence> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| TokenSequence { tokens: (0..n).map(|_| r.random_range(0..k as u32)).collect(), label: r.random_range(0..classes as u32) })
        .collect()
}

pub fn batch(seqs: &[TokenSequence]) -> TokenBatch {
    TokenBatch::from_sequences(seqs).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst relative error between backprop and central differences over
/// `per_param` random coordinates of every parameter (all of them when
/// `None`), with the error floored at `1e-6` in the denominator.
pub fn fd_check(model: &ArTransformer, loss: impl Fn() -> Tensor, per_param: Option<usize>, seed: u64) -> (f64, usize) {
    use candle_core::backprop::GradStore;
    let total = loss();
    let grads: GradStore = total.backward().unwrap();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in model.store.iter() {
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; base.len()],
        };
        let coords: Vec<usize> = match per_param {
            Some(k) => (0..k.min(base.len())).map(|_| r.random_range(0..base.len())).collect(),
            None => (0..base.len()).collect(),
        };
        for i in coords {
            let h = 1e-6;
            let mut v = base.clone();
            v[i] = base[i] + h;
            model.store.set_values(name, &v).unwrap();
            let up = rear::nn::scalar(&loss()).unwrap();
            v[i] = base[i] - h;
            model.store.set_values(name, &v).unwrap();
            let down = rear::nn::scalar(&loss()).unwrap();
            model.store.set_values(name, &base).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Decode with and without the KV cache from the same seeds. Returns whether
/// the token sequences agree and the largest logit discrepancy relative to
/// `max(|a|, |b|, 1)`.
pub fn compare_backends(model: &ArTransformer, labels: &[u32], cfg: &rear::sampler::SampleConfig) -> (bool, f64) {
    use rear::sampler::{generate, Backend};
    let forced = vec![vec![None; model.config.seq_len]; labels.len()];
    let a = generate(model, labels, &forced, cfg, Backend::KvCache, true).unwrap();
    let b = generate(model, labels, &forced, cfg, Backend::Recompute, true).unwrap();
    let mut worst = 0.0f64;
    for (sa, sb) in a.step_logits.unwrap().iter().zip(b.step_logits.unwrap().iter()) {
        for (ra, rb) in sa.iter().zip(sb) {
            for (x, y) in ra.iter().zip(rb) {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
            }
        }
    }
    (a.sequences == b.sequences, worst)
}

/// Byte image of every parameter, in name order.
pub fn param_bytes(model: &ArTransformer) -> Vec<(String, Vec<u8>)> {
    model.store.names().into_iter().map(|n| {
        let b = model.store.raw_bytes(&n).unwrap();
        (n, b)
    }).collect()
}

/// Nearest codebook entry by exhaustive squared distance in f64, lowest index
/// on ties, together with every distance.
pub fn brute_force_nearest(v: &[f32], codebook: &Codebook) -> (usize, Vec<f64>) {
    let dists: Vec<f64> = (0..codebook.size())
        .map(|k| codebook.entry(k).iter().zip(v).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
        .collect();
    let mut best = 0;
    for k in 1..dists.len() {
        if dists[k] < dists[best] {
            best = k;
        }
    }
    (best, dists)
}

/// Quantize `count` random latent grids and compare every index with the
/// exhaustive search. Returns the number of disagreements that are not exact
/// distance ties.
pub fn quantize_mismatches(count: u64) -> usize {
    use candle_core::Device;
    use rear::vq::{quantize, LatentGrid};
    let mut bad = 0;
    for g in 0..count {
        let mut r = rng(g);
        let (b, c, h, w, k) = (2, 3 + (g as usize % 4), 2 + (g as usize % 3), 3, 5 + (g as usize % 20));
        let cb = random_codebook(g + 500, k, c);
        let feats = gaussian(&mut r, b * c * h * w);
        let latent = LatentGrid { features: Tensor::from_vec(feats.clone(), (b, c, h, w), &Device::Cpu).unwrap() };
        let (q, grid) = quantize(&latent, &cb, &[0, 1]).unwrap();
        let emb = to_f64(&q.embeddings);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let v: Vec<f32> = (0..c).map(|ch| feats[((bi * c + ch) * h + y) * w + x]).collect();
                    let (want, dists) = brute_force_nearest(&v, &cb);
                    let got = grid.indices[(bi * h + y) * w + x] as usize;
                    let same_entry = (0..c).all(|ch| emb[((bi * c + ch) * h + y) * w + x] == cb.entry(got)[ch] as f64);
                    if !same_entry || (got != want && (dists[got] - dists[want]).abs() > 1e-6) {
                        bad += 1;
                    }
                }
            }
        }
    }
    bad
}

/// CKA written out with an explicit centering matrix and Gram matrices.
pub fn cka_direct(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let gram = |a: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| a[i].iter().zip(&a[j]).map(|(p, q)| p * q).sum()).collect()).collect()
    };
    let h: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect()).collect();
    let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
    };
    let hsic = |k: &Vec<Vec<f64>>, l: &Vec<Vec<f64>>| -> f64 {
        let m = mul(&mul(&mul(k, &h), l), &h);
        (0..n).map(|i| m[i][i]).sum()
    };
    let (k, l) = (gram(x), gram(y));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

pub const CKA_HAND_X: [[f64; 2]; 4] = [[1.0, 2.0], [-0.5, 0.0], [3.0, -1.0], [0.25, 4.0]];
pub const CKA_HAND_Y: [[f64; 2]; 4] = [[0.0, 1.0], [2.0, 2.0], [-1.0, 0.5], [1.5, -3.0]];

pub fn random_matrix(seed: u64, n: usize, d: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n * d).map(|_| r.sample(StandardNormal)).collect()
}

/// `x` (`n x d`) times a random orthogonal matrix built by Gram-Schmidt.
pub fn rotate(x: &[f64], d: usize, seed: u64) -> Vec<f64> {
    let m = random_matrix(seed, d, d);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v: Vec<f64> = m[i * d..(i + 1) * d].to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    let n = x.len() / d;
    (0..n).flat_map(|i| (0..d).map(|j| (0..d).map(|k| x[i * d + k] * q[k][j]).sum::<f64>()).collect::<Vec<_>>()).collect()
}

/// Teacher-forced perplexity of a model whose output head is zeroed.
pub fn uniform_predictor_perplexity(k: usize) -> f64 {
    let n = 7;
    let (m, _) = tiny_model(k, n, DType::F64, 1);
    for name in ["tok.head.weight", "tok.head.bias"] {
        let len = m.store.get(name).unwrap().as_tensor().elem_count();
        m.store.set_values(name, &vec![0.0; len]).unwrap();
    }
    rear::diagnostics::teacher_forced(&m, &random_sequences(2, 5, n, k, 3), 2).unwrap().perplexity()
}
