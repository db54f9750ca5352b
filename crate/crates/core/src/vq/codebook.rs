use candle_core::{DType, Device, Tensor};

use crate::error::{config_err, input_err, Result};

/// Cosine similarity stabilized as `<a,b> / (|a||b| + 1e-8)`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-8)
}

fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `K x c` table of quantizer embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    size: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(entries: Vec<f32>, size: usize, dim: usize) -> Result<Self> {
        if size < 2 {
            return Err(config_err!("codebook needs at least 2 entries, got {size}"));
        }
        if dim == 0 || entries.len() != size * dim {
            return Err(config_err!("codebook data length {} does not match {size}x{dim}", entries.len()));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(config_err!("codebook contains non-finite values"));
        }
        Ok(Self { entries, size, dim })
    }

    /// Number of entries `K`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Embedding dimension `c`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn entry_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.entries
    }

    /// Index of the L2-nearest entry; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        debug_assert_eq!(v.len(), self.dim);
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for k in 0..self.size {
            let d = squared_distance(v, self.entry(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Gather entries for `indices`, concatenated.
    pub fn lookup(&self, indices: &[u32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i as usize >= self.size {
                return Err(input_err!("token index {i} out of range for codebook of size {}", self.size));
            }
            out.extend_from_slice(self.entry(i as usize));
        }
        Ok(out)
    }

    /// The entry other than `correct` with the highest cosine similarity to
    /// entry `correct`; ties go to the lowest index.
    pub fn nearest_incorrect(&self, correct: usize) -> Result<usize> {
        if correct >= self.size {
            return Err(input_err!("token index {correct} out of range for codebook of size {}", self.size));
        }
        let target = self.entry(correct);
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for k in (0..self.size).filter(|&k| k != correct) {
            let s = cosine_similarity(self.entry(k), target);
            if s > best_sim {
                best_sim = s;
                best = k;
            }
        }
        Ok(best)
    }

    /// `nearest_incorrect` for every entry.
    pub fn nearest_incorrect_table(&self) -> Vec<usize> {
        (0..self.size).map(|k| self.nearest_incorrect(k).expect("in range")).collect()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.entries, (self.size, self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }
}
