//! Image tokenizer: convolutional encoder, nearest-entry quantizer against a
//! codebook, and convolutional decoder.

mod codebook;
mod model;
mod train;

pub use codebook::{cosine_similarity, Codebook};
pub use model::{Tokenizer, TokenizerConfig};
pub use train::{codebook_usage, train_tokenizer, TokenizerTrainConfig, TokenizerTrainLog};

use candle_core::{Device, Tensor};

use crate::error::{config_err, input_err, Result};

/// `B x 3 x H x W` pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Vec<f32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageBatch {
    pub const CHANNELS: usize = 3;

    pub fn new(pixels: Vec<f32>, batch: usize, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != batch * Self::CHANNELS * height * width {
            return Err(config_err!(
                "pixel buffer of length {} does not match {batch}x3x{height}x{width}",
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(input_err!("image pixels must lie in [0, 1]"));
        }
        Ok(Self { pixels, batch, height, width })
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self { pixels: vec![0.0; batch * 3 * height * width], batch, height, width }
    }

    pub fn image_len(&self) -> usize {
        Self::CHANNELS * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Batch made from a subset of images.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self { pixels, batch: indices.len(), height: self.height, width: self.width }
    }

    pub fn concat(parts: &[ImageBatch]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| input_err!("cannot concatenate zero batches"))?;
        let mut pixels = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(config_err!("image size mismatch in concatenation"));
            }
            pixels.extend_from_slice(&p.pixels);
            batch += p.batch;
        }
        Ok(Self { pixels, batch, height: first.height, width: first.width })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.pixels, (self.batch, 3, self.height, self.width), &Device::Cpu)?)
    }
}

/// Encoder output, `B x c x h x w`.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub features: Tensor,
}

impl LatentGrid {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.features.dims4().expect("latent grids are rank 4")
    }
}

/// Quantized embeddings, `B x c x h x w`; every spatial vector is a codebook entry.
#[derive(Debug, Clone)]
pub struct QuantizedGrid {
    pub embeddings: Tensor,
}

/// `B x h x w` token indices plus one class label per item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub indices: Vec<u32>,
    pub labels: Vec<u32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn item(&self, b: usize) -> &[u32] {
        let n = self.height * self.width;
        &self.indices[b * n..(b + 1) * n]
    }
}

/// A rasterized token sequence with its class label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub label: u32,
}

/// Row-major flattening of every grid in the batch.
pub fn rasterize(grid: &TokenGrid) -> Vec<TokenSequence> {
    (0..grid.batch)
        .map(|b| TokenSequence { tokens: grid.item(b).to_vec(), label: grid.labels[b] })
        .collect()
}

/// Inverse of [`rasterize`].
pub fn de_rasterize(seqs: &[TokenSequence], height: usize, width: usize) -> Result<TokenGrid> {
    let mut indices = Vec::with_capacity(seqs.len() * height * width);
    for s in seqs {
        if s.tokens.len() != height * width {
            return Err(input_err!("sequence of length {} cannot fill a {height}x{width} grid", s.tokens.len()));
        }
        indices.extend_from_slice(&s.tokens);
    }
    Ok(TokenGrid {
        indices,
        labels: seqs.iter().map(|s| s.label).collect(),
        batch: seqs.len(),
        height,
        width,
    })
}

/// Nearest-entry quantization of every spatial vector of `latent`.
pub fn quantize(latent: &LatentGrid, codebook: &Codebook, labels: &[u32]) -> Result<(QuantizedGrid, TokenGrid)> {
    let (b, c, h, w) = latent.dims();
    if c != codebook.dim() {
        return Err(config_err!("latent dim {c} does not match codebook dim {}", codebook.dim()));
    }
    if labels.len() != b {
        return Err(input_err!("expected {b} labels, got {}", labels.len()));
    }
    let vectors = latent
        .features
        .to_dtype(candle_core::DType::F32)?
        .permute((0, 2, 3, 1))?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let indices: Vec<u32> = vectors.chunks_exact(c).map(|v| codebook.nearest(v) as u32).collect();
    let grid = TokenGrid { indices, labels: labels.to_vec(), batch: b, height: h, width: w };
    let embeddings = embed_grid(&grid, codebook)?;
    Ok((QuantizedGrid { embeddings }, grid))
}

/// Materialize the `B x c x h x w` embedding tensor of a token grid.
pub fn embed_grid(grid: &TokenGrid, codebook: &Codebook) -> Result<Tensor> {
    let data = codebook.lookup(&grid.indices)?;
    Ok(Tensor::from_vec(data, (grid.batch, grid.height, grid.width, codebook.dim()), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rasterize_row_major() {
        let g = TokenGrid { indices: vec![1, 2, 3, 4], labels: vec![0], batch: 1, height: 2, width: 2 };
        assert_eq!(rasterize(&g)[0].tokens, vec![1, 2, 3, 4]);
        let row = TokenGrid { indices: vec![5, 6, 7], labels: vec![2], batch: 1, height: 1, width: 3 };
        assert_eq!(rasterize(&row)[0].tokens, vec![5, 6, 7]);
    }

    proptest! {
        #[test]
        fn raster_round_trip(h in 1usize..6, w in 1usize..6, b in 1usize..4, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, "test", 0);
            let indices: Vec<u32> = (0..b * h * w).map(|_| rng.random_range(0..100)).collect();
            let labels: Vec<u32> = (0..b as u32).collect();
            let g = TokenGrid { indices, labels, batch: b, height: h, width: w };
            prop_assert_eq!(de_rasterize(&rasterize(&g), h, w).unwrap(), g);
        }
    }

    #[test]
    fn image_batch_validates_range() {
        assert!(ImageBatch::new(vec![0.5; 12], 1, 2, 2).is_ok());
        assert!(ImageBatch::new(vec![1.5; 12], 1, 2, 2).is_err());
        assert!(ImageBatch::new(vec![0.5; 11], 1, 2, 2).is_err());
    }
}
