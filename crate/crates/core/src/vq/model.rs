use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{de_rasterize, embed_grid, quantize, Codebook, ImageBatch, LatentGrid, QuantizedGrid, TokenGrid, TokenSequence};
use crate::data::{load_store_arrays, store_arrays, ArrayDtype, CheckpointContainer, NamedArray};
use crate::error::{config_err, Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub image_size: usize,
    /// Spatial downsampling factor; a power of two.
    pub downsample: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { image_size: 32, downsample: 4, channels: 32, latent_dim: 16, codebook_size: 256 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(config_err!("downsample must be a power of two >= 2, got {}", self.downsample));
        }
        if self.image_size % self.downsample != 0 {
            return Err(config_err!("image size {} not divisible by downsample {}", self.image_size, self.downsample));
        }
        if self.codebook_size < 2 || self.codebook_size > 65536 {
            return Err(config_err!("codebook size must be in [2, 65536], got {}", self.codebook_size));
        }
        if self.channels == 0 || self.latent_dim == 0 {
            return Err(config_err!("channels and latent_dim must be positive"));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn seq_len(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// Convolutional VQ tokenizer.
///
/// Encoder: 3x3 stem, then one stride-2 4x4 convolution per halving, then a
/// 1x1 projection to the latent dimension. The decoder mirrors it with
/// nearest-neighbour upsampling followed by 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub store: ParamStore,
    pub codebook: Codebook,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

const CHUNK: usize = 128;

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "tokenizer_init", 0);
        let mut store = ParamStore::new(DType::F32);
        let ch = config.channels;
        let enc_in = Conv2d::new(&mut store, "enc.in", 3, ch, 3, 1, 1, &mut rng)?;
        let enc_down = (0..config.stages())
            .map(|i| Conv2d::new(&mut store, &format!("enc.down{i}"), ch, ch, 4, 2, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv2d::new(&mut store, "enc.out", ch, config.latent_dim, 1, 1, 0, &mut rng)?;
        let dec_in = Conv2d::new(&mut store, "dec.in", config.latent_dim, ch, 1, 1, 0, &mut rng)?;
        let dec_up = (0..config.stages())
            .map(|i| Conv2d::new(&mut store, &format!("dec.up{i}"), ch, ch, 3, 1, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::new(&mut store, "dec.out", ch, 3, 3, 1, 1, &mut rng)?;
        let entries = (0..config.codebook_size * config.latent_dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * 0.1)
            .collect();
        let codebook = Codebook::new(entries, config.codebook_size, config.latent_dim)?;
        Ok(Self { config, store, codebook, enc_in, enc_down, enc_out, dec_in, dec_up, dec_out })
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        if images.height != self.config.image_size || images.width != self.config.image_size {
            return Err(config_err!(
                "image size {}x{} does not match tokenizer size {}",
                images.height,
                images.width,
                self.config.image_size
            ));
        }
        Ok(())
    }

    /// Encoder on a `B x 3 x H x W` tensor. Also returns the stem and first
    /// downsampling activations, which serve as perceptual features.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut feats = Vec::with_capacity(2);
        let mut h = self.enc_in.forward(x)?.relu()?;
        feats.push(h.clone());
        for (i, conv) in self.enc_down.iter().enumerate() {
            h = conv.forward(&h)?.relu()?;
            if i == 0 {
                feats.push(h.clone());
            }
        }
        Ok((self.enc_out.forward(&h)?, feats))
    }

    /// Decoder on a `B x c x h x w` tensor, without output clamping.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?.relu()?;
        for conv in &self.dec_up {
            let (_, _, hh, ww) = h.dims4()?;
            h = conv.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?.relu()?;
        }
        self.dec_out.forward(&h)
    }

    pub fn encode(&self, images: &ImageBatch) -> Result<LatentGrid> {
        self.check_images(images)?;
        let mut parts = Vec::new();
        for start in (0..images.batch).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(images.batch)).collect();
            let x = images.select(&idx).to_tensor()?;
            parts.push(self.encode_tensor(&x)?.0.detach());
        }
        Ok(LatentGrid { features: Tensor::cat(&parts, 0)? })
    }

    pub fn decode(&self, q: &QuantizedGrid) -> Result<ImageBatch> {
        let (b, c, h, w) = q.embeddings.dims4()?;
        let g = self.config.grid_size();
        if c != self.config.latent_dim || h != g || w != g {
            return Err(config_err!("quantized grid {c}x{h}x{w} does not match decoder {}x{g}x{g}", self.config.latent_dim));
        }
        let mut pixels = Vec::with_capacity(b * 3 * self.config.image_size * self.config.image_size);
        for start in (0..b).step_by(CHUNK) {
            let n = CHUNK.min(b - start);
            let z = q.embeddings.narrow(0, start, n)?.to_dtype(DType::F32)?;
            let out = self.decode_tensor(&z)?.clamp(0f32, 1f32)?;
            pixels.extend(out.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(ImageBatch { pixels, batch: b, height: self.config.image_size, width: self.config.image_size })
    }

    pub fn tokenize(&self, images: &ImageBatch, labels: &[u32]) -> Result<TokenGrid> {
        let latent = self.encode(images)?;
        Ok(quantize(&latent, &self.codebook, labels)?.1)
    }

    pub fn tokenize_sequences(&self, images: &ImageBatch, labels: &[u32]) -> Result<Vec<TokenSequence>> {
        Ok(super::rasterize(&self.tokenize(images, labels)?))
    }

    pub fn decode_tokens(&self, seqs: &[TokenSequence]) -> Result<ImageBatch> {
        let g = self.config.grid_size();
        let grid = de_rasterize(seqs, g, g)?;
        self.decode(&QuantizedGrid { embeddings: embed_grid(&grid, &self.codebook)? })
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, images: &ImageBatch) -> Result<ImageBatch> {
        let labels = vec![0; images.batch];
        let latent = self.encode(images)?;
        let (q, _) = quantize(&latent, &self.codebook, &labels)?;
        self.decode(&q)
    }

    pub fn to_checkpoint(&self) -> Result<CheckpointContainer> {
        let mut c = CheckpointContainer::new("tokenizer");
        c.config = serde_json::to_value(&self.config)?;
        c.arrays = store_arrays(&self.store, "")?;
        c.arrays.push(NamedArray {
            name: "codebook".into(),
            shape: vec![self.codebook.size(), self.codebook.dim()],
            dtype: ArrayDtype::F32,
            data: self.codebook.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        });
        c.progress = serde_json::json!({ "checksum": crate::data::hex(&self.checksum()?) });
        Ok(c)
    }

    pub fn from_checkpoint(c: &CheckpointContainer) -> Result<Self> {
        if c.kind != "tokenizer" {
            return Err(Error::Integrity(format!("expected a tokenizer checkpoint, found kind {:?}", c.kind)));
        }
        let config: TokenizerConfig = serde_json::from_value(c.config.clone())?;
        let mut tok = Self::new(config, 0)?;
        load_store_arrays(&tok.store, c, &["codebook"])?;
        let cb = c.array("codebook").ok_or_else(|| Error::Integrity("checkpoint lacks the codebook".into()))?;
        if cb.dtype != ArrayDtype::F32 || cb.shape != [tok.config.codebook_size, tok.config.latent_dim] {
            return Err(Error::Integrity("codebook array has the wrong shape or dtype".into()));
        }
        let entries = cb.data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tok.codebook = Codebook::new(entries, tok.config.codebook_size, tok.config.latent_dim)?;
        if let Some(sum) = c.progress.get("checksum").and_then(|v| v.as_str()) {
            if sum != crate::data::hex(&tok.checksum()?) {
                return Err(Error::Integrity("tokenizer checksum does not match its contents".into()));
            }
        }
        Ok(tok)
    }

    /// SHA-256 over the configuration, every parameter and the codebook.
    pub fn checksum(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        for name in self.store.names() {
            h.update(name.as_bytes());
            h.update(self.store.raw_bytes(&name)?);
        }
        for v in self.codebook.data() {
            h.update(v.to_le_bytes());
        }
        Ok(h.finalize().into())
    }
}
