use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ArConfig, TapIndexing};
use crate::error::{config_err, input_err, Result};
use crate::nn::{Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::rng::{self, StreamRng};
use crate::vq::{Codebook, TokenSequence};

/// Token sequences and labels for a batch, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<u32>, labels: Vec<u32>, len: usize) -> Result<Self> {
        if len == 0 || tokens.len() % len != 0 || tokens.len() / len != labels.len() {
            return Err(input_err!("token buffer of {} does not split into {} sequences of {len}", tokens.len(), labels.len()));
        }
        Ok(Self { batch: labels.len(), tokens, labels, len })
    }

    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        let len = seqs.first().map(|s| s.tokens.len()).ok_or_else(|| input_err!("empty batch"))?;
        if seqs.iter().any(|s| s.tokens.len() != len) {
            return Err(input_err!("sequences in a batch must share a length"));
        }
        Self::new(seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect(), seqs.iter().map(|s| s.label).collect(), len)
    }

    pub fn seq(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.len..(b + 1) * self.len]
    }

    pub fn sequences(&self) -> Vec<TokenSequence> {
        (0..self.batch).map(|b| TokenSequence { tokens: self.seq(b).to_vec(), label: self.labels[b] }).collect()
    }

    /// Targets for next-token prediction as a `B x N` u32 tensor.
    pub fn tokens_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.tokens, (self.batch, self.len), &Device::Cpu)?)
    }
}

/// Logits plus the hidden states at the requested tap layers.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B x N x K`; position `p` predicts token `p` from tokens `< p` and the label.
    pub logits: Tensor,
    /// Layer index to `B x N x hidden` features.
    pub tapped: BTreeMap<usize, Tensor>,
}

/// Which hidden states a forward pass should return.
#[derive(Debug, Clone, Copy)]
pub enum Taps<'a> {
    None,
    Configured,
    Layers(&'a [usize]),
}

struct Dropout<'a> {
    p: f64,
    rng: &'a mut StreamRng,
}

impl Dropout<'_> {
    fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    q_norm: LayerNorm,
    k_norm: LayerNorm,
    proj: Linear,
    heads: usize,
    head_dim: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ada: Linear,
    attn: Attention,
    mlp: Mlp,
}

/// Per-layer key/value history for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    cond: Tensor,
    labels: Tensor,
    pos: usize,
}

impl KvCache {
    /// Number of positions already processed.
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[derive(Debug, Clone)]
enum TokenIo {
    Untied { table: Tensor, head: Linear },
    Tied { codebook: Tensor, in_proj: Linear, out_proj: Linear, bias: Tensor },
}

/// Decoder-only causal transformer with class-conditioned AdaLN blocks,
/// QK-normalized attention and two projection heads into codebook space.
#[derive(Debug, Clone)]
pub struct ArTransformer {
    pub config: ArConfig,
    pub store: ParamStore,
    io: TokenIo,
    class_table: Tensor,
    positions: Tensor,
    blocks: Vec<Block>,
    final_ada: Linear,
    head_shallow: Mlp,
    head_deep: Mlp,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// `(B, k*D)` into `k` tensors of shape `(B, 1, D)`.
fn chunks(t: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let (b, kd) = t.dims2()?;
    let d = kd / k;
    (0..k).map(|i| Ok(t.narrow(1, i * d, d)?.reshape((b, 1, d))?)).collect()
}

fn causal_mask(queries: usize, start: usize, dtype: DType) -> Result<Tensor> {
    let keys = start + queries;
    let data: Vec<f64> = (0..queries)
        .flat_map(|i| (0..keys).map(move |j| if j <= start + i { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, queries, keys), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Attention {
    fn forward(
        &self,
        x: &Tensor,
        start: usize,
        cache: Option<&mut Option<(Tensor, Tensor)>>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, self.heads, self.head_dim))?.permute((2, 0, 3, 1, 4))?;
        let q = self.q_norm.forward(&qkv.get(0)?.contiguous()?)?;
        let mut k = self.k_norm.forward(&qkv.get(1)?.contiguous()?)?;
        let mut v = qkv.get(2)?.contiguous()?;
        if let Some(slot) = cache {
            if let Some((pk, pv)) = slot.as_ref() {
                k = Tensor::cat(&[pk, &k], 2)?;
                v = Tensor::cat(&[pv, &v], 2)?;
            }
            // The cache only serves inference; keep no backward graph alive.
            *slot = Some((k.detach(), v.detach()));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&causal_mask(t, start, x.dtype())?)?;
        let mut probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        if let Some(drop) = dropout.as_mut() {
            probs = drop.apply(&probs)?;
        }
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

impl Block {
    fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        start: usize,
        cache: Option<&mut Option<(Tensor, Tensor)>>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Tensor> {
        let m = chunks(&self.ada.forward(cond)?, 6)?;
        let norm = LayerNorm::plain();
        let h = modulate(&norm.forward(x)?, &m[0], &m[1])?;
        let a = self.attn.forward(&h, start, cache, dropout)?;
        let x = (x + a.broadcast_mul(&m[2])?)?;
        let h = modulate(&norm.forward(&x)?, &m[3], &m[4])?;
        let mut f = self.mlp.forward(&h)?;
        if let Some(drop) = dropout.as_mut() {
            f = drop.apply(&f)?;
        }
        Ok((x + f.broadcast_mul(&m[5])?)?)
    }
}

impl ArTransformer {
    /// Build a freshly initialized model. `codebook` is required when
    /// `tie_codebook` is set and ignored otherwise.
    pub fn new(config: ArConfig, dtype: DType, seed: u64, codebook: Option<&Codebook>) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut store = ParamStore::new(dtype);
        let d = config.hidden_dim;
        let k = config.vocab_size;
        let std = Init::Normal(0.02);

        let io = if config.tie_codebook {
            let cb = codebook.ok_or_else(|| config_err!("tie_codebook requires a codebook"))?;
            if cb.size() != k || cb.dim() != config.codebook_dim {
                return Err(config_err!("codebook {}x{} does not match model K={k}, c={}", cb.size(), cb.dim(), config.codebook_dim));
            }
            TokenIo::Tied {
                codebook: cb.to_tensor(dtype)?,
                in_proj: Linear::new(&mut store, "tok.in_proj", config.codebook_dim, d, std, &mut rng)?,
                out_proj: Linear::new(&mut store, "tok.out_proj", d, config.codebook_dim, std, &mut rng)?,
                bias: store.add("tok.logit_bias", &[k], Init::Zeros, &mut rng)?,
            }
        } else {
            TokenIo::Untied {
                table: store.add("tok.table", &[k, d], std, &mut rng)?,
                head: Linear::new(&mut store, "tok.head", d, k, std, &mut rng)?,
            }
        };
        let class_table = store.add("cls.table", &[config.num_classes + 1, d], std, &mut rng)?;
        let positions = store.add("pos.table", &[config.seq_len, d], std, &mut rng)?;
        let hd = config.head_dim();
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("blocks.{i:02}");
            blocks.push(Block {
                ada: Linear::new(&mut store, &format!("{p}.ada"), d, 6 * d, Init::Zeros, &mut rng)?,
                attn: Attention {
                    qkv: Linear::new(&mut store, &format!("{p}.attn.qkv"), d, 3 * d, std, &mut rng)?,
                    q_norm: LayerNorm::affine(&mut store, &format!("{p}.attn.q_norm"), hd, &mut rng)?,
                    k_norm: LayerNorm::affine(&mut store, &format!("{p}.attn.k_norm"), hd, &mut rng)?,
                    proj: Linear::new(&mut store, &format!("{p}.attn.proj"), d, d, std, &mut rng)?,
                    heads: config.num_heads,
                    head_dim: hd,
                },
                mlp: Mlp::new(&mut store, &format!("{p}.mlp"), d, config.mlp_hidden(), d, &mut rng)?,
            });
        }
        let final_ada = Linear::new(&mut store, "final.ada", d, 2 * d, Init::Zeros, &mut rng)?;
        let head_shallow = Mlp::new(&mut store, "proj_head.shallow", d, config.head_hidden, config.codebook_dim, &mut rng)?;
        let head_deep = Mlp::new(&mut store, "proj_head.deep", d, config.head_hidden, config.codebook_dim, &mut rng)?;
        Ok(Self { config, store, io, class_table, positions, blocks, final_ada, head_shallow, head_deep })
    }

    /// Parameter-name prefix shared by both projection heads.
    pub const HEAD_PREFIX: &'static str = "proj_head.";

    /// Add Gaussian noise of standard deviation `std` to every parameter.
    /// Useful to move a freshly initialized model (whose AdaLN gates start at
    /// zero) away from the identity-block regime in tests and analyses.
    pub fn jitter_parameters(&self, std: f64, seed: u64) -> Result<()> {
        let mut rng = rng::stream(seed, "jitter", 0);
        for (name, var) in self.store.iter() {
            let n = var.as_tensor().elem_count();
            let cur = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let next: Vec<f64> = cur.iter().map(|v| v + std * rng.sample::<f64, _>(StandardNormal)).collect();
            debug_assert_eq!(next.len(), n);
            self.store.set_values(name, &next)?;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let k = self.config.vocab_size as u32;
        if let Some(t) = batch.tokens.iter().find(|&&t| t >= k) {
            return Err(input_err!("token {t} out of range for vocabulary of {k}"));
        }
        if let Some(l) = batch.labels.iter().find(|&&l| l > self.config.null_class()) {
            return Err(input_err!("label {l} out of range (null class is {})", self.config.null_class()));
        }
        if batch.len > self.config.seq_len {
            return Err(input_err!("sequence length {} exceeds model length {}", batch.len, self.config.seq_len));
        }
        Ok(())
    }

    fn token_table(&self) -> Result<Tensor> {
        match &self.io {
            TokenIo::Untied { table, .. } => Ok(table.clone()),
            TokenIo::Tied { codebook, in_proj, .. } => in_proj.forward(codebook),
        }
    }

    fn logits(&self, h: &Tensor) -> Result<Tensor> {
        match &self.io {
            TokenIo::Untied { head, .. } => head.forward(h),
            TokenIo::Tied { codebook, out_proj, bias, .. } => {
                Ok(out_proj.forward(h)?.broadcast_matmul(&codebook.t()?)?.broadcast_add(bias)?)
            }
        }
    }

    fn conditioning(&self, labels: &Tensor) -> Result<(Tensor, Tensor)> {
        let cls = self.class_table.index_select(labels, 0)?;
        let cond = candle_nn::ops::silu(&cls)?;
        Ok((cls, cond))
    }

    /// Embed `[cls, x_0, ..., x_{T-2}]` for a batch of length-`T` sequences.
    fn embed_sequence(&self, batch: &TokenBatch, cls: &Tensor) -> Result<Tensor> {
        let (b, t) = (batch.batch, batch.len);
        let d = self.config.hidden_dim;
        let cls = cls.reshape((b, 1, d))?;
        let x = if t > 1 {
            let ids = Tensor::from_slice(&batch.tokens, (b, t), &Device::Cpu)?.narrow(1, 0, t - 1)?.contiguous()?;
            let tok = self.token_table()?.index_select(&ids.flatten_all()?, 0)?.reshape((b, t - 1, d))?;
            Tensor::cat(&[&cls, &tok], 1)?
        } else {
            cls
        };
        Ok(x.broadcast_add(&self.positions.narrow(0, 0, t)?.unsqueeze(0)?)?)
    }

    fn final_layer(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = chunks(&self.final_ada.forward(cond)?, 2)?;
        self.logits(&modulate(&LayerNorm::plain().forward(x)?, &m[0], &m[1])?)
    }

    /// Teacher-forced pass over whole sequences. Position `p` of the output
    /// predicts `tokens[p]` from `tokens[..p]` and the label. When `dropout_rng`
    /// is given the pass runs in training mode with dropout drawn from it.
    pub fn forward(&self, batch: &TokenBatch, taps: Taps, dropout_rng: Option<&mut StreamRng>) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let wanted: Vec<usize> = match taps {
            Taps::None => vec![],
            Taps::Configured => vec![self.config.tap_shallow, self.config.tap_deep],
            Taps::Layers(l) => l.to_vec(),
        };
        if let Some(l) = wanted.iter().find(|&&l| l >= self.config.num_layers) {
            return Err(config_err!("tap layer {l} out of range for {} layers", self.config.num_layers));
        }
        let labels = Tensor::from_slice(&batch.labels, batch.batch, &Device::Cpu)?;
        let (cls, cond) = self.conditioning(&labels)?;
        let cond = cond.to_dtype(self.store.dtype())?;
        let mut x = self.embed_sequence(batch, &cls)?;
        let mut dropout = dropout_rng.map(|rng| Dropout { p: self.config.dropout, rng });
        let mut tapped = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if self.config.tap_indexing == TapIndexing::PreBlock && wanted.contains(&i) {
                tapped.insert(i, x.clone());
            }
            x = block.forward(&x, &cond, 0, None, &mut dropout)?;
            if self.config.tap_indexing == TapIndexing::PostBlock && wanted.contains(&i) {
                tapped.insert(i, x.clone());
            }
        }
        Ok(ForwardOutput { logits: self.final_layer(&x, &cond)?, tapped })
    }

    /// Start incremental decoding for a batch of labels.
    pub fn start_cache(&self, labels: &[u32]) -> Result<KvCache> {
        if let Some(l) = labels.iter().find(|&&l| l > self.config.null_class()) {
            return Err(input_err!("label {l} out of range (null class is {})", self.config.null_class()));
        }
        let labels = Tensor::from_slice(labels, labels.len(), &Device::Cpu)?;
        let (_, cond) = self.conditioning(&labels)?;
        Ok(KvCache { layers: vec![None; self.config.num_layers], cond: cond.detach(), labels, pos: 0 })
    }

    /// Feed one position and return the `B x K` logits for the next token.
    /// The first call takes no tokens (the class token is the input); every
    /// later call takes the previously emitted token of each sequence.
    pub fn step(&self, cache: &mut KvCache, tokens: Option<&[u32]>) -> Result<Tensor> {
        let b = cache.labels.dim(0)?;
        let d = self.config.hidden_dim;
        if cache.pos >= self.config.seq_len {
            return Err(input_err!("KV cache already holds {} positions", cache.pos));
        }
        let emb = match (cache.pos, tokens) {
            (0, None) => self.class_table.index_select(&cache.labels, 0)?,
            (_, Some(t)) if cache.pos > 0 => {
                if t.len() != b || t.iter().any(|&x| x as usize >= self.config.vocab_size) {
                    return Err(input_err!("step needs {b} in-range tokens"));
                }
                self.token_table()?.index_select(&Tensor::from_slice(t, b, &Device::Cpu)?, 0)?
            }
            _ => return Err(input_err!("the first step takes no tokens and later steps require them")),
        };
        let mut x = emb.reshape((b, 1, d))?.broadcast_add(&self.positions.narrow(0, cache.pos, 1)?.unsqueeze(0)?)?;
        let mut none = None;
        for (block, slot) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            x = block.forward(&x, &cache.cond, cache.pos, Some(slot), &mut none)?;
        }
        cache.pos += 1;
        Ok(self.final_layer(&x, &cache.cond)?.squeeze(1)?.detach())
    }

    /// Project tapped features through the current-token head.
    pub fn project_shallow(&self, features: &Tensor) -> Result<Tensor> {
        self.head_shallow.forward(features)
    }

    /// Project tapped features through the next-token head.
    pub fn project_deep(&self, features: &Tensor) -> Result<Tensor> {
        self.head_deep.forward(features)
    }
}
