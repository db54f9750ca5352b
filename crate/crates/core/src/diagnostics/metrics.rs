use candle_core::{DType, Tensor, D};

use crate::error::{input_err, Result};
use crate::transformer::{ArTransformer, Taps, TokenBatch};
use crate::vq::{ImageBatch, TokenSequence, Tokenizer};

/// PSNR returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Fraction of positions where `pred` equals `gt`.
pub fn ctr(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(input_err!("sequence lengths differ: {} vs {}", pred.len(), gt.len()));
    }
    if gt.is_empty() {
        return Err(input_err!("cannot score an empty sequence"));
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64)
}

/// `exp(-mean(ln p))` for the probabilities assigned to each target.
pub fn perplexity_from_probs(probs: &[f64]) -> f64 {
    let nll: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / probs.len() as f64;
    nll.exp()
}

/// Teacher-forced evaluation: per-position argmax and per-sequence mean NLL.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub predictions: Vec<TokenSequence>,
    pub mean_nll: Vec<f64>,
    pub ctr: Vec<f64>,
}

impl TeacherForced {
    pub fn mean_ctr(&self) -> f64 {
        mean(&self.ctr)
    }

    /// Mean NLL over every position of every sequence.
    pub fn nll(&self) -> f64 {
        mean(&self.mean_nll)
    }

    pub fn perplexity(&self) -> f64 {
        self.nll().exp()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Feed `context` (clean or corrupted, with its labels) and score the
/// predictions against `targets`.
pub fn teacher_forced_with_context(
    model: &ArTransformer,
    context: &[TokenSequence],
    targets: &[TokenSequence],
    batch_size: usize,
) -> Result<TeacherForced> {
    if context.len() != targets.len() {
        return Err(input_err!("need one target per context sequence"));
    }
    let mut out = TeacherForced { predictions: Vec::new(), mean_nll: Vec::new(), ctr: Vec::new() };
    for (ctx, tgt) in context.chunks(batch_size.max(1)).zip(targets.chunks(batch_size.max(1))) {
        let batch = TokenBatch::from_sequences(ctx)?;
        let logits = model.forward(&batch, Taps::None, None)?.logits.to_dtype(DType::F64)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let argmax = logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
        let ids = Tensor::from_vec(tgt.iter().flat_map(|s| s.tokens.iter().map(|&t| t as i64)).collect::<Vec<_>>(), (tgt.len(), batch.len), logits.device())?;
        let picked = logp.gather(&ids.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?.squeeze(D::Minus1)?;
        let nll = picked.neg()?.mean(D::Minus1)?.to_vec1::<f64>()?;
        for ((pred, t), n) in argmax.into_iter().zip(tgt).zip(nll) {
            out.ctr.push(ctr(&pred, &t.tokens)?);
            out.predictions.push(TokenSequence { tokens: pred, label: t.label });
            out.mean_nll.push(n);
        }
    }
    Ok(out)
}

pub fn teacher_forced(model: &ArTransformer, seqs: &[TokenSequence], batch_size: usize) -> Result<TeacherForced> {
    teacher_forced_with_context(model, seqs, seqs, batch_size)
}

/// Teacher-forced CTR of one sequence.
pub fn teacher_forced_ctr(model: &ArTransformer, seq: &TokenSequence) -> Result<f64> {
    Ok(teacher_forced(model, std::slice::from_ref(seq), 1)?.ctr[0])
}

/// Exponential of the teacher-forced mean NLL of one sequence.
pub fn perplexity(model: &ArTransformer, seq: &TokenSequence) -> Result<f64> {
    Ok(teacher_forced(model, std::slice::from_ref(seq), 1)?.mean_nll[0].exp())
}

/// Per-image PSNR with peak value 1, capped at [`PSNR_CAP`].
pub fn psnr_per_image(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    check_same(a, b)?;
    Ok((0..a.batch)
        .map(|i| {
            let (x, y) = (a.image(i), b.image(i));
            let mse = x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / x.len() as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect())
}

/// Mean per-image PSNR.
pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    Ok(mean(&psnr_per_image(a, b)?))
}

fn check_same(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    if (a.batch, a.height, a.width) != (b.batch, b.height, b.width) {
        return Err(input_err!(
            "image batches differ in shape: {}x{}x{} vs {}x{}x{}",
            a.batch,
            a.height,
            a.width,
            b.batch,
            b.height,
            b.width
        ));
    }
    Ok(())
}

/// Source of deep features for the perceptual distance.
pub trait FeatureExtractor {
    /// One `B x C x H x W` tensor per layer.
    fn features(&self, images: &ImageBatch) -> Result<Vec<Tensor>>;
}

/// The tokenizer's encoder activations serve as the desk-scale feature net.
impl FeatureExtractor for Tokenizer {
    fn features(&self, images: &ImageBatch) -> Result<Vec<Tensor>> {
        let mut per_layer: Vec<Vec<Tensor>> = Vec::new();
        for start in (0..images.batch).step_by(128) {
            let idx: Vec<usize> = (start..(start + 128).min(images.batch)).collect();
            let (_, feats) = self.encode_tensor(&images.select(&idx).to_tensor()?)?;
            per_layer.resize(feats.len(), Vec::new());
            for (l, f) in feats.into_iter().enumerate() {
                per_layer[l].push(f);
            }
        }
        per_layer.into_iter().map(|parts| Ok(Tensor::cat(&parts, 0)?)).collect()
    }
}

fn unit_channels(f: &Tensor) -> Result<Tensor> {
    let f = f.to_dtype(DType::F64)?;
    let norm = (f.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(f.broadcast_div(&norm)?)
}

/// Per-image perceptual distance: for every layer, features are scaled to
/// unit length along channels, and the squared difference is summed over
/// channels and averaged over space; layers are summed with unit weight.
pub fn perceptual_distance_per_image(a: &ImageBatch, b: &ImageBatch, extractor: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    check_same(a, b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    if fa.is_empty() {
        return Err(input_err!("feature extractor exposes no layers"));
    }
    let mut total = vec![0.0; a.batch];
    for (x, y) in fa.iter().zip(&fb) {
        let d = (unit_channels(x)? - unit_channels(y)?)?.sqr()?.sum(1)?.flatten_from(1)?.mean(1)?.to_vec1::<f64>()?;
        for (t, v) in total.iter_mut().zip(d) {
            *t += v;
        }
    }
    Ok(total)
}

pub fn perceptual_distance(a: &ImageBatch, b: &ImageBatch, extractor: &dyn FeatureExtractor) -> Result<f64> {
    Ok(mean(&perceptual_distance_per_image(a, b, extractor)?))
}

/// Linear CKA between two feature sets with `n` rows each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cka {
    pub value: f64,
    /// Set when either centered feature set is (numerically) constant; the
    /// value is then 0.
    pub degenerate: bool,
}

fn center(x: &[f64], n: usize, d: usize) -> (Vec<f64>, f64, f64) {
    let mut means = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            means[c] += x[r * d + c];
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.to_vec();
    let (mut raw, mut centered) = (0.0, 0.0);
    for r in 0..n {
        for c in 0..d {
            raw += x[r * d + c].powi(2);
            out[r * d + c] -= means[c];
            centered += out[r * d + c].powi(2);
        }
    }
    (out, raw, centered)
}

/// `a^T b` for row-major `n x da` and `n x db` matrices.
fn cross(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; da * db];
    for r in 0..n {
        let ra = &a[r * da..(r + 1) * da];
        let rb = &b[r * db..(r + 1) * db];
        for (i, &va) in ra.iter().enumerate() {
            let row = &mut out[i * db..(i + 1) * db];
            for (o, &vb) in row.iter_mut().zip(rb) {
                *o += va * vb;
            }
        }
    }
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA, `<Kc, Lc>_F / (|Kc|_F |Lc|_F)` with `K = X X^T`, `L = Y Y^T`,
/// evaluated in feature space as `|Yc^T Xc|_F^2 / (|Xc^T Xc|_F |Yc^T Yc|_F)`.
/// `x` is `n x dx` and `y` is `n x dy`, row-major.
pub fn cka(x: &[f64], dx: usize, y: &[f64], dy: usize) -> Result<Cka> {
    if dx == 0 || dy == 0 || x.len() % dx != 0 || y.len() % dy != 0 || x.len() / dx != y.len() / dy {
        return Err(input_err!("feature matrices must have the same number of rows"));
    }
    let n = x.len() / dx;
    if n < 2 {
        return Err(input_err!("CKA needs at least two rows, got {n}"));
    }
    let (xc, xr, xn) = center(x, n, dx);
    let (yc, yr, yn) = center(y, n, dy);
    if xn <= 1e-24 * xr.max(f64::MIN_POSITIVE) || yn <= 1e-24 * yr.max(f64::MIN_POSITIVE) {
        return Ok(Cka { value: 0.0, degenerate: true });
    }
    let num = frob_sq(&cross(&yc, dy, &xc, dx, n));
    let den = frob_sq(&cross(&xc, dx, &xc, dx, n)).sqrt() * frob_sq(&cross(&yc, dy, &yc, dy, n)).sqrt();
    if !(den > 0.0) {
        return Ok(Cka { value: 0.0, degenerate: true });
    }
    Ok(Cka { value: (num / den).clamp(0.0, 1.0), degenerate: false })
}
