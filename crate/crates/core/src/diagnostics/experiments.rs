use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{ctr, mean, perceptual_distance_per_image, psnr_per_image, teacher_forced, teacher_forced_with_context, cka};
use crate::data::{DiagnosticsReport, Record};
use crate::error::{input_err, Result};
use crate::regularizers::corrupt;
use crate::rng;
use crate::sampler::{decode_with_context_mask, front_loaded_mask, interleaved_mask, SampleConfig};
use crate::transformer::{ArTransformer, Taps, TokenBatch};
use crate::vq::{cosine_similarity, TokenSequence, Tokenizer};

const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Ground truth occupies the first `floor(rN)` positions.
    FrontLoaded,
    /// The same number of ground-truth positions, chosen uniformly at random.
    Interleaved,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::FrontLoaded => "front_loaded",
            Protocol::Interleaved => "interleaved",
        }
    }
}

pub fn condition_label(protocol: Option<&str>, ratio: f64) -> String {
    match protocol {
        Some(p) => format!("{p}@r={ratio:.2}"),
        None => format!("r'={ratio:.2}"),
    }
}

/// Image-level metrics of `seqs` against reference images (the tokenizer's
/// decoding of the ground truth), plus CTR against `gt` and the model's
/// teacher-forced perplexity of `seqs`.
fn score(
    model: &ArTransformer,
    tokenizer: &Tokenizer,
    seqs: &[TokenSequence],
    gt: &[TokenSequence],
    reference: &crate::vq::ImageBatch,
) -> Result<BTreeMap<String, f64>> {
    let images = tokenizer.decode_tokens(seqs)?;
    let ctrs: Vec<f64> = seqs.iter().zip(gt).map(|(s, g)| ctr(&s.tokens, &g.tokens)).collect::<Result<_>>()?;
    let tf = teacher_forced(model, seqs, EVAL_BATCH)?;
    let mut m = BTreeMap::new();
    m.insert("ctr".into(), mean(&ctrs));
    m.insert("perplexity".into(), mean(&tf.mean_nll.iter().map(|n| n.exp()).collect::<Vec<_>>()));
    m.insert("psnr".into(), mean(&psnr_per_image(&images, reference)?));
    m.insert("perceptual".into(), mean(&perceptual_distance_per_image(&images, reference, tokenizer)?));
    Ok(m)
}

/// Decode every ground-truth sequence under both context protocols for each
/// ratio and seed. Both protocols share the sampling seed, so they differ
/// only in where the ground truth sits.
pub fn exposure_bias_experiment(
    model: &ArTransformer,
    tokenizer: &Tokenizer,
    gt: &[TokenSequence],
    ratios: &[f64],
    seeds: &[u64],
    sampling: &SampleConfig,
) -> Result<DiagnosticsReport> {
    if gt.is_empty() {
        return Err(input_err!("exposure-bias experiment needs ground-truth sequences"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(input_err!("ratio {r} outside [0, 1]"));
    }
    let n = model.config.seq_len;
    let reference = tokenizer.decode_tokens(gt)?;
    let mut report = DiagnosticsReport::new("exposure_bias");
    for &seed in seeds {
        for (ri, &r) in ratios.iter().enumerate() {
            for protocol in [Protocol::FrontLoaded, Protocol::Interleaved] {
                let masks: Vec<Vec<bool>> = match protocol {
                    Protocol::FrontLoaded => vec![front_loaded_mask(n, r); gt.len()],
                    Protocol::Interleaved => {
                        let mut mrng = rng::stream(seed, "interleaved_mask", ri as u64);
                        (0..gt.len()).map(|_| interleaved_mask(n, r, &mut mrng)).collect()
                    }
                };
                let cfg = SampleConfig { seed, ..sampling.clone() };
                let out = decode_with_context_mask(model, gt, &masks, &cfg)?;
                let metrics = score(model, tokenizer, &out, gt, &reference)?;
                report.push(Record {
                    condition: condition_label(Some(protocol.name()), r),
                    protocol: Some(protocol.name().into()),
                    ratio: Some(r),
                    seed,
                    samples: gt.len(),
                    metrics,
                });
            }
        }
    }
    report.summarize();
    Ok(report)
}

/// Teacher-forced argmax predictions in which each incorrect position is,
/// with probability `r'`, replaced by the codebook entry nearest to the
/// correct token. The uniforms deciding replacement are shared across
/// ratios, so larger ratios replace a superset of positions.
pub fn embedding_replacement_experiment(
    model: &ArTransformer,
    tokenizer: &Tokenizer,
    gt: &[TokenSequence],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<DiagnosticsReport> {
    if gt.is_empty() {
        return Err(input_err!("embedding-replacement experiment needs ground-truth sequences"));
    }
    let codebook = &tokenizer.codebook;
    let nearest = codebook.nearest_incorrect_table();
    let reference = tokenizer.decode_tokens(gt)?;
    let tf = teacher_forced(model, gt, EVAL_BATCH)?;
    let gt_perplexity = mean(&tf.mean_nll.iter().map(|n| n.exp()).collect::<Vec<_>>());
    let mut report = DiagnosticsReport::new("embedding_replacement");
    for &seed in seeds {
        let uniforms: Vec<Vec<f64>> = gt
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut r = rng::stream(seed, "replacement", i as u64);
                (0..g.tokens.len()).map(|_| r.random::<f64>()).collect()
            })
            .collect();
        for &rp in ratios {
            if !(0.0..=1.0).contains(&rp) {
                return Err(input_err!("ratio {rp} outside [0, 1]"));
            }
            let replaced: Vec<TokenSequence> = tf
                .predictions
                .iter()
                .zip(gt)
                .zip(&uniforms)
                .map(|((p, g), u)| TokenSequence {
                    tokens: p
                        .tokens
                        .iter()
                        .zip(&g.tokens)
                        .zip(u)
                        .map(|((&x, &y), &u)| if x != y && u < rp { nearest[y as usize] as u32 } else { x })
                        .collect(),
                    label: p.label,
                })
                .collect();
            let images = tokenizer.decode_tokens(&replaced)?;
            let ctrs: Vec<f64> = replaced.iter().zip(gt).map(|(s, g)| ctr(&s.tokens, &g.tokens)).collect::<Result<_>>()?;
            let sims: Vec<f64> = replaced
                .iter()
                .zip(gt)
                .flat_map(|(s, g)| {
                    s.tokens.iter().zip(&g.tokens).map(|(&a, &b)| cosine_similarity(codebook.entry(a as usize), codebook.entry(b as usize)))
                })
                .collect();
            let mut metrics = BTreeMap::new();
            metrics.insert("ctr".into(), mean(&ctrs));
            metrics.insert("embedding_similarity".into(), mean(&sims));
            metrics.insert("perplexity".into(), gt_perplexity);
            metrics.insert("psnr".into(), mean(&psnr_per_image(&images, &reference)?));
            metrics.insert("perceptual".into(), mean(&perceptual_distance_per_image(&images, &reference, tokenizer)?));
            report.push(Record { condition: condition_label(None, rp), protocol: None, ratio: Some(rp), seed, samples: gt.len(), metrics });
        }
    }
    report.summarize();
    Ok(report)
}

/// Per-layer CKA between hidden states and codebook embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    pub tag: String,
    /// Against the embedding of the token fed at each position.
    pub encoded: Vec<f64>,
    /// Against the embedding of the token predicted at each position.
    pub decoded: Vec<f64>,
    pub positions: usize,
}

/// Collect up to `max_positions` positions (1..N of each sequence, in order)
/// and compute, for every layer, the CKA of its hidden states with the
/// current-token and next-token codebook embeddings.
pub fn layer_similarity_profile(
    model: &ArTransformer,
    tokenizer: &Tokenizer,
    seqs: &[TokenSequence],
    max_positions: usize,
    tag: &str,
) -> Result<CkaProfile> {
    let layers: Vec<usize> = (0..model.config.num_layers).collect();
    let d = model.config.hidden_dim;
    let c = tokenizer.codebook.dim();
    let n = model.config.seq_len;
    let mut hidden = vec![Vec::new(); layers.len()];
    let (mut enc, mut dec) = (Vec::new(), Vec::new());
    let mut count = 0;
    for chunk in seqs.chunks(EVAL_BATCH) {
        if count >= max_positions {
            break;
        }
        let batch = TokenBatch::from_sequences(chunk)?;
        let out = model.forward(&batch, Taps::Layers(&layers), None)?;
        let states: Vec<Vec<f64>> = layers
            .iter()
            .map(|l| Ok(out.tapped[l].to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            .collect::<Result<_>>()?;
        for (b, s) in chunk.iter().enumerate() {
            for p in 1..n {
                if count >= max_positions {
                    break;
                }
                for (l, st) in states.iter().enumerate() {
                    let off = (b * n + p) * d;
                    hidden[l].extend_from_slice(&st[off..off + d]);
                }
                enc.extend(tokenizer.codebook.entry(s.tokens[p - 1] as usize).iter().map(|&v| v as f64));
                dec.extend(tokenizer.codebook.entry(s.tokens[p] as usize).iter().map(|&v| v as f64));
                count += 1;
            }
        }
    }
    let mut profile = CkaProfile { tag: tag.into(), encoded: Vec::new(), decoded: Vec::new(), positions: count };
    for h in &hidden {
        profile.encoded.push(cka(h, d, &enc, c)?.value);
        profile.decoded.push(cka(h, d, &dec, c)?.value);
    }
    Ok(profile)
}

/// Teacher-forced CTR and NLL on both splits, with clean contexts and with
/// each context token replaced by a uniform draw with probability
/// `noise_level`. Targets are always the clean tokens.
pub fn robustness_report(
    model: &ArTransformer,
    train: &[TokenSequence],
    val: &[TokenSequence],
    noise_level: f64,
    seed: u64,
) -> Result<DiagnosticsReport> {
    let mut report = DiagnosticsReport::new("robustness");
    let k = model.config.vocab_size;
    for (split, data) in [("train", train), ("val", val)] {
        if data.is_empty() {
            continue;
        }
        let mut nrng = rng::stream(seed, "robustness_noise", if split == "train" { 0 } else { 1 });
        let noisy: Vec<TokenSequence> = data
            .iter()
            .map(|s| Ok(TokenSequence { tokens: corrupt(&s.tokens, noise_level, k, &mut nrng)?.noisy, label: s.label }))
            .collect::<Result<_>>()?;
        for (cond, ctx) in [("clean", data), ("noisy", noisy.as_slice())] {
            let tf = teacher_forced_with_context(model, ctx, data, EVAL_BATCH)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("ctr".into(), tf.mean_ctr());
            metrics.insert("nll".into(), tf.nll());
            metrics.insert("perplexity".into(), tf.perplexity());
            report.push(Record {
                condition: format!("{split}/{cond}"),
                protocol: Some(cond.into()),
                ratio: Some(if cond == "clean" { 0.0 } else { noise_level }),
                seed,
                samples: data.len(),
                metrics,
            });
        }
    }
    report.summarize();
    Ok(report)
}
