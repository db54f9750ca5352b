//! Free-running decoding with classifier-free guidance, with or without a KV
//! cache, plus decoding with ground-truth tokens forced at chosen positions.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::rng;
use crate::transformer::{ArTransformer, KvCache, Taps, TokenBatch};
use crate::vq::TokenSequence;

/// Sampling temperature; fixed, and no top-k / top-p truncation is applied.
pub const TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSchedule {
    #[default]
    PowerCosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub guidance_scale: f64,
    pub guidance_power: f64,
    pub schedule: GuidanceSchedule,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { guidance_scale: 4.0, guidance_power: 2.0, schedule: GuidanceSchedule::PowerCosine, seed: 0, batch_size: 16 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) || !(self.guidance_power > 0.0) {
            return Err(crate::error::config_err!("guidance scale must be finite and >= 0 and power > 0"));
        }
        Ok(())
    }

    pub fn scale_at(&self, step: usize, len: usize) -> f64 {
        match self.schedule {
            GuidanceSchedule::PowerCosine => cfg_scale_at(step, len, self.guidance_scale, self.guidance_power),
            GuidanceSchedule::Constant => self.guidance_scale,
        }
    }

    fn guided(&self) -> bool {
        self.guidance_scale != 1.0
    }
}

/// Power-cosine guidance ramp:
/// `1 + (s - 1) * (1 - cos(pi * ((i + 1) / n)^p)) / 2`, rising from near 1 to
/// exactly `s` at the last step.
pub fn cfg_scale_at(step: usize, len: usize, scale: f64, power: f64) -> f64 {
    let progress = ((step + 1) as f64 / len as f64).powf(power);
    1.0 + (scale - 1.0) * (1.0 - (std::f64::consts::PI * progress).cos()) / 2.0
}

/// `uncond + scale * (cond - uncond)`, computed so that `scale` 1 and 0
/// return the conditional and unconditional logits exactly.
pub fn guided_logits(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| if c == u { c } else { c * scale + u * (1.0 - scale) })
        .collect()
}

/// Inverse-CDF draw from `softmax(logits / TEMPERATURE)` given `u` in `[0, 1)`.
pub fn sample_from_logits(logits: &[f64], u: f64) -> u32 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / TEMPERATURE).exp()).collect();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if target < acc {
            return i as u32;
        }
    }
    last_positive as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    KvCache,
    /// Recompute the whole prefix at every step.
    Recompute,
}

/// Generated sequences, optionally with the guided logits of every step.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub sequences: Vec<TokenSequence>,
    /// `step_logits[t][b]` are the guided logits used at step `t` for item `b`.
    pub step_logits: Option<Vec<Vec<Vec<f64>>>>,
}

enum Stepper<'a> {
    Cached(KvCache),
    Recompute { model: &'a ArTransformer, labels: Vec<u32>, prefix: Vec<Vec<u32>> },
}

impl Stepper<'_> {
    /// Logits (`rows x K`, as f64 rows) for the next position, after feeding
    /// `fed` (None on the first step).
    fn next(&mut self, model: &ArTransformer, fed: Option<&[u32]>) -> Result<Vec<Vec<f64>>> {
        let logits = match self {
            Stepper::Cached(cache) => model.step(cache, fed)?,
            Stepper::Recompute { model, labels, prefix } => {
                if let Some(f) = fed {
                    for (p, &t) in prefix.iter_mut().zip(f) {
                        p.push(t);
                    }
                }
                let t = prefix[0].len();
                let tokens: Vec<u32> = prefix.iter().flat_map(|p| p.iter().copied().chain(std::iter::once(0))).collect();
                let batch = TokenBatch::new(tokens, labels.clone(), t + 1)?;
                model.forward(&batch, Taps::None, None)?.logits.narrow(1, t, 1)?.squeeze(1)?
            }
        };
        Ok(logits.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// Decode `labels.len()` sequences in chunks of `config.batch_size`. Where
/// `forced[b][t]` is set, that token is used at step `t` instead of a sample;
/// every other position is drawn at temperature 1 from the guided
/// distribution given the realized prefix. Item `b` draws its randomness from
/// its own stream keyed by `config.seed` and `b`, so results do not depend on
/// how items are chunked.
pub fn generate(
    model: &ArTransformer,
    labels: &[u32],
    forced: &[Vec<Option<u32>>],
    config: &SampleConfig,
    backend: Backend,
    record_logits: bool,
) -> Result<SampleOutput> {
    config.validate()?;
    let n = model.config.seq_len;
    if forced.len() != labels.len() || forced.iter().any(|f| f.len() != n) {
        return Err(input_err!("forced-token table must be {} x {n}", labels.len()));
    }
    let chunk = config.batch_size.max(1);
    let mut out = SampleOutput { sequences: Vec::with_capacity(labels.len()), step_logits: record_logits.then(|| vec![Vec::new(); n]) };
    for start in (0..labels.len()).step_by(chunk) {
        let end = (start + chunk).min(labels.len());
        let part = generate_chunk(model, &labels[start..end], &forced[start..end], start, config, backend, record_logits)?;
        out.sequences.extend(part.sequences);
        if let (Some(all), Some(steps)) = (out.step_logits.as_mut(), part.step_logits) {
            for (a, s) in all.iter_mut().zip(steps) {
                a.extend(s);
            }
        }
    }
    Ok(out)
}

fn generate_chunk(
    model: &ArTransformer,
    labels: &[u32],
    forced: &[Vec<Option<u32>>],
    offset: usize,
    config: &SampleConfig,
    backend: Backend,
    record_logits: bool,
) -> Result<SampleOutput> {
    let n = model.config.seq_len;
    let b = labels.len();
    let guided = config.guided();
    let mut rows: Vec<u32> = labels.to_vec();
    if guided {
        rows.extend(std::iter::repeat_n(model.config.null_class(), b));
    }
    let mut stepper = match backend {
        Backend::KvCache => Stepper::Cached(model.start_cache(&rows)?),
        Backend::Recompute => Stepper::Recompute { model, labels: rows.clone(), prefix: vec![Vec::new(); rows.len()] },
    };
    let mut rngs: Vec<_> = (0..b).map(|i| rng::stream(config.seed, "sample", (offset + i) as u64)).collect();
    let mut out = vec![Vec::with_capacity(n); b];
    let mut recorded = record_logits.then(Vec::new);
    let mut fed: Option<Vec<u32>> = None;
    for t in 0..n {
        let logits = stepper.next(model, fed.as_deref())?;
        let scale = config.scale_at(t, n);
        let mut step_rec = Vec::with_capacity(b);
        let mut emitted = Vec::with_capacity(rows.len());
        for i in 0..b {
            let l = if guided { guided_logits(&logits[i], &logits[b + i], scale) } else { logits[i].clone() };
            let tok = match forced[i][t] {
                Some(g) => g,
                None => sample_from_logits(&l, rngs[i].random::<f64>()),
            };
            out[i].push(tok);
            emitted.push(tok);
            if recorded.is_some() {
                step_rec.push(l);
            }
        }
        if let Some(r) = recorded.as_mut() {
            r.push(step_rec);
        }
        if guided {
            emitted.extend_from_within(..b);
        }
        fed = Some(emitted);
    }
    Ok(SampleOutput {
        sequences: out.into_iter().zip(labels).map(|(tokens, &label)| TokenSequence { tokens, label }).collect(),
        step_logits: recorded,
    })
}

/// Unconstrained sampling with the KV cache.
pub fn sample(model: &ArTransformer, labels: &[u32], config: &SampleConfig) -> Result<Vec<TokenSequence>> {
    let forced = vec![vec![None; model.config.seq_len]; labels.len()];
    Ok(generate(model, labels, &forced, config, Backend::KvCache, false)?.sequences)
}

/// Decode with ground-truth tokens copied at the positions in `masks[b]`
/// (`true` = forced) and sampled elsewhere.
pub fn decode_with_context_mask(
    model: &ArTransformer,
    ground_truth: &[TokenSequence],
    masks: &[Vec<bool>],
    config: &SampleConfig,
) -> Result<Vec<TokenSequence>> {
    if ground_truth.len() != masks.len() {
        return Err(input_err!("need one mask per ground-truth sequence"));
    }
    let forced: Vec<Vec<Option<u32>>> = ground_truth
        .iter()
        .zip(masks)
        .map(|(g, m)| {
            if g.tokens.len() != m.len() {
                return Err(input_err!("mask length {} does not match sequence length {}", m.len(), g.tokens.len()));
            }
            Ok(g.tokens.iter().zip(m).map(|(&t, &f)| f.then_some(t)).collect())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = ground_truth.iter().map(|g| g.label).collect();
    Ok(generate(model, &labels, &forced, config, Backend::KvCache, false)?.sequences)
}

/// Mask forcing the first `floor(r * n)` positions.
pub fn front_loaded_mask(n: usize, r: f64) -> Vec<bool> {
    let k = ((r * n as f64).floor() as usize).min(n);
    (0..n).map(|i| i < k).collect()
}

/// Mask forcing `floor(r * n)` positions chosen uniformly at random.
pub fn interleaved_mask(n: usize, r: f64, rng: &mut rng::StreamRng) -> Vec<bool> {
    use rand::seq::index::sample as choose;
    let k = ((r * n as f64).floor() as usize).min(n);
    let mut m = vec![false; n];
    for i in choose(rng, n, k).iter() {
        m[i] = true;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub images_per_sec: f64,
    pub tokens_per_sec: f64,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub batch_size: usize,
    pub seq_len: usize,
    pub runs: usize,
    pub hardware: String,
    pub cached: Throughput,
    pub recompute: Throughput,
}

pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu} ({} {}, {threads} threads)", std::env::consts::OS, std::env::consts::ARCH)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Time cached and recomputing decoders over `runs` (>= 3) measured runs
/// after one warm-up run each, and report medians.
pub fn throughput_report(model: &ArTransformer, batch_size: usize, config: &SampleConfig, runs: usize) -> Result<ThroughputReport> {
    let runs = runs.max(3);
    let n = model.config.seq_len;
    let labels: Vec<u32> = (0..batch_size).map(|i| (i % model.config.num_classes) as u32).collect();
    let forced = vec![vec![None; n]; batch_size];
    let measure = |backend| -> Result<Throughput> {
        generate(model, &labels, &forced, config, backend, false)?;
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            generate(model, &labels, &forced, config, backend, false)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let med = median(times);
        let ips = batch_size as f64 / med;
        Ok(Throughput { images_per_sec: ips, tokens_per_sec: ips * n as f64, median_seconds: med })
    };
    let cached = measure(Backend::KvCache)?;
    let recompute = measure(Backend::Recompute)?;
    Ok(ThroughputReport { batch_size, seq_len: n, runs, hardware: hardware_string(), cached, recompute })
}

/// Convenience for callers holding a logits tensor.
pub fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
