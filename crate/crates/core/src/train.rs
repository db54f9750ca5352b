//! AR training: learning-rate schedule, AdamW, label dropout, context noise,
//! the embedding-alignment term, gradient clipping, checkpoints and resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_checkpoint, load_store_arrays, save_checkpoint, store_arrays, ArrayDtype, CheckpointContainer, NamedArray};
use crate::diagnostics::teacher_forced;
use crate::error::{config_err, Error, Result};
use crate::nn::{scalar, tensor_from_le_bytes, tensor_le_bytes};
use crate::optim::{clip_grad_norm, collect_grads, AdamW, AdamWConfig};
use crate::regularizers::{ar_loss, corrupt, embedding_reg_loss, total_loss, NoiseSchedule, RegConfig};
use crate::rng;
use crate::transformer::{ArConfig, ArTransformer, Taps, TokenBatch};
use crate::vq::{Codebook, TokenSequence};

/// Which regularizers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    NoiseOnly,
    EmbedOnly,
    #[default]
    Rear,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::NoiseOnly, Mode::EmbedOnly, Mode::Rear];

    pub fn noise_active(self) -> bool {
        matches!(self, Mode::NoiseOnly | Mode::Rear)
    }

    pub fn embed_active(self) -> bool {
        matches!(self, Mode::EmbedOnly | Mode::Rear)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::NoiseOnly => "noise_only",
            Mode::EmbedOnly => "embed_only",
            Mode::Rear => "rear",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| config_err!("unknown mode {s:?} (vanilla|noise_only|embed_only|rear)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub label_dropout: f64,
    pub mode: Mode,
    pub noise: NoiseSchedule,
    pub reg: RegConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            peak_lr: 3e-4,
            final_lr: 1e-5,
            warmup_fraction: 0.25,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 0.03,
            grad_clip_norm: 1.0,
            label_dropout: 0.1,
            mode: Mode::Rear,
            noise: NoiseSchedule::default(),
            reg: RegConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(config_err!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        for (k, v) in [("peak_lr", self.peak_lr), ("final_lr", self.final_lr), ("grad_clip_norm", self.grad_clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{k} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(config_err!("betas must lie in [0, 1) and weight_decay must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(config_err!("label_dropout must lie in [0, 1]"));
        }
        if self.reg.lambda < 0.0 {
            return Err(config_err!("lambda must be >= 0"));
        }
        self.noise.validate()
    }

    /// Noise schedule in effect, `None` when the mode disables context noise.
    pub fn effective_noise(&self) -> Option<NoiseSchedule> {
        self.mode.noise_active().then_some(self.noise)
    }

    /// Weight of the alignment term in effect (0 when the mode disables it).
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.embed_active() {
            self.reg.lambda
        } else {
            0.0
        }
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(train_len)) as u64
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Linear warm-up from 0 to `peak_lr` over the first `warmup_fraction` of
/// `total` steps, then half-cosine decay to `final_lr` at `step == total`.
pub fn lr_at(step: u64, total: u64, config: &TrainConfig) -> f64 {
    let step = step.min(total);
    let warm = ((config.warmup_fraction * total as f64).round() as u64).clamp(1, total.max(1));
    if step <= warm {
        return config.peak_lr * step as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    let w = (1.0 - (std::f64::consts::PI * progress).cos()) / 2.0;
    config.peak_lr * (1.0 - w) + config.final_lr * w
}

/// What a single update did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ar_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub grad_norm_raw: f64,
    pub grad_norm: f64,
    pub mean_epsilon: f64,
    pub corrupted_fraction: f64,
    pub labels_dropped: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ar_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub label_dropout_rate: f64,
    pub labels_seen: usize,
    /// Largest per-batch mean corruption level of the epoch.
    pub max_epsilon: f64,
    pub corrupted_fraction: f64,
    pub max_reg_loss: f64,
    /// Largest post-clipping gradient norm of the epoch.
    pub max_grad_norm: f64,
    pub val_ctr: Option<f64>,
    pub val_nll: Option<f64>,
}

/// Loss tensors for one batch.
pub struct LossParts {
    pub ar: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

/// Forward the (already corrupted, label-dropped) `input`, predict the clean
/// tokens of `clean`, and add the alignment term when `lambda > 0`.
pub fn objective(
    model: &ArTransformer,
    input: &TokenBatch,
    clean: &TokenBatch,
    codebook: &Tensor,
    lambda: f64,
    dropout_rng: Option<&mut rng::StreamRng>,
) -> Result<LossParts> {
    let taps = if lambda > 0.0 { Taps::Configured } else { Taps::None };
    let out = model.forward(input, taps, dropout_rng)?;
    let ar = ar_loss(&out.logits, &clean.tokens_tensor()?)?;
    let reg = if lambda > 0.0 { embedding_reg_loss(model, &out, clean, codebook)? } else { ar.zeros_like()? };
    let total = total_loss(&ar, &reg, lambda)?;
    Ok(LossParts { ar, reg, total })
}

/// Model, optimizer and progress counters for one training run.
pub struct Trainer {
    pub model: ArTransformer,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Seed the model was initialized with.
    pub init_seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    codebook: Tensor,
}

impl Trainer {
    pub fn new(model: ArTransformer, codebook: &Codebook, config: TrainConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if codebook.size() != model.config.vocab_size || codebook.dim() != model.config.codebook_dim {
            return Err(config_err!(
                "codebook {}x{} does not match model K={}, c={}",
                codebook.size(),
                codebook.dim(),
                model.config.vocab_size,
                model.config.codebook_dim
            ));
        }
        let codebook = codebook.to_tensor(model.store.dtype())?;
        Ok(Self { optimizer: AdamW::new(config.adamw()), model, config, init_seed, epoch: 0, step: 0, codebook })
    }

    /// One optimizer update on `batch` at normalized progress `t`, as step
    /// `self.step + 1` of `total_steps`.
    pub fn train_step(&mut self, batch: &[TokenSequence], t: f64, total_steps: u64) -> Result<StepStats> {
        let cfg = &self.config;
        let k = self.model.config.vocab_size;
        let null = self.model.config.null_class();
        let counter = self.step;
        let mut drop_rng = rng::stream(cfg.seed, "label_dropout", counter);
        let mut noise_rng = rng::stream(cfg.seed, "noise", counter);
        let mut dropout_rng = rng::stream(cfg.seed, "dropout", counter);

        let clean = TokenBatch::from_sequences(batch)?;
        let mut labels = clean.labels.clone();
        let mut dropped = 0;
        for l in labels.iter_mut() {
            if drop_rng.random::<f64>() < cfg.label_dropout {
                *l = null;
                dropped += 1;
            }
        }
        let (mut eps_sum, mut corrupted) = (0.0, 0usize);
        let tokens = match cfg.effective_noise() {
            Some(schedule) => {
                let mut noisy = Vec::with_capacity(clean.tokens.len());
                for s in batch {
                    let eps = schedule.sample_epsilon(t, &mut noise_rng)?;
                    let rec = corrupt(&s.tokens, eps, k, &mut noise_rng)?;
                    eps_sum += eps;
                    corrupted += rec.mask.iter().filter(|&&m| m).count();
                    noisy.extend(rec.noisy);
                }
                noisy
            }
            None => clean.tokens.clone(),
        };
        let input = TokenBatch::new(tokens, labels, clean.len)?;
        let lambda = cfg.effective_lambda();
        let dropout = (self.model.config.dropout > 0.0).then_some(&mut dropout_rng);
        let parts = objective(&self.model, &input, &clean, &self.codebook, lambda, dropout)?;
        let (ar, reg, total) = (scalar(&parts.ar)?, scalar(&parts.reg)?, scalar(&parts.total)?);
        if !total.is_finite() {
            return Err(Error::Training(format!("non-finite loss {total} at step {}", self.step + 1)));
        }
        let grads = parts.total.backward()?;
        let mut named = collect_grads(&self.model.store, &grads);
        let (raw, clipped) = clip_grad_norm(&mut named, cfg.grad_clip_norm)?;
        if !raw.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm at step {}", self.step + 1)));
        }
        let lr = lr_at(self.step + 1, total_steps, cfg);
        self.optimizer.step(&self.model.store, &named, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            epoch: self.epoch,
            lr,
            ar_loss: ar,
            reg_loss: reg,
            total_loss: total,
            grad_norm_raw: raw,
            grad_norm: clipped,
            mean_epsilon: eps_sum / batch.len() as f64,
            corrupted_fraction: corrupted as f64 / clean.tokens.len() as f64,
            labels_dropped: dropped,
            batch: batch.len(),
        })
    }

    /// One pass over `train` in the epoch's shuffled order.
    pub fn run_epoch(&mut self, train: &[TokenSequence], mut on_step: impl FnMut(&StepStats) -> Result<()>) -> Result<EpochStats> {
        let total_steps = self.config.total_steps(train.len());
        let t = self.epoch as f64 / self.config.epochs as f64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, "data_order", self.epoch as u64));
        let (mut ar, mut reg, mut tot, mut dropped, mut seen, mut steps) = (0.0, 0.0, 0.0, 0, 0, 0);
        let (mut max_eps, mut corrupted, mut max_reg, mut max_grad) = (0.0f64, 0.0, 0.0f64, 0.0f64);
        for idx in order.chunks(self.config.batch_size) {
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| train[i].clone()).collect();
            let s = self.train_step(&batch, t, total_steps)?;
            on_step(&s)?;
            ar += s.ar_loss;
            reg += s.reg_loss;
            tot += s.total_loss;
            dropped += s.labels_dropped;
            seen += s.batch;
            steps += 1;
            max_eps = max_eps.max(s.mean_epsilon);
            corrupted += s.corrupted_fraction;
            max_reg = max_reg.max(s.reg_loss);
            max_grad = max_grad.max(s.grad_norm);
        }
        self.epoch += 1;
        let n = steps.max(1) as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            ar_loss: ar / n,
            reg_loss: reg / n,
            total_loss: tot / n,
            label_dropout_rate: dropped as f64 / seen.max(1) as f64,
            labels_seen: seen,
            max_epsilon: max_eps,
            corrupted_fraction: corrupted / n,
            max_reg_loss: max_reg,
            max_grad_norm: max_grad,
            val_ctr: None,
            val_nll: None,
        })
    }

    /// Train until `self.config.epochs` or `options.stop_after` epochs are
    /// complete, logging, evaluating and checkpointing as configured.
    pub fn fit(&mut self, train: &[TokenSequence], val: Option<&[TokenSequence]>, options: &FitOptions) -> Result<Vec<EpochStats>> {
        let mut log = match &options.run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let mut out = Vec::new();
        let end = options.stop_after.map_or(self.config.epochs, |s| s.min(self.config.epochs));
        while self.epoch < end {
            let result = self.run_epoch(train, |s| {
                if let Some(f) = log.as_mut() {
                    let mut line = serde_json::to_value(s)?;
                    line["kind"] = "step".into();
                    writeln!(f, "{line}")?;
                }
                Ok(())
            });
            let mut stats = match result {
                Ok(s) => s,
                Err(Error::Training(msg)) => {
                    let hint = options
                        .run_dir
                        .as_ref()
                        .map(|d| latest_checkpoint(d).map_or("no checkpoint written yet".to_string(), |p| format!("last good checkpoint: {}", p.display())))
                        .unwrap_or_default();
                    return Err(Error::Training(format!("{msg}; {hint}")));
                }
                Err(e) => return Err(e),
            };
            if let Some(v) = val {
                if options.eval_every > 0 && (self.epoch % options.eval_every == 0 || self.epoch == self.config.epochs) {
                    let tf = teacher_forced(&self.model, v, 256)?;
                    stats.val_ctr = Some(tf.mean_ctr());
                    stats.val_nll = Some(tf.nll());
                }
            }
            log::info!("epoch {} ar {:.4} reg {:.4} total {:.4}", stats.epoch, stats.ar_loss, stats.reg_loss, stats.total_loss);
            if let Some(f) = log.as_mut() {
                let mut line = serde_json::to_value(&stats)?;
                line["kind"] = "epoch".into();
                writeln!(f, "{line}")?;
            }
            if let Some(dir) = &options.run_dir {
                if options.checkpoint_every > 0 && (self.epoch % options.checkpoint_every == 0 || self.epoch == self.config.epochs) {
                    save_checkpoint(&self.to_checkpoint()?, &dir.join(checkpoint_name(self.epoch)))?;
                }
            }
            out.push(stats);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<CheckpointContainer> {
        let mut c = CheckpointContainer::new("ar");
        c.config = serde_json::json!({
            "model": self.model.config,
            "train": self.config,
            "init_seed": self.init_seed,
            "dtype": format!("{:?}", self.model.store.dtype()),
        });
        c.progress = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "optimizer_steps": self.optimizer.steps,
            "t": self.epoch as f64 / self.config.epochs as f64,
        });
        c.rng = serde_json::json!({
            "seed": self.config.seed,
            "streams": rng::STREAMS,
            "counters": { "data_order": self.epoch, "dropout": self.step, "label_dropout": self.step, "noise": self.step },
        });
        c.arrays = store_arrays(&self.model.store, "")?;
        for (prefix, moments) in [("adam.m.", &self.optimizer.first), ("adam.v.", &self.optimizer.second)] {
            for (name, t) in moments {
                c.arrays.push(NamedArray {
                    name: format!("{prefix}{name}"),
                    shape: t.dims().to_vec(),
                    dtype: ArrayDtype::from_candle(t.dtype())?,
                    data: tensor_le_bytes(t)?,
                });
            }
        }
        Ok(c)
    }

    /// Rebuild a trainer (model, optimizer moments, counters) from a checkpoint.
    pub fn from_checkpoint(c: &CheckpointContainer, codebook: &Codebook) -> Result<Self> {
        if c.kind != "ar" {
            return Err(Error::Integrity(format!("expected an AR checkpoint, found kind {:?}", c.kind)));
        }
        let model_cfg: ArConfig = serde_json::from_value(c.config["model"].clone())?;
        let train_cfg: TrainConfig = serde_json::from_value(c.config["train"].clone())?;
        let init_seed = c.config["init_seed"].as_u64().unwrap_or(0);
        let dtype = match c.config["dtype"].as_str() {
            Some("F64") => DType::F64,
            _ => DType::F32,
        };
        let model = ArTransformer::new(model_cfg, dtype, init_seed, Some(codebook))?;
        load_store_arrays(&model.store, c, &["adam."])?;
        let mut trainer = Trainer::new(model, codebook, train_cfg, init_seed)?;
        for a in &c.arrays {
            let (map, name) = if let Some(n) = a.name.strip_prefix("adam.m.") {
                (&mut trainer.optimizer.first, n)
            } else if let Some(n) = a.name.strip_prefix("adam.v.") {
                (&mut trainer.optimizer.second, n)
            } else {
                continue;
            };
            map.insert(name.to_string(), tensor_from_le_bytes(&a.data, &a.shape, a.dtype.to_candle())?);
        }
        let field = |k: &str| c.progress[k].as_u64().ok_or_else(|| Error::Integrity(format!("checkpoint progress lacks {k}")));
        trainer.epoch = field("epoch")? as usize;
        trainer.step = field("step")?;
        trainer.optimizer.steps = field("optimizer_steps")?;
        Ok(trainer)
    }

    pub fn resume(path: &Path, codebook: &Codebook) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, codebook)
    }
}

/// One row of the mode comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub epochs: usize,
    pub noise_active: bool,
    pub lambda: f64,
    pub final_ar_loss: f64,
    pub final_reg_loss: f64,
    /// Largest reg loss and corruption level seen over the whole run.
    pub max_reg_loss: f64,
    pub max_epsilon: f64,
    pub val_ctr: f64,
    pub val_noisy_ctr: f64,
    pub val_nll: f64,
}

impl ModeSummary {
    /// Summarize a finished run, evaluating on `val` with clean contexts and
    /// with contexts corrupted at `noise_level`.
    pub fn evaluate(trainer: &Trainer, history: &[EpochStats], val: &[TokenSequence], noise_level: f64, seed: u64) -> Result<Self> {
        let rob = crate::diagnostics::robustness_report(&trainer.model, &val[..0], val, noise_level, seed)?;
        let get = |c: &str, m: &str| rob.mean(c, m).unwrap_or(f64::NAN);
        let last = history.last();
        Ok(Self {
            mode: trainer.config.mode,
            epochs: trainer.epoch,
            noise_active: trainer.config.effective_noise().is_some(),
            lambda: trainer.config.effective_lambda(),
            final_ar_loss: last.map_or(f64::NAN, |e| e.ar_loss),
            final_reg_loss: last.map_or(f64::NAN, |e| e.reg_loss),
            max_reg_loss: history.iter().map(|e| e.max_reg_loss).fold(0.0, f64::max),
            max_epsilon: history.iter().map(|e| e.max_epsilon).fold(0.0, f64::max),
            val_ctr: get("val/clean", "ctr"),
            val_noisy_ctr: get("val/noisy", "ctr"),
            val_nll: get("val/clean", "nll"),
        })
    }
}

/// Markdown table with one row per mode.
pub fn comparison_markdown(rows: &[ModeSummary]) -> String {
    let mut out = String::from(
        "| mode | epochs | noise | lambda | ar loss | reg loss | max eps | val CTR | val CTR (noisy) | val NLL |\n|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out += &format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.3} | {:.4} | {:.4} | {:.4} |\n",
            r.mode.name(),
            r.epochs,
            if r.noise_active { "on" } else { "off" },
            r.lambda,
            r.final_ar_loss,
            r.final_reg_loss,
            r.max_epsilon,
            r.val_ctr,
            r.val_noisy_ctr,
            r.val_nll
        );
    }
    out
}

/// Train one model per mode from the same initialization seed, data and
/// budget, and summarize each on `val`.
pub fn run_mode_matrix(
    train: &[TokenSequence],
    val: &[TokenSequence],
    codebook: &Codebook,
    model_config: &ArConfig,
    base: &TrainConfig,
    modes: &[Mode],
    init_seed: u64,
    noise_level: f64,
) -> Result<Vec<ModeSummary>> {
    modes
        .iter()
        .map(|&mode| {
            let model = ArTransformer::new(model_config.clone(), DType::F32, init_seed, Some(codebook))?;
            let mut trainer = Trainer::new(model, codebook, TrainConfig { mode, ..base.clone() }, init_seed)?;
            let history = trainer.fit(train, None, &FitOptions::default())?;
            ModeSummary::evaluate(&trainer, &history, val, noise_level, base.seed)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Where `metrics.jsonl` and checkpoints go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// Checkpoint every this many epochs (0 = only never); the final epoch is
    /// always checkpointed when non-zero.
    pub checkpoint_every: usize,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Stop after this many completed epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ar_epoch{epoch:04}.ckpt")
}

/// Highest-epoch AR checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ar_epoch") && n.ends_with(".ckpt")))
        .collect();
    found.sort();
    found.pop()
}
