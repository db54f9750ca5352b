//! Flat `key = value` run configuration.
//!
//! Every key is declared once in [`KEYS`] with its default. Values are layered
//! defaults < config file < command-line overrides, and the merged result is
//! written next to every run's outputs so it can be fed back in unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DataSource;
use crate::error::{config_err, Result};
use crate::regularizers::{NoiseSchedule, RegConfig};
use crate::sampler::{GuidanceSchedule, SampleConfig};
use crate::train::{Mode, TrainConfig};
use crate::transformer::{tap_layers, ArConfig, TapIndexing};
use crate::vq::{TokenizerConfig, TokenizerTrainConfig};

pub struct KeyDef {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal : $help:literal,)*) => {
        pub const KEYS: &[KeyDef] = &[$(KeyDef { name: $name, default: $default, help: $help },)*];
    };
}

keys! {
    "out_dir" = "runs/default" : "directory for every artifact of the run",
    "seed" = "0" : "run seed for training, sampling and diagnostics",
    "data.source" = "synthetic_shapes" : "synthetic_shapes | image_folder | standard_32x32",
    "data.root" = "" : "dataset directory for image_folder and standard_32x32",
    "data.num_classes" = "10" : "classes of the synthetic corpus",
    "data.per_class" = "1000" : "images per class of the synthetic corpus",
    "data.image_size" = "32" : "square image side in pixels",
    "data.split_seed" = "0" : "seed of the train/val split",
    "data.val_fraction" = "0.1" : "fraction of images held out for validation",
    "tokenizer.downsample" = "4" : "spatial reduction factor (power of two)",
    "tokenizer.channels" = "32" : "convolution width",
    "tokenizer.latent_dim" = "16" : "codebook vector dimension",
    "tokenizer.codebook_size" = "256" : "number of codebook entries K",
    "tokenizer.epochs" = "10" : "tokenizer training epochs",
    "tokenizer.batch_size" = "64" : "tokenizer batch size",
    "tokenizer.lr" = "2e-3" : "tokenizer learning rate",
    "tokenizer.commitment" = "0.25" : "commitment loss weight",
    "tokenizer.ema_decay" = "0.99" : "codebook EMA decay",
    "tokenizer.restart_after" = "8" : "steps without use before a codebook entry is re-seeded",
    "model.num_layers" = "8" : "transformer blocks L",
    "model.hidden_dim" = "256" : "hidden width d",
    "model.num_heads" = "8" : "attention heads",
    "model.mlp_ratio" = "4" : "MLP width as a multiple of d",
    "model.dropout" = "0.1" : "dropout probability during training",
    "model.head_hidden" = "2048" : "hidden width of the projection heads",
    "model.tap_shallow" = "auto" : "block whose output is aligned with the current token (auto = 0)",
    "model.tap_deep" = "auto" : "block whose output is aligned with the next token (auto = round(3L/4))",
    "model.tap_indexing" = "post_block" : "post_block | pre_block",
    "model.tie_codebook" = "false" : "share the codebook for token input and output",
    "train.mode" = "rear" : "vanilla | noise_only | embed_only | rear; also selects the model for sample and diagnose",
    "train.epochs" = "100" : "AR training epochs",
    "train.batch_size" = "256" : "AR batch size",
    "train.peak_lr" = "3e-4" : "learning rate at the end of warm-up",
    "train.final_lr" = "1e-5" : "learning rate at the last step",
    "train.warmup_fraction" = "0.25" : "fraction of steps spent warming up",
    "train.beta1" = "0.9" : "AdamW beta1",
    "train.beta2" = "0.96" : "AdamW beta2",
    "train.weight_decay" = "0.03" : "AdamW decoupled weight decay",
    "train.grad_clip_norm" = "1.0" : "global gradient-norm clip",
    "train.label_dropout" = "0.1" : "probability of replacing a label by the null class",
    "train.noise" = "annealed_truncated" : "fixed | uniform_range | annealed_linear | annealed_truncated",
    "train.noise_zero_at" = "0.75" : "progress at which the truncated schedule reaches zero",
    "train.noise_epsilon" = "0.1" : "corruption level of the fixed schedule",
    "train.noise_max_level" = "0.5" : "upper bound of the uniform_range schedule",
    "train.lambda" = "1.0" : "weight of the embedding-alignment loss",
    "train.checkpoint_every" = "10" : "epochs between checkpoints",
    "train.eval_every" = "10" : "epochs between validation passes",
    "sample.guidance_scale" = "4.0" : "classifier-free guidance scale s",
    "sample.guidance_power" = "2.0" : "exponent p of the power-cosine ramp",
    "sample.constant_scale" = "false" : "use s at every step instead of the ramp",
    "sample.batch_size" = "64" : "sequences decoded together",
    "sample.count" = "64" : "images to sample",
    "sample.columns" = "8" : "columns of the sample grid",
    "diagnose.experiment" = "ctr" : "ctr | exposure_bias | embedding_replacement | cka | robustness | throughput",
    "diagnose.r" = "0.25,0.5,0.75" : "ratio grid r (or r' for embedding_replacement)",
    "diagnose.seeds" = "3" : "number of seeds, starting at 0",
    "diagnose.images" = "100" : "validation images used per experiment",
    "diagnose.noise_level" = "0.1" : "context noise of the robustness report",
    "diagnose.max_positions" = "2000" : "positions sampled for CKA",
    "diagnose.throughput_runs" = "3" : "timed runs per backend",
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

fn parse_line(line: &str) -> Option<Result<(String, String)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(config_err!("expected key=value, got {line:?}")),
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(config_err!("unknown config key {key:?}")),
        }
    }

    /// Apply `key=value` assignments, one per line; `#` starts a comment.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for entry in text.lines().filter_map(parse_line) {
            let (k, v) = entry?;
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read config file {}: {e}", path.display()))?;
        self.merge_str(&text)
    }

    /// Apply one `key=value` override.
    pub fn merge_assignment(&mut self, assignment: &str) -> Result<()> {
        match parse_line(assignment) {
            Some(r) => {
                let (k, v) = r?;
                self.set(&k, &v)
            }
            None => Err(config_err!("empty override")),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} is not registered"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>().map_err(|e| config_err!("invalid value {raw:?} for {key}: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<T>().map_err(|e| config_err!("invalid list item {s:?} for {key}: {e}")))
            .collect()
    }

    /// Sorted `key = value` lines; loading them reproduces this config.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let root = || -> Result<PathBuf> {
            let r = self.raw("data.root");
            if r.is_empty() {
                return Err(config_err!("data.root is required for data.source={}", self.raw("data.source")));
            }
            Ok(PathBuf::from(r))
        };
        Ok(match self.raw("data.source") {
            "synthetic_shapes" => DataSource::SyntheticShapes {
                num_classes: self.get("data.num_classes")?,
                per_class: self.get("data.per_class")?,
                seed: self.get("data.split_seed")?,
            },
            "image_folder" => DataSource::ImageFolder { root: root()? },
            "standard_32x32" => DataSource::Standard32x32 { root: root()? },
            other => return Err(config_err!("invalid value {other:?} for data.source")),
        })
    }

    pub fn tokenizer_config(&self) -> Result<TokenizerConfig> {
        let c = TokenizerConfig {
            image_size: self.get("data.image_size")?,
            downsample: self.get("tokenizer.downsample")?,
            channels: self.get("tokenizer.channels")?,
            latent_dim: self.get("tokenizer.latent_dim")?,
            codebook_size: self.get("tokenizer.codebook_size")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn tokenizer_train_config(&self) -> Result<TokenizerTrainConfig> {
        Ok(TokenizerTrainConfig {
            tokenizer: self.tokenizer_config()?,
            epochs: self.get("tokenizer.epochs")?,
            batch_size: self.get("tokenizer.batch_size")?,
            lr: self.get("tokenizer.lr")?,
            commitment: self.get("tokenizer.commitment")?,
            ema_decay: self.get("tokenizer.ema_decay")?,
            restart_after: self.get("tokenizer.restart_after")?,
            seed: self.get("seed")?,
        })
    }

    /// Model configuration for a tokenizer producing `seq_len` tokens from
    /// `vocab_size` entries of dimension `codebook_dim`.
    pub fn ar_config(&self, vocab_size: usize, seq_len: usize, codebook_dim: usize, num_classes: usize) -> Result<ArConfig> {
        let layers: usize = self.get("model.num_layers")?;
        let (auto_s, auto_d) = tap_layers(layers);
        let tap = |key: &str, auto: usize| -> Result<usize> {
            if self.raw(key) == "auto" {
                Ok(auto)
            } else {
                self.get(key)
            }
        };
        let c = ArConfig {
            num_layers: layers,
            hidden_dim: self.get("model.hidden_dim")?,
            num_heads: self.get("model.num_heads")?,
            vocab_size,
            seq_len,
            num_classes,
            dropout: self.get("model.dropout")?,
            tap_shallow: tap("model.tap_shallow", auto_s)?,
            tap_deep: tap("model.tap_deep", auto_d)?,
            tap_indexing: match self.raw("model.tap_indexing") {
                "post_block" => TapIndexing::PostBlock,
                "pre_block" => TapIndexing::PreBlock,
                other => return Err(config_err!("invalid value {other:?} for model.tap_indexing")),
            },
            mlp_ratio: self.get("model.mlp_ratio")?,
            head_hidden: self.get("model.head_hidden")?,
            codebook_dim,
            tie_codebook: self.get("model.tie_codebook")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = match self.raw("train.noise") {
            "fixed" => NoiseSchedule::Fixed { epsilon: self.get("train.noise_epsilon")? },
            "uniform_range" => NoiseSchedule::UniformRange { max_level: self.get("train.noise_max_level")? },
            "annealed_linear" => NoiseSchedule::AnnealedLinear,
            "annealed_truncated" => NoiseSchedule::AnnealedTruncated { zero_at: self.get("train.noise_zero_at")? },
            other => return Err(config_err!("invalid value {other:?} for train.noise")),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            peak_lr: self.get("train.peak_lr")?,
            final_lr: self.get("train.final_lr")?,
            warmup_fraction: self.get("train.warmup_fraction")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            weight_decay: self.get("train.weight_decay")?,
            grad_clip_norm: self.get("train.grad_clip_norm")?,
            label_dropout: self.get("train.label_dropout")?,
            mode: self.get::<Mode>("train.mode")?,
            noise: self.noise_schedule()?,
            reg: RegConfig { lambda: self.get("train.lambda")? },
            seed: self.get("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        let c = SampleConfig {
            guidance_scale: self.get("sample.guidance_scale")?,
            guidance_power: self.get("sample.guidance_power")?,
            schedule: if self.get::<bool>("sample.constant_scale")? { GuidanceSchedule::Constant } else { GuidanceSchedule::PowerCosine },
            seed: self.get("seed")?,
            batch_size: self.get("sample.batch_size")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Check that every typed view parses.
    pub fn validate(&self) -> Result<()> {
        self.data_source()?;
        self.tokenizer_train_config()?;
        let tok = self.tokenizer_config()?;
        self.ar_config(tok.codebook_size, tok.seq_len(), tok.latent_dim, 10)?;
        self.train_config()?;
        self.sample_config()?;
        self.list::<f64>("diagnose.r")?;
        for k in ["diagnose.seeds", "diagnose.images", "diagnose.max_positions", "diagnose.throughput_runs", "sample.count", "sample.columns"] {
            self.get::<usize>(k)?;
        }
        self.get::<f64>("diagnose.noise_level")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        let mut c = RunConfig::default();
        assert_eq!(c.raw("train.mode"), "rear");
        c.merge_str("train.mode = vanilla # comment\n\nseed=3\n").unwrap();
        c.merge_assignment("seed=9").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 9);
        assert_eq!(c.train_config().unwrap().mode, Mode::Vanilla);
        let err = c.merge_assignment("train.modee=rear").unwrap_err();
        assert!(err.to_string().contains("train.modee"));
        let mut back = RunConfig::default();
        back.merge_str(&c.snapshot()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.set("train.peak_lr", "fast").unwrap();
        assert!(c.train_config().unwrap_err().to_string().contains("train.peak_lr"));
    }
}
