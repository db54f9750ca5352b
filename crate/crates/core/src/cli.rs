//! The `rear` command-line front end.
//!
//! Commands communicate only through files under `out_dir`:
//!
//! ```text
//! tokenizer.ckpt            tokenizer-train
//! tokens_{train,val}.bin    tokenize
//! ar_<mode>/                ar-train (metrics.jsonl, ar_epochNNNN.ckpt)
//! samples_<mode>/           sample (samples.bin, samples.png)
//! diagnostics/              diagnose (<experiment>_<mode>.json / .csv)
//! report.{md,json}          report
//! <command>.config.txt      effective configuration of each command
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{RunConfig, KEYS};
use crate::data::{
    build_token_cache, ingest_dataset, load_checkpoint, load_token_cache, save_checkpoint, save_token_cache, write_image_grid, write_report,
    DiagnosticsReport, Record, Split, TokenCache,
};
use crate::diagnostics::{
    embedding_replacement_experiment, exposure_bias_experiment, layer_similarity_profile, psnr, robustness_report, teacher_forced,
};
use crate::error::{Error, Result};
use crate::sampler::{sample, throughput_report};
use crate::train::{comparison_markdown, latest_checkpoint, EpochStats, FitOptions, Mode, ModeSummary, Trainer};
use crate::transformer::ArTransformer;
use crate::vq::{codebook_usage, train_tokenizer, ImageBatch, TokenSequence, Tokenizer};

const TOKENIZER_FILE: &str = "tokenizer.ckpt";

#[derive(Debug, Parser)]
#[command(name = "rear", version, about = "Token-level AR image generation lab: tokenizer, generator, regularizers and diagnostics")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated. Applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModeArg {
    /// vanilla | noise_only | embed_only | rear (key train.mode).
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the image tokenizer and write tokenizer.ckpt.
    TokenizerTrain,
    /// Tokenize the train and validation splits into token caches.
    Tokenize,
    /// Train an AR model in the chosen mode.
    ArTrain {
        #[command(flatten)]
        mode: ModeArg,
        /// Continue from the latest checkpoint of this mode, if any.
        #[arg(long)]
        resume: bool,
    },
    /// Sample images from a trained AR model.
    Sample {
        #[command(flatten)]
        mode: ModeArg,
        #[arg(long)]
        guidance_scale: Option<f64>,
        #[arg(long)]
        guidance_power: Option<f64>,
        /// Use the guidance scale at every step instead of the ramp.
        #[arg(long)]
        constant_scale: bool,
        /// Number of images (key sample.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run one diagnostic experiment on a trained model.
    Diagnose {
        #[command(flatten)]
        mode: ModeArg,
        /// ctr | exposure_bias | embedding_replacement | cka | robustness | throughput
        #[arg(long)]
        experiment: Option<String>,
        /// Comma-separated ratio grid (key diagnose.r).
        #[arg(long = "r")]
        ratios: Option<String>,
        /// Number of seeds (key diagnose.seeds).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Compare every trained mode on the validation split.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TokenizerTrain => "tokenizer-train",
            Command::Tokenize => "tokenize",
            Command::ArTrain { .. } => "ar-train",
            Command::Sample { .. } => "sample",
            Command::Diagnose { .. } => "diagnose",
            Command::Report => "report",
        }
    }
}

fn keys_help() -> String {
    let mut s = String::from("Configuration keys (key = default):\n");
    for k in KEYS {
        s += &format!("  {:<26} {:<20} {}\n", k.name, k.default, k.help);
    }
    s + "\nExit codes: 0 success, 1 usage, 2 runtime, 3 integrity."
}

/// Merge defaults, the config file and command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for o in &cli.overrides {
        cfg.merge_assignment(o)?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let mode = match &cli.command {
        Command::ArTrain { mode, .. } | Command::Sample { mode, .. } | Command::Diagnose { mode, .. } => mode.mode.as_deref(),
        _ => None,
    };
    if let Some(m) = mode {
        cfg.set("train.mode", m)?;
    }
    match &cli.command {
        Command::Sample { guidance_scale, guidance_power, constant_scale, count, .. } => {
            if let Some(s) = guidance_scale {
                cfg.set("sample.guidance_scale", &s.to_string())?;
            }
            if let Some(p) = guidance_power {
                cfg.set("sample.guidance_power", &p.to_string())?;
            }
            if *constant_scale {
                cfg.set("sample.constant_scale", "true")?;
            }
            if let Some(c) = count {
                cfg.set("sample.count", &c.to_string())?;
            }
        }
        Command::Diagnose { experiment, ratios, seeds, .. } => {
            if let Some(e) = experiment {
                cfg.set("diagnose.experiment", e)?;
            }
            if let Some(r) = ratios {
                cfg.set("diagnose.r", r)?;
            }
            if let Some(n) = seeds {
                cfg.set("diagnose.seeds", &n.to_string())?;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parse `args` (including the program name), run the command and return the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().after_long_help(keys_help()).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(format!("{}.config.txt", cli.command.name())), cfg.snapshot())?;
    match &cli.command {
        Command::TokenizerTrain => cmd_tokenizer_train(&cfg),
        Command::Tokenize => cmd_tokenize(&cfg),
        Command::ArTrain { resume, .. } => cmd_ar_train(&cfg, *resume),
        Command::Sample { .. } => cmd_sample(&cfg),
        Command::Diagnose { .. } => cmd_diagnose(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

fn load_split(cfg: &RunConfig) -> Result<Split> {
    ingest_dataset(&cfg.data_source()?, cfg.get("data.image_size")?, cfg.get("data.split_seed")?, cfg.get("data.val_fraction")?)
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), hint: format!("run `rear {producer}` first") })
    }
}

fn load_tokenizer(out: &Path) -> Result<Tokenizer> {
    let path = out.join(TOKENIZER_FILE);
    require(&path, "tokenizer-train")?;
    Tokenizer::from_checkpoint(&load_checkpoint(&path)?)
}

fn cache_path(out: &Path, split: &str) -> PathBuf {
    out.join(format!("tokens_{split}.bin"))
}

fn load_tokens(out: &Path, tok: &Tokenizer, split: &str) -> Result<TokenCache> {
    let path = cache_path(out, split);
    require(&path, "tokenize")?;
    load_token_cache(&path, Some(&tok.checksum()?))
}

fn run_dir(out: &Path, mode: Mode) -> PathBuf {
    out.join(format!("ar_{}", mode.name()))
}

fn load_trainer(out: &Path, mode: Mode, tok: &Tokenizer) -> Result<Trainer> {
    let dir = run_dir(out, mode);
    let path = latest_checkpoint(&dir).ok_or_else(|| Error::MissingArtifact {
        path: dir.clone(),
        hint: format!("no AR checkpoint; run `rear ar-train --mode {}` first", mode.name()),
    })?;
    Trainer::resume(&path, &tok.codebook)
}

fn cmd_tokenizer_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    let split = load_split(cfg)?;
    let tcfg = cfg.tokenizer_train_config()?;
    let (tok, log) = train_tokenizer(&split.train.images, &tcfg)?;
    save_checkpoint(&tok.to_checkpoint()?, &out.join(TOKENIZER_FILE))?;
    let n = split.val.len().min(16);
    let idx: Vec<usize> = (0..n).collect();
    let originals = split.val.images.select(&idx);
    let recon = tok.reconstruct(&originals)?;
    write_image_grid(&ImageBatch::concat(&[originals.clone(), recon.clone()])?, n.max(1), 1, &out.join("tokenizer_recon.png"))?;
    let summary = serde_json::json!({
        "val_psnr": psnr(&originals, &recon)?,
        "codebook_usage": codebook_usage(&tok, &split.train.images)?,
        "checksum": crate::data::hex(&tok.checksum()?),
        "log": log,
    });
    std::fs::write(out.join("tokenizer_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_tokenize(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    let tok = load_tokenizer(&out)?;
    let split = load_split(cfg)?;
    for (name, ds) in [("train", &split.train), ("val", &split.val)] {
        let cache = build_token_cache(ds, &tok)?;
        save_token_cache(&cache, &cache_path(&out, name))?;
        println!("{name}: {} sequences of {} tokens", cache.sequences.len(), cache.height * cache.width);
    }
    Ok(())
}

fn cmd_ar_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let out = cfg.out_dir();
    let tok = load_tokenizer(&out)?;
    let train = load_tokens(&out, &tok, "train")?;
    let val = load_tokens(&out, &tok, "val")?;
    let tcfg = cfg.train_config()?;
    let dir = run_dir(&out, tcfg.mode);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.snapshot())?;
    let seed: u64 = cfg.get("seed")?;
    let mut trainer = match latest_checkpoint(&dir) {
        Some(path) if resume => Trainer::resume(&path, &tok.codebook)?,
        _ => {
            let acfg = cfg.ar_config(tok.config.codebook_size, tok.config.seq_len(), tok.config.latent_dim, train.num_classes)?;
            let model = ArTransformer::new(acfg, candle_core::DType::F32, seed, Some(&tok.codebook))?;
            Trainer::new(model, &tok.codebook, tcfg, seed)?
        }
    };
    let options = FitOptions {
        run_dir: Some(dir),
        checkpoint_every: cfg.get("train.checkpoint_every")?,
        eval_every: cfg.get("train.eval_every")?,
        stop_after: None,
    };
    let history = trainer.fit(&train.sequences, Some(&val.sequences), &options)?;
    if let Some(last) = history.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    let tok = load_tokenizer(&out)?;
    let mode: Mode = cfg.get("train.mode")?;
    let trainer = load_trainer(&out, mode, &tok)?;
    let count: usize = cfg.get("sample.count")?;
    let classes = trainer.model.config.num_classes;
    let labels: Vec<u32> = (0..count).map(|i| (i % classes) as u32).collect();
    let seqs = sample(&trainer.model, &labels, &cfg.sample_config()?)?;
    let images = tok.decode_tokens(&seqs)?;
    let dir = out.join(format!("samples_{}", mode.name()));
    std::fs::create_dir_all(&dir)?;
    let grid = tok.config.grid_size();
    let cache = TokenCache {
        vocab_size: tok.config.codebook_size,
        height: grid,
        width: grid,
        num_classes: classes,
        tokenizer_checksum: tok.checksum()?,
        sequences: seqs,
    };
    save_token_cache(&cache, &dir.join("samples.bin"))?;
    write_image_grid(&images, cfg.get("sample.columns")?, 2, &dir.join("samples.png"))?;
    std::fs::write(dir.join("config.txt"), cfg.snapshot())?;
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    let tok = load_tokenizer(&out)?;
    let mode: Mode = cfg.get("train.mode")?;
    let trainer = load_trainer(&out, mode, &tok)?;
    let model = &trainer.model;
    let val = load_tokens(&out, &tok, "val")?;
    let images: usize = cfg.get("diagnose.images")?;
    let gt: Vec<TokenSequence> = val.sequences.iter().take(images).cloned().collect();
    let seeds: Vec<u64> = (0..cfg.get::<u64>("diagnose.seeds")?).collect();
    let ratios: Vec<f64> = cfg.list("diagnose.r")?;
    let experiment = cfg.raw("diagnose.experiment").to_string();
    let dir = out.join("diagnostics");
    std::fs::create_dir_all(&dir)?;
    let report = match experiment.as_str() {
        "ctr" => {
            let tf = teacher_forced(model, &gt, 128)?;
            let mut r = DiagnosticsReport::new("ctr");
            r.push(Record {
                condition: "val".into(),
                protocol: None,
                ratio: None,
                seed: cfg.get("seed")?,
                samples: gt.len(),
                metrics: [("ctr".to_string(), tf.mean_ctr()), ("perplexity".to_string(), tf.perplexity()), ("nll".to_string(), tf.nll())]
                    .into_iter()
                    .collect(),
            });
            r.summarize();
            r
        }
        "exposure_bias" => exposure_bias_experiment(model, &tok, &gt, &ratios, &seeds, &cfg.sample_config()?)?,
        "embedding_replacement" => embedding_replacement_experiment(model, &tok, &gt, &ratios, &seeds)?,
        "cka" => {
            let p = layer_similarity_profile(model, &tok, &gt, cfg.get("diagnose.max_positions")?, mode.name())?;
            std::fs::write(dir.join(format!("cka_profile_{}.json", mode.name())), serde_json::to_string_pretty(&p)?)?;
            let mut r = DiagnosticsReport::new("cka");
            for (l, (e, d)) in p.encoded.iter().zip(&p.decoded).enumerate() {
                r.push(Record {
                    condition: format!("layer={l:02}"),
                    protocol: None,
                    ratio: None,
                    seed: 0,
                    samples: p.positions,
                    metrics: [("cka_encoded".to_string(), *e), ("cka_decoded".to_string(), *d)].into_iter().collect(),
                });
            }
            r.summarize();
            r
        }
        "robustness" => {
            let train = load_tokens(&out, &tok, "train")?;
            let sub: Vec<TokenSequence> = train.sequences.iter().take(images).cloned().collect();
            robustness_report(model, &sub, &gt, cfg.get("diagnose.noise_level")?, cfg.get("seed")?)?
        }
        "throughput" => {
            let sc = cfg.sample_config()?;
            let t = throughput_report(model, sc.batch_size, &sc, cfg.get("diagnose.throughput_runs")?)?;
            std::fs::write(dir.join(format!("throughput_{}.json", mode.name())), serde_json::to_string_pretty(&t)?)?;
            let mut r = DiagnosticsReport::new("throughput");
            for (name, tp) in [("kv_cache", &t.cached), ("recompute", &t.recompute)] {
                r.push(Record {
                    condition: name.into(),
                    protocol: Some(t.hardware.clone()),
                    ratio: None,
                    seed: sc.seed,
                    samples: t.batch_size,
                    metrics: [
                        ("images_per_sec".to_string(), tp.images_per_sec),
                        ("tokens_per_sec".to_string(), tp.tokens_per_sec),
                        ("median_seconds".to_string(), tp.median_seconds),
                    ]
                    .into_iter()
                    .collect(),
                });
            }
            r.summarize();
            r
        }
        other => return Err(crate::error::config_err!("invalid value {other:?} for diagnose.experiment")),
    };
    let path = dir.join(format!("{experiment}_{}.json", mode.name()));
    write_report(&report, &path)?;
    println!("wrote {} ({} records)", path.display(), report.records.len());
    Ok(())
}

fn epoch_history(dir: &Path, up_to: usize) -> Result<Vec<EpochStats>> {
    let path = dir.join("metrics.jsonl");
    let mut by_epoch = std::collections::BTreeMap::new();
    if let Ok(text) = std::fs::read_to_string(&path) {
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v["kind"] == "epoch" {
                let e: EpochStats = serde_json::from_value(v)?;
                if e.epoch <= up_to {
                    by_epoch.insert(e.epoch, e);
                }
            }
        }
    }
    Ok(by_epoch.into_values().collect())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    let tok = load_tokenizer(&out)?;
    let val = load_tokens(&out, &tok, "val")?;
    let noise: f64 = cfg.get("diagnose.noise_level")?;
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        if latest_checkpoint(&run_dir(&out, mode)).is_none() {
            continue;
        }
        let trainer = load_trainer(&out, mode, &tok)?;
        let history = epoch_history(&run_dir(&out, mode), trainer.epoch)?;
        rows.push(ModeSummary::evaluate(&trainer, &history, &val.sequences, noise, cfg.get("seed")?)?);
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact { path: out.clone(), hint: "no trained models; run `rear ar-train --mode <mode>` first".into() });
    }
    let table = comparison_markdown(&rows);
    std::fs::write(out.join("report.md"), &table)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{table}");
    Ok(())
}
