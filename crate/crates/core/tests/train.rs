mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use common::*;
use rear::optim::{clip_grad_norm, global_norm};
use rear::train::{latest_checkpoint, lr_at, FitOptions, Mode, StepStats, TrainConfig, Trainer};
use rear::transformer::{ArConfig, ArTransformer};
use rear::vq::{Codebook, TokenSequence};

const K: usize = 12;
const N: usize = 8;

fn setup(mode: Mode, dropout: f64) -> (Trainer, Codebook) {
    let cfg = ArConfig { dropout, ..tiny_config(K, N) };
    let cb = random_codebook(99, K, cfg.codebook_dim);
    let model = ArTransformer::new(cfg, DType::F32, 7, Some(&cb)).unwrap();
    let tc = TrainConfig { epochs: 3, batch_size: 16, peak_lr: 3e-3, mode, seed: 11, ..Default::default() };
    (Trainer::new(model, &cb, tc, 7).unwrap(), cb)
}

fn data(count: usize) -> Vec<TokenSequence> {
    random_sequences(5, count, N, K, 3)
}

fn collect_steps(tr: &mut Trainer, train: &[TokenSequence]) -> Vec<StepStats> {
    let mut steps = Vec::new();
    while tr.epoch < tr.config.epochs {
        tr.run_epoch(train, |s| {
            steps.push(s.clone());
            Ok(())
        })
        .unwrap();
    }
    steps
}

#[test]
fn learning_rate_endpoints_are_exact() {
    let cfg = TrainConfig { peak_lr: 4e-4, final_lr: 1e-5, warmup_fraction: 0.25, ..Default::default() };
    let total = 1000;
    assert_eq!(lr_at(0, total, &cfg), 0.0);
    assert_eq!(lr_at(250, total, &cfg), 4e-4);
    assert_eq!(lr_at(total, total, &cfg), 1e-5);
    assert!(lr_at(125, total, &cfg) < lr_at(250, total, &cfg));
    assert!(lr_at(600, total, &cfg) > lr_at(900, total, &cfg));
}

#[test]
fn clipping_bounds_the_update_norm() {
    let mut r = rng(1);
    for scale in [0.01, 1.0, 50.0] {
        let mut grads: BTreeMap<String, Tensor> = (0..4)
            .map(|i| {
                let v: Vec<f32> = gaussian(&mut r, 10 + i).iter().map(|x| x * scale).collect();
                (format!("p{i}"), Tensor::new(v, &candle_core::Device::Cpu).unwrap())
            })
            .collect();
        let manual: f64 = grads.values().map(|g| to_f64(g).iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let (before, after) = clip_grad_norm(&mut grads, 1.0).unwrap();
        assert!((before - manual).abs() < 1e-4 * manual.max(1.0));
        assert!(after <= 1.0 + 1e-6 && global_norm(&grads).unwrap() <= 1.0 + 1e-6);
        if manual < 1.0 {
            assert!((after - manual).abs() < 1e-9);
        }
    }
    let (mut tr, _) = setup(Mode::Rear, 0.0);
    tr.config.peak_lr = 0.05;
    let steps = collect_steps(&mut tr, &data(64));
    assert!(steps.iter().any(|s| s.grad_norm_raw > 1.0), "clipping never engaged");
    assert!(steps.iter().all(|s| s.grad_norm <= 1.0 + 1e-6));
}

#[test]
fn label_dropout_rate_per_epoch() {
    let (mut tr, _) = setup(Mode::Vanilla, 0.0);
    tr.config.batch_size = 256;
    let train = data(2048);
    for _ in 0..2 {
        let e = tr.run_epoch(&train, |_| Ok(())).unwrap();
        let sigma = (0.1 * 0.9 / e.labels_seen as f64).sqrt();
        assert!((e.label_dropout_rate - 0.1).abs() < 3.0 * sigma, "rate {}", e.label_dropout_rate);
    }
}

#[test]
fn modes_gate_loss_terms() {
    let train = data(48);
    for mode in Mode::ALL {
        let (mut tr, _) = setup(mode, 0.0);
        let steps = collect_steps(&mut tr, &train);
        let reg_zero = steps.iter().all(|s| s.reg_loss == 0.0);
        let eps_zero = steps.iter().all(|s| s.mean_epsilon == 0.0 && s.corrupted_fraction == 0.0);
        assert_eq!(reg_zero, !mode.embed_active(), "{mode:?}");
        assert_eq!(eps_zero, !mode.noise_active(), "{mode:?}");
    }
}

#[test]
fn projection_heads_only_train_with_the_alignment_loss() {
    let train = data(32);
    for (mode, moved) in [(Mode::Vanilla, false), (Mode::NoiseOnly, false), (Mode::EmbedOnly, true)] {
        let (mut tr, _) = setup(mode, 0.0);
        let heads = |m: &ArTransformer| param_bytes(m).into_iter().filter(|(n, _)| n.starts_with(ArTransformer::HEAD_PREFIX)).collect::<Vec<_>>();
        let before = heads(&tr.model);
        collect_steps(&mut tr, &train);
        assert_eq!(heads(&tr.model) != before, moved, "{mode:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let train = data(40);
    let (mut a, _) = setup(Mode::Rear, 0.1);
    let (mut b, _) = setup(Mode::Rear, 0.1);
    assert_eq!(collect_steps(&mut a, &train), collect_steps(&mut b, &train));
    assert_eq!(param_bytes(&a.model), param_bytes(&b.model));
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let train = data(40);
    let dir = tempfile::tempdir().unwrap();
    let (mut full, cb) = setup(Mode::Rear, 0.1);
    full.fit(&train, None, &FitOptions::default()).unwrap();

    let (mut first, _) = setup(Mode::Rear, 0.1);
    let opts = FitOptions { run_dir: Some(dir.path().to_path_buf()), checkpoint_every: 1, stop_after: Some(1), ..Default::default() };
    first.fit(&train, None, &opts).unwrap();
    drop(first);
    let ckpt = latest_checkpoint(dir.path()).unwrap();
    let mut resumed = Trainer::resume(&ckpt, &cb).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.fit(&train, None, &FitOptions { stop_after: None, ..opts }).unwrap();
    assert_eq!(resumed.step, full.step);
    assert_eq!(param_bytes(&resumed.model), param_bytes(&full.model));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count(), 3);
}

#[test]
fn tokenizer_is_frozen_during_ar_training() {
    use rear::vq::{Tokenizer, TokenizerConfig};
    let tok = Tokenizer::new(TokenizerConfig { image_size: 8, downsample: 2, channels: 8, latent_dim: 4, codebook_size: K }, 1).unwrap();
    let before = tok.checksum().unwrap();
    let cfg = ArConfig { codebook_dim: 4, tie_codebook: true, ..tiny_config(K, N) };
    let model = ArTransformer::new(cfg, DType::F32, 2, Some(&tok.codebook)).unwrap();
    let mut tr = Trainer::new(model, &tok.codebook, TrainConfig { epochs: 2, batch_size: 16, ..Default::default() }, 2).unwrap();
    tr.fit(&data(32), None, &FitOptions::default()).unwrap();
    assert_eq!(tok.checksum().unwrap(), before);
    assert!(tr.model.store.names().iter().all(|n| !n.contains("codebook")));
}

#[test]
fn training_lowers_the_loss() {
    let (mut tr, _) = setup(Mode::Vanilla, 0.0);
    tr.config.epochs = 30;
    tr.config.peak_lr = 1e-2;
    // a learnable pattern: every sequence repeats its label
    let train: Vec<TokenSequence> = (0..48).map(|i| TokenSequence { tokens: vec![(i % 3) as u32; N], label: (i % 3) as u32 }).collect();
    let hist = tr.fit(&train, Some(&train), &FitOptions { eval_every: 30, ..Default::default() }).unwrap();
    let (first, last) = (hist[0].ar_loss, hist.last().unwrap().ar_loss);
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(hist.last().unwrap().val_ctr.unwrap() > 0.9);
}
