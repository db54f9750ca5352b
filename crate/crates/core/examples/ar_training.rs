// Train the autoregressive model with noisy contexts and the embedding
// alignment loss, then pick the run back up from its last checkpoint.
//
// cargo run --release --example ar_training

use candle_core::DType;
use rear::data::synthetic_shapes;
use rear::regularizers::NoiseSchedule;
use rear::train::{latest_checkpoint, FitOptions, Mode, TrainConfig, Trainer};
use rear::transformer::{count_parameters, ArConfig, ArTransformer};
use rear::vq::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

pub fn run_example() -> rear::Result<()> {
    let out = std::env::temp_dir().join("rear-examples/ar_training");
    let _ = std::fs::remove_dir_all(&out);
    let data = synthetic_shapes(4, 40, 16, 0)?;
    let tcfg = TokenizerTrainConfig {
        tokenizer: TokenizerConfig { image_size: 16, downsample: 2, channels: 16, latent_dim: 8, codebook_size: 32 },
        epochs: 4,
        batch_size: 32,
        ..Default::default()
    };
    let (tok, _) = train_tokenizer(&data.images, &tcfg)?;
    let seqs = tok.tokenize_sequences(&data.images, &data.labels)?;
    let (train, val) = seqs.split_at(128);

    let model_cfg = ArConfig {
        num_layers: 4,
        hidden_dim: 32,
        num_heads: 4,
        vocab_size: 32,
        seq_len: 64,
        num_classes: 4,
        head_hidden: 64,
        tap_deep: 3,
        codebook_dim: 8,
        ..Default::default()
    };
    let n = count_parameters(&model_cfg);
    println!("{} backbone parameters, {} in the projection heads", n.backbone, n.heads);

    let cfg = TrainConfig { epochs: 8, batch_size: 16, peak_lr: 2e-3, mode: Mode::Rear, seed: 3, ..Default::default() };
    // the noise cap falls linearly and reaches zero three quarters of the way in
    let cap = NoiseSchedule::default();
    for e in 0..cfg.epochs {
        print!("{:.2} ", cap.value(e as f64 / cfg.epochs as f64)?);
    }
    println!("<- per-epoch noise cap");

    let model = ArTransformer::new(model_cfg, DType::F32, 3, Some(&tok.codebook))?;
    let mut trainer = Trainer::new(model, &tok.codebook, cfg, 3)?;
    let opts = FitOptions { run_dir: Some(out.clone()), checkpoint_every: 2, eval_every: 2, stop_after: Some(5) };
    for e in trainer.fit(train, Some(val), &opts)? {
        println!(
            "epoch {} ar {:.3} reg {:.3} max eps {:.2} val ctr {}",
            e.epoch,
            e.ar_loss,
            e.reg_loss,
            e.max_epsilon,
            e.val_ctr.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }

    // simulate an interruption after epoch 5: resume from the newest checkpoint
    let ckpt = latest_checkpoint(&out).expect("a checkpoint was written");
    let mut resumed = Trainer::resume(&ckpt, &tok.codebook)?;
    println!("resuming from {} at epoch {}", ckpt.display(), resumed.epoch);
    let rest = resumed.fit(train, Some(val), &FitOptions { stop_after: None, ..opts })?;
    println!("finished at epoch {} after {} optimizer steps", rest.last().map_or(resumed.epoch, |e| e.epoch), resumed.step);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
