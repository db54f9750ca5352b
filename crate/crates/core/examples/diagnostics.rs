// The diagnostic experiments on one small model: decoding with partial
// ground-truth context, nearest-embedding replacement, layer-wise CKA
// against the codebook, and robustness to noisy contexts.
//
// cargo run --release --example diagnostics

use candle_core::DType;
use rear::data::synthetic_shapes;
use rear::diagnostics::{embedding_replacement_experiment, exposure_bias_experiment, layer_similarity_profile, robustness_report};
use rear::sampler::SampleConfig;
use rear::train::{FitOptions, Mode, TrainConfig, Trainer};
use rear::transformer::{ArConfig, ArTransformer};
use rear::vq::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

pub fn run_example() -> rear::Result<()> {
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
    let model_cfg = ArConfig { num_layers: 2, hidden_dim: 32, num_heads: 4, vocab_size: 32, seq_len: 64, num_classes: 4, head_hidden: 32, tap_deep: 1, codebook_dim: 8, ..Default::default() };
    let model = ArTransformer::new(model_cfg, DType::F32, 0, Some(&tok.codebook))?;
    let mut trainer = Trainer::new(model, &tok.codebook, TrainConfig { epochs: 6, batch_size: 16, peak_lr: 2e-3, mode: Mode::Vanilla, ..Default::default() }, 0)?;
    trainer.fit(train, None, &FitOptions::default())?;
    let model = &trainer.model;

    let sampling = SampleConfig { guidance_scale: 1.0, ..Default::default() };
    let exposure = exposure_bias_experiment(model, &tok, val, &[0.25, 0.5], &[0, 1], &sampling)?;
    for c in &exposure.conditions {
        println!("{c:<24} ctr {:.3} perceptual {:.4}", exposure.mean(c, "ctr").unwrap(), exposure.mean(c, "perceptual").unwrap());
    }

    let replacement = embedding_replacement_experiment(model, &tok, val, &[0.0, 0.3, 0.6], &[0, 1])?;
    for c in &replacement.conditions {
        println!(
            "{c:<24} ctr {:.3} embedding similarity {:.3} perceptual {:.4}",
            replacement.mean(c, "ctr").unwrap(),
            replacement.mean(c, "embedding_similarity").unwrap(),
            replacement.mean(c, "perceptual").unwrap()
        );
    }

    let profile = layer_similarity_profile(model, &tok, val, 500, "vanilla")?;
    println!("CKA with the fed token per layer:       {:.3?}", profile.encoded);
    println!("CKA with the predicted token per layer: {:.3?}", profile.decoded);

    let robust = robustness_report(model, &train[..16], val, 0.1, 0)?;
    for c in &robust.conditions {
        println!("{c:<12} ctr {:.3} nll {:.3}", robust.mean(c, "ctr").unwrap(), robust.mean(c, "nll").unwrap());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
