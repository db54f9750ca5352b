// Class-conditional sampling with classifier-free guidance, and decoding
// throughput with and without the KV cache.
//
// cargo run --release --example sampling

use candle_core::DType;
use rear::data::{synthetic_shapes, write_image_grid};
use rear::sampler::{cfg_scale_at, sample, throughput_report, GuidanceSchedule, SampleConfig};
use rear::train::{FitOptions, Mode, TrainConfig, Trainer};
use rear::transformer::{ArConfig, ArTransformer};
use rear::vq::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

pub fn run_example() -> rear::Result<()> {
    let out = std::env::temp_dir().join("rear-examples/sampling");
    std::fs::create_dir_all(&out)?;
    let data = synthetic_shapes(4, 40, 16, 0)?;
    let tcfg = TokenizerTrainConfig {
        tokenizer: TokenizerConfig { image_size: 16, downsample: 2, channels: 16, latent_dim: 8, codebook_size: 32 },
        epochs: 4,
        batch_size: 32,
        ..Default::default()
    };
    let (tok, _) = train_tokenizer(&data.images, &tcfg)?;
    let seqs = tok.tokenize_sequences(&data.images, &data.labels)?;
    let model_cfg = ArConfig { num_layers: 2, hidden_dim: 32, num_heads: 4, vocab_size: 32, seq_len: 64, num_classes: 4, head_hidden: 32, tap_deep: 1, codebook_dim: 8, ..Default::default() };
    let model = ArTransformer::new(model_cfg, DType::F32, 0, Some(&tok.codebook))?;
    let mut trainer = Trainer::new(model, &tok.codebook, TrainConfig { epochs: 6, batch_size: 16, peak_lr: 2e-3, mode: Mode::Rear, ..Default::default() }, 0)?;
    trainer.fit(&seqs, None, &FitOptions::default())?;

    // the guidance ramp starts near 1 and reaches s at the last position
    let ramp: Vec<String> = [0, 16, 32, 48, 63].iter().map(|&i| format!("{:.2}", cfg_scale_at(i, 64, 4.0, 2.0))).collect();
    println!("guidance at steps 0, 16, 32, 48, 63: {}", ramp.join(" "));

    let labels: Vec<u32> = (0..16).map(|i| i % 4).collect();
    for (name, schedule) in [("ramp", GuidanceSchedule::PowerCosine), ("constant", GuidanceSchedule::Constant)] {
        let cfg = SampleConfig { guidance_scale: 4.0, schedule, seed: 1, ..Default::default() };
        let seqs = sample(&trainer.model, &labels, &cfg)?;
        write_image_grid(&tok.decode_tokens(&seqs)?, 4, 1, &out.join(format!("samples_{name}.png")))?;
    }

    let report = throughput_report(&trainer.model, 16, &SampleConfig::default(), 3)?;
    println!(
        "{} images/s with the KV cache, {} images/s recomputing ({})",
        report.cached.images_per_sec.round(),
        report.recompute.images_per_sec.round(),
        report.hardware
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
