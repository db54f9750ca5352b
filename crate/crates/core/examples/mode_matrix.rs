// Train the four ablation modes from one initialization and compare them.
//
// cargo run --release --example mode_matrix

use rear::data::synthetic_shapes;
use rear::train::{comparison_markdown, run_mode_matrix, Mode, TrainConfig};
use rear::transformer::ArConfig;
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
    let base = TrainConfig { epochs: 4, batch_size: 16, peak_lr: 2e-3, ..Default::default() };
    let rows = run_mode_matrix(train, val, &tok.codebook, &model_cfg, &base, &Mode::ALL, 0, 0.1)?;
    print!("{}", comparison_markdown(&rows));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
