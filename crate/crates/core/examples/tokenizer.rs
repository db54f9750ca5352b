// Train the VQ tokenizer on synthetic shapes and inspect what it learned.
//
// cargo run --release --example tokenizer

use rear::data::{load_checkpoint, save_checkpoint, synthetic_shapes, write_image_grid};
use rear::diagnostics::psnr;
use rear::vq::{codebook_usage, train_tokenizer, Tokenizer, TokenizerConfig, TokenizerTrainConfig};

pub fn run_example() -> rear::Result<()> {
    let out = std::env::temp_dir().join("rear-examples/tokenizer");
    std::fs::create_dir_all(&out)?;
    let data = synthetic_shapes(5, 40, 16, 0)?;
    let cfg = TokenizerTrainConfig {
        tokenizer: TokenizerConfig { image_size: 16, downsample: 2, channels: 16, latent_dim: 8, codebook_size: 32 },
        epochs: 4,
        batch_size: 32,
        ..Default::default()
    };
    let (tok, log) = train_tokenizer(&data.images, &cfg)?;
    println!("loss {:.4} -> {:.4} ({} codebook restarts)", log.initial_loss, log.epoch_loss.last().unwrap(), log.restarts);

    let recon = tok.reconstruct(&data.images)?;
    println!("reconstruction PSNR {:.2} dB, codebook usage {:.0}%", psnr(&data.images, &recon)?, 100.0 * codebook_usage(&tok, &data.images)?);

    // every image becomes an 8x8 grid of indices, read in raster order
    let seqs = tok.tokenize_sequences(&data.images, &data.labels)?;
    println!("first sequence (label {}): {:?}", seqs[0].label, &seqs[0].tokens[..16]);

    let path = out.join("tokenizer.ckpt");
    save_checkpoint(&tok.to_checkpoint()?, &path)?;
    let back = Tokenizer::from_checkpoint(&load_checkpoint(&path)?)?;
    assert_eq!(back.checksum()?, tok.checksum()?);
    write_image_grid(&tok.reconstruct(&data.head(16).images)?, 8, 1, &out.join("recon.png"))?;
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
