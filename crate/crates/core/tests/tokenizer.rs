mod common;

use candle_core::{Device, Tensor};
use common::*;
use proptest::prelude::*;
use rear::data::synthetic_shapes;
use rear::vq::{quantize, rasterize, LatentGrid, TokenGrid, Tokenizer, TokenizerConfig};

#[test]
fn quantize_matches_exhaustive_search_on_random_grids() {
    assert_eq!(quantize_mismatches(100), 0);
}

#[test]
fn lookup_is_a_gather() {
    let cb = random_codebook(3, 10, 4);
    let idx = [3u32, 0, 9, 3];
    let got = cb.lookup(&idx).unwrap();
    let table = cb.to_tensor(candle_core::DType::F32).unwrap();
    let ids = Tensor::new(&idx, &Device::Cpu).unwrap();
    let oracle = table.index_select(&ids, 0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(got, oracle);
    assert!(cb.lookup(&[10]).is_err());
}

#[test]
fn nearest_incorrect_matches_brute_force() {
    for s in 0..50u64 {
        let k = 2 + (s as usize % 30);
        let cb = random_codebook(s, k, 1 + s as usize % 6);
        for correct in 0..k {
            let e = cb.entry(correct);
            let cos = |j: usize| {
                let o = cb.entry(j);
                let dot: f64 = e.iter().zip(o).map(|(a, b)| *a as f64 * *b as f64).sum();
                let na: f64 = e.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = o.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let want = (0..k).filter(|&j| j != correct).max_by(|&a, &b| cos(a).partial_cmp(&cos(b)).unwrap().then(b.cmp(&a))).unwrap();
            let got = cb.nearest_incorrect(correct).unwrap();
            assert_ne!(got, correct);
            assert!(got == want || (cos(got) - cos(want)).abs() < 1e-6, "seed {s} token {correct}: {got} vs {want}");
        }
    }
}

fn small_tokenizer() -> Tokenizer {
    Tokenizer::new(TokenizerConfig { image_size: 8, downsample: 2, channels: 8, latent_dim: 4, codebook_size: 16 }, 5).unwrap()
}

#[test]
fn tokenizer_shapes_and_determinism() {
    let tok = small_tokenizer();
    let ds = synthetic_shapes(3, 2, 8, 0).unwrap();
    let grid = tok.tokenize(&ds.images, &ds.labels).unwrap();
    assert_eq!((grid.batch, grid.height, grid.width), (6, 4, 4));
    assert!(grid.indices.iter().all(|&i| i < 16));
    assert_eq!(tok.tokenize(&ds.images, &ds.labels).unwrap(), grid);
    let seqs = rasterize(&grid);
    let img = tok.decode_tokens(&seqs).unwrap();
    assert_eq!((img.batch, img.height, img.width), (6, 8, 8));
    assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn tokenizer_checkpoint_round_trip() {
    let tok = small_tokenizer();
    let back = Tokenizer::from_checkpoint(&rear::data::CheckpointContainer::from_bytes(&tok.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.checksum().unwrap(), tok.checksum().unwrap());
    assert_eq!(back.codebook, tok.codebook);
}

#[test]
fn training_reduces_reconstruction_loss() {
    let ds = synthetic_shapes(4, 16, 8, 1).unwrap();
    let cfg = rear::vq::TokenizerTrainConfig {
        tokenizer: TokenizerConfig { image_size: 8, downsample: 2, channels: 8, latent_dim: 4, codebook_size: 16 },
        epochs: 4,
        batch_size: 16,
        ..Default::default()
    };
    let (_, log) = rear::vq::train_tokenizer(&ds.images, &cfg).unwrap();
    assert!(log.epoch_loss.last().unwrap() < &log.initial_loss, "{log:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn quantized_indices_are_in_range(seed in any::<u64>(), k in 2usize..12) {
        let mut r = rng(seed);
        let cb = random_codebook(seed ^ 7, k, 3);
        let latent = LatentGrid { features: Tensor::from_vec(gaussian(&mut r, 3 * 4), (1, 3, 2, 2), &Device::Cpu).unwrap() };
        let (_, grid) = quantize(&latent, &cb, &[0]).unwrap();
        prop_assert!(grid.indices.iter().all(|&i| (i as usize) < k));
        let back: TokenGrid = rear::vq::de_rasterize(&rasterize(&grid), 2, 2).unwrap();
        prop_assert_eq!(back, grid);
    }
}
