mod common;

use candle_core::DType;
use common::*;
use proptest::prelude::*;
use rear::rng::stream;
use rear::sampler::{
    cfg_scale_at, decode_with_context_mask, front_loaded_mask, generate, guided_logits, interleaved_mask, sample, sample_from_logits, Backend,
    GuidanceSchedule, SampleConfig,
};

const K: usize = 9;
const N: usize = 10;

fn cfg(scale: f64, seed: u64) -> SampleConfig {
    SampleConfig { guidance_scale: scale, seed, batch_size: 4, ..Default::default() }
}

#[test]
fn cache_and_recompute_agree() {
    let (m, _) = tiny_model(K, N, DType::F64, 1);
    for scale in [1.0, 4.0] {
        let (same, rel) = compare_backends(&m, &[0, 1, 2, 0, 1, 2, 3], &cfg(scale, 3));
        assert!(same, "tokens differ at scale {scale}");
        assert!(rel < 1e-9, "logits differ by {rel}");
    }
}

#[test]
fn sampling_is_deterministic_and_chunk_independent() {
    let (m, _) = tiny_model(K, N, DType::F32, 2);
    let labels = [0, 1, 2, 1, 0, 2, 2];
    let a = sample(&m, &labels, &cfg(3.0, 5)).unwrap();
    assert_eq!(a, sample(&m, &labels, &cfg(3.0, 5)).unwrap());
    let big = SampleConfig { batch_size: 64, ..cfg(3.0, 5) };
    assert_eq!(a, sample(&m, &labels, &big).unwrap());
    assert_ne!(a, sample(&m, &labels, &cfg(3.0, 6)).unwrap());
    assert!(a.iter().all(|s| s.tokens.len() == N && s.tokens.iter().all(|&t| (t as usize) < K)));
}

#[test]
fn full_mask_reproduces_ground_truth() {
    let (m, _) = tiny_model(K, N, DType::F32, 3);
    let gt = random_sequences(4, 5, N, K, 3);
    let out = decode_with_context_mask(&m, &gt, &vec![vec![true; N]; 5], &cfg(4.0, 0)).unwrap();
    assert_eq!(out, gt);
}

#[test]
fn empty_mask_is_plain_sampling() {
    let (m, _) = tiny_model(K, N, DType::F32, 5);
    let gt = random_sequences(6, 5, N, K, 3);
    let labels: Vec<u32> = gt.iter().map(|s| s.label).collect();
    let c = cfg(2.0, 7);
    assert_eq!(decode_with_context_mask(&m, &gt, &vec![vec![false; N]; 5], &c).unwrap(), sample(&m, &labels, &c).unwrap());
}

#[test]
fn forced_positions_are_kept() {
    let (m, _) = tiny_model(K, N, DType::F32, 8);
    let gt = random_sequences(9, 6, N, K, 3);
    let mut r = stream(1, "mask", 0);
    let masks: Vec<Vec<bool>> = (0..6).map(|_| interleaved_mask(N, 0.5, &mut r)).collect();
    let out = decode_with_context_mask(&m, &gt, &masks, &cfg(1.0, 2)).unwrap();
    for ((o, g), mk) in out.iter().zip(&gt).zip(&masks) {
        for t in 0..N {
            if mk[t] {
                assert_eq!(o.tokens[t], g.tokens[t]);
            }
        }
    }
}

#[test]
fn guided_logits_combination() {
    let c = [1.0, -2.0, 0.5];
    let u = [0.0, 1.0, 0.5];
    assert_eq!(guided_logits(&c, &u, 1.0), c.to_vec());
    assert_eq!(guided_logits(&c, &u, 0.0), u.to_vec());
    let g = guided_logits(&c, &u, 3.0);
    for i in 0..3 {
        assert!((g[i] - (u[i] + 3.0 * (c[i] - u[i]))).abs() < 1e-12);
    }
}

#[test]
fn guidance_ramp_endpoints() {
    let n = 64;
    assert!((cfg_scale_at(n - 1, n, 4.0, 2.0) - 4.0).abs() < 1e-12);
    let first = cfg_scale_at(0, n, 4.0, 2.0);
    assert!(first > 1.0 && first < 1.001);
    let mut prev = 1.0;
    for i in 0..n {
        let s = cfg_scale_at(i, n, 4.0, 2.0);
        assert!(s >= prev);
        prev = s;
    }
    let constant = SampleConfig { schedule: GuidanceSchedule::Constant, ..cfg(2.5, 0) };
    assert_eq!(constant.scale_at(0, n), 2.5);
}

#[test]
fn inverse_cdf_sampling_matches_softmax_frequencies() {
    let logits = [0.3, -1.0, 2.0, 0.0];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let mut counts = [0usize; 4];
    let mut r = stream(11, "u", 0);
    let n = 40_000;
    for _ in 0..n {
        counts[sample_from_logits(&logits, rand::Rng::random::<f64>(&mut r)) as usize] += 1;
    }
    for k in 0..4 {
        let p = logits[k].exp() / z;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((counts[k] as f64 / n as f64 - p).abs() < 4.0 * se, "token {k}");
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let (m, _) = tiny_model(K, N, DType::F32, 12);
    assert!(generate(&m, &[0], &[vec![None; N - 1]], &cfg(1.0, 0), Backend::KvCache, false).is_err());
    assert!(decode_with_context_mask(&m, &random_sequences(1, 2, N, K, 3), &[vec![true; N]], &cfg(1.0, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn masks_force_the_requested_count(n in 1usize..200, r in 0.0f64..=1.0, seed in any::<u64>()) {
        let k = (r * n as f64).floor() as usize;
        let f = front_loaded_mask(n, r);
        prop_assert_eq!(f.iter().filter(|&&b| b).count(), k);
        prop_assert!(f[..k].iter().all(|&b| b));
        let mut rng = stream(seed, "mask", 0);
        prop_assert_eq!(interleaved_mask(n, r, &mut rng).iter().filter(|&&b| b).count(), k);
    }

    #[test]
    fn inverse_cdf_returns_valid_index(logits in prop::collection::vec(-20.0f64..20.0, 1..30), u in 0.0f64..1.0) {
        prop_assert!((sample_from_logits(&logits, u) as usize) < logits.len());
    }
}
