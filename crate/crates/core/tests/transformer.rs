mod common;

use candle_core::DType;
use common::*;
use proptest::prelude::*;
use rear::transformer::{count_parameters, tap_layers, ArConfig, ArTransformer, Taps, TokenBatch};

const K: usize = 11;
const N: usize = 9;

fn logits(m: &ArTransformer, b: &TokenBatch) -> Vec<f64> {
    to_f64(&m.forward(b, Taps::None, None).unwrap().logits)
}

#[test]
fn logits_are_causal() {
    let (m, _) = tiny_model(K, N, DType::F64, 1);
    let seqs = random_sequences(2, 3, N, K, 3);
    let base = logits(&m, &batch(&seqs));
    for j in 0..N {
        let mut changed = seqs.clone();
        for s in &mut changed {
            s.tokens[j] = (s.tokens[j] + 1 + j as u32) % K as u32;
        }
        let other = logits(&m, &batch(&changed));
        for b in 0..3 {
            for p in 0..N {
                let off = (b * N + p) * K;
                let d = max_abs_diff(&base[off..off + K], &other[off..off + K]);
                if p <= j {
                    assert!(d < 1e-12, "position {p} saw token {j}");
                } else if p == j + 1 {
                    assert!(d > 1e-9, "position {p} ignored token {j}");
                }
            }
        }
    }
}

#[test]
fn label_conditions_every_position() {
    let (m, _) = tiny_model(K, N, DType::F64, 3);
    let mut seqs = random_sequences(4, 1, N, K, 3);
    let a = logits(&m, &batch(&seqs));
    seqs[0].label = (seqs[0].label + 1) % 3;
    let b = logits(&m, &batch(&seqs));
    for p in 0..N {
        assert!(max_abs_diff(&a[p * K..(p + 1) * K], &b[p * K..(p + 1) * K]) > 1e-9);
    }
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let (a, _) = tiny_model(K, N, DType::F32, 5);
    let (b, _) = tiny_model(K, N, DType::F32, 5);
    let (c, _) = tiny_model(K, N, DType::F32, 6);
    let bt = batch(&random_sequences(7, 4, N, K, 3));
    assert_eq!(logits(&a, &bt), logits(&b, &bt));
    assert_ne!(logits(&a, &bt), logits(&c, &bt));
}

#[test]
fn qk_normalization_removes_query_and_key_scale() {
    let (m, _) = tiny_model(K, N, DType::F64, 8);
    let bt = batch(&random_sequences(9, 2, N, K, 3));
    let before = logits(&m, &bt);
    let d = m.config.hidden_dim;
    for name in ["blocks.00.attn.qkv.weight", "blocks.00.attn.qkv.bias", "blocks.01.attn.qkv.weight", "blocks.01.attn.qkv.bias"] {
        let v = m.store.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let row = if name.ends_with("weight") { d } else { 1 };
        // scale the query and key projections, leave values alone
        let scaled: Vec<f64> = v.iter().enumerate().map(|(i, x)| if i < 2 * d * row { x * 7.5 } else { *x }).collect();
        m.store.set_values(name, &scaled).unwrap();
    }
    let after = logits(&m, &bt);
    assert!(max_abs_diff(&before, &after) < 1e-4, "{}", max_abs_diff(&before, &after));
}

#[test]
fn taps_and_heads_do_not_touch_logits() {
    let (m, _) = tiny_model(K, N, DType::F64, 10);
    let bt = batch(&random_sequences(11, 2, N, K, 3));
    let plain = logits(&m, &bt);
    let out = m.forward(&bt, Taps::Layers(&[0, 1]), None).unwrap();
    assert_eq!(to_f64(&out.logits), plain);
    assert_eq!(out.tapped[&0].dims(), &[2, N, m.config.hidden_dim]);
    for name in m.store.names().into_iter().filter(|n| n.starts_with(ArTransformer::HEAD_PREFIX)) {
        let n = m.store.get(&name).unwrap().as_tensor().elem_count();
        m.store.set_values(&name, &vec![0.37; n]).unwrap();
    }
    assert_eq!(logits(&m, &bt), plain);
    assert!(m.forward(&bt, Taps::Layers(&[2]), None).is_err());
}

#[test]
fn parameter_count_matches_instantiated_model() {
    for tie in [false, true] {
        for (layers, d, heads) in [(2, 16, 2), (3, 24, 4), (4, 64, 4)] {
            let (s, dp) = tap_layers(layers);
            let cfg = ArConfig { num_layers: layers, hidden_dim: d, num_heads: heads, tap_shallow: s, tap_deep: dp, tie_codebook: tie, ..tiny_config(K, N) };
            let cb = random_codebook(1, K, cfg.codebook_dim);
            let m = ArTransformer::new(cfg.clone(), DType::F32, 0, Some(&cb)).unwrap();
            let count = count_parameters(&cfg);
            assert_eq!(count.total(), m.store.count_scalars(""));
            assert_eq!(count.heads, m.store.count_scalars(ArTransformer::HEAD_PREFIX));
        }
    }
}

#[test]
fn default_taps() {
    assert_eq!(tap_layers(2), (0, 1));
    assert_eq!(tap_layers(4), (0, 3));
    assert_eq!(tap_layers(8), (0, 6));
    assert_eq!(tap_layers(12), (0, 9));
    assert_eq!(tap_layers(24), (0, 18));
}

#[test]
fn cached_steps_match_full_forward() {
    for tie in [false, true] {
        let cfg = ArConfig { tie_codebook: tie, ..tiny_config(K, N) };
        let cb = random_codebook(12, K, cfg.codebook_dim);
        let m = ArTransformer::new(cfg, DType::F64, 13, Some(&cb)).unwrap();
        m.jitter_parameters(0.3, 13).unwrap();
        let seqs = random_sequences(14, 3, N, K, 3);
        let bt = batch(&seqs);
        let full = logits(&m, &bt);
        let mut cache = m.start_cache(&bt.labels).unwrap();
        for p in 0..N {
            let prev: Vec<u32> = (0..3).map(|b| bt.seq(b)[p.max(1) - 1]).collect();
            let step = to_f64(&m.step(&mut cache, if p == 0 { None } else { Some(&prev) }).unwrap());
            for b in 0..3 {
                let off = (b * N + p) * K;
                assert!(max_abs_diff(&step[b * K..(b + 1) * K], &full[off..off + K]) < 1e-10, "tie {tie} position {p}");
            }
        }
        assert!(m.step(&mut cache, Some(&[0, 0, 0])).is_err());
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let (m, _) = tiny_model(K, N, DType::F32, 15);
    assert!(m.forward(&TokenBatch::new(vec![K as u32; N], vec![0], N).unwrap(), Taps::None, None).is_err());
    assert!(m.forward(&TokenBatch::new(vec![0; N], vec![4], N).unwrap(), Taps::None, None).is_err());
    // the null class is a valid label
    assert!(m.forward(&TokenBatch::new(vec![0; N], vec![3], N).unwrap(), Taps::None, None).is_ok());
    let bad = ArConfig { tap_shallow: 1, tap_deep: 1, ..tiny_config(K, N) };
    assert!(ArTransformer::new(bad, DType::F32, 0, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn logits_are_finite(seed in any::<u64>()) {
        let (m, _) = tiny_model(K, N, DType::F32, seed % 1000);
        let out = logits(&m, &batch(&random_sequences(seed, 2, N, K, 3)));
        prop_assert!(out.iter().all(|v| v.is_finite()));
    }
}
