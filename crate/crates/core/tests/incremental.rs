use ngram_core::incremental::{greedy_decode, CacheKind, DecodeState, KvCache, RingBufferCache};
use ngram_core::model::{decode_full, encode, ModelConfig, ModelParams, TokenSequence, BOS, EOS};
use ngram_core::{MaskSpec, SeededRng};
use proptest::prelude::*;

fn config(layers: usize, heads: usize, mask: MaskSpec) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        num_heads: heads,
        d_model: 8,
        d_ff: 16,
        vocab_size: 13,
        mask,
        max_positions: 40,
        ..ModelConfig::default()
    }
}

fn random_ids(rng: &mut SeededRng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| 3 + rng.below(vocab - 3)).collect()
}

/// Largest absolute gap between incremental logits and the batch rows.
fn max_gap(cfg: &ModelConfig, seed: u64, len: usize) -> f64 {
    let mut rng = SeededRng::new(seed);
    let params = ModelParams::<f64>::init_random(cfg, &mut rng).unwrap();
    let src = TokenSequence::source(random_ids(&mut rng, 5, cfg.vocab_size)).unwrap();
    let mut ids = vec![BOS];
    ids.extend(random_ids(&mut rng, len - 1, cfg.vocab_size));
    let prefix = TokenSequence::prefix(ids.clone()).unwrap();
    let memory = encode(&src, &params, cfg).unwrap();
    let full = decode_full(&prefix, &memory, &params, cfg).unwrap();
    let mut state = DecodeState::new(memory, &params, cfg).unwrap();
    let mut worst = 0.0f64;
    for (k, &tok) in ids.iter().enumerate() {
        let logits = state.step(tok, &params, cfg).unwrap();
        for (a, b) in logits.data().iter().zip(full.row(k)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert_eq!(state.position(), len + 1);
    assert_eq!(state.emitted(), ids.as_slice());
    worst
}

#[test]
fn first_step_matches_single_token_prefix() {
    for mask in [MaskSpec::Causal, MaskSpec::ngram(2).unwrap()] {
        let gap = max_gap(&config(2, 2, mask), 9, 1);
        assert!(gap <= 1e-12, "{mask}: {gap}");
    }
}

#[test]
fn twenty_steps_order_four() {
    let gap = max_gap(&config(2, 2, MaskSpec::ngram(4).unwrap()), 4, 20);
    assert!(gap <= 1e-9, "{gap}");
}

#[test]
fn equivalence_sweep() {
    for layers in [1, 2, 4] {
        for heads in [1, 2] {
            for order in [2, 3, 5, 8] {
                let cfg = config(layers, heads, MaskSpec::ngram(order).unwrap());
                let gap = max_gap(&cfg, (layers * 100 + heads * 10 + order) as u64, 24);
                assert!(gap <= 1e-9, "L={layers} H={heads} N={order}: {gap}");
            }
        }
    }
    let gap = max_gap(&config(2, 2, MaskSpec::Causal), 77, 30);
    assert!(gap <= 1e-9, "causal: {gap}");
}

#[test]
fn unbinding_window_is_bit_identical_to_causal() {
    let len = 6;
    let ngram = config(2, 2, MaskSpec::ngram(len + 1).unwrap());
    let causal = ngram.clone().with_mask(MaskSpec::Causal);
    let mut rng = SeededRng::new(31);
    let params = ModelParams::<f64>::init_random(&ngram, &mut rng).unwrap();
    let src = TokenSequence::source(random_ids(&mut rng, 4, 13)).unwrap();
    let memory = encode(&src, &params, &ngram).unwrap();
    let mut a = DecodeState::new(memory.clone(), &params, &ngram).unwrap();
    let mut b = DecodeState::new(memory, &params, &causal).unwrap();
    let mut tok = BOS;
    for _ in 0..len {
        let la = a.step(tok, &params, &ngram).unwrap();
        let lb = b.step(tok, &params, &causal).unwrap();
        assert_eq!(la.data(), lb.data());
        tok = 3 + rng.below(10);
    }
}

#[test]
fn attended_keys_and_cache_size() {
    let order = 4;
    let cfg = config(2, 2, MaskSpec::ngram(order).unwrap());
    let mut rng = SeededRng::new(2);
    let params = ModelParams::<f64>::init_random(&cfg, &mut rng).unwrap();
    let memory = encode(&TokenSequence::source(vec![3, 4]).unwrap(), &params, &cfg).unwrap();
    let mut ring = DecodeState::new(memory.clone(), &params, &cfg).unwrap();
    let mut append = DecodeState::with_cache(memory, &params, &cfg, CacheKind::Append).unwrap();
    let peak = 2 * (order - 1) * cfg.d_model;
    for k in 1..=20 {
        let (_, p) = ring.step_profiled(5, &params, &cfg).unwrap();
        assert_eq!(p.attended_keys, k.min(order - 1));
        for c in ring.caches() {
            assert_eq!(c.stored_numbers(), peak);
        }
        let (_, p) = append.step_profiled(5, &params, &cfg).unwrap();
        assert_eq!(p.attended_keys, k);
        assert_eq!(p.cache_entries, k);
    }
}

#[test]
fn step_rejects_bad_token_and_overflow() {
    let mut cfg = config(1, 1, MaskSpec::ngram(3).unwrap());
    cfg.max_positions = 2;
    let params = ModelParams::<f64>::init_random(&cfg, &mut SeededRng::new(1)).unwrap();
    let memory = encode(&TokenSequence::source(vec![3]).unwrap(), &params, &cfg).unwrap();
    let mut state = DecodeState::new(memory, &params, &cfg).unwrap();
    assert!(state.step(13, &params, &cfg).is_err());
    state.step(BOS, &params, &cfg).unwrap();
    state.step(4, &params, &cfg).unwrap();
    assert!(state.step(4, &params, &cfg).is_err());
}

#[test]
fn eos_forcing_model_stops_immediately() {
    let cfg = config(2, 2, MaskSpec::ngram(3).unwrap());
    let mut params = ModelParams::<f64>::init(&cfg, &mut SeededRng::new(3)).unwrap();
    // final hidden state is all ones, so only the EOS column scores
    let last = params.decoder.last_mut().unwrap();
    last.norm_ff.gain.fill(0.0);
    last.norm_ff.bias.fill(1.0);
    for r in 0..cfg.d_model {
        params.output.set(r, EOS, 1.0);
    }
    let src = TokenSequence::source(vec![4, 5, 6]).unwrap();
    let out = greedy_decode(&src, &params, &cfg, 10).unwrap();
    assert_eq!(out.ids(), &[BOS, EOS]);
}

#[test]
fn greedy_matches_full_recompute_and_is_deterministic() {
    for mask in [MaskSpec::ngram(3).unwrap(), MaskSpec::Causal] {
        let cfg = config(2, 2, mask);
        let params = ModelParams::<f64>::init_random(&cfg, &mut SeededRng::new(8)).unwrap();
        let src = TokenSequence::source(vec![4, 9, 6, 11]).unwrap();
        let out = greedy_decode(&src, &params, &cfg, 12).unwrap();
        assert_eq!(out, greedy_decode(&src, &params, &cfg, 12).unwrap());

        let memory = encode(&src, &params, &cfg).unwrap();
        let mut ids = vec![BOS];
        while ids.len() < 12 {
            let logits = decode_full(
                &TokenSequence::prefix(ids.clone()).unwrap(),
                &memory,
                &params,
                &cfg,
            )
            .unwrap();
            let next = ngram_core::incremental::argmax(logits.row(ids.len() - 1));
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        assert_eq!(out.ids(), ids.as_slice());
    }
}

fn list_oracle_check(
    capacity: usize,
    pushes: usize,
    rng: &mut SeededRng,
) -> Result<(), TestCaseError> {
    let width = 3;
    let mut cache = RingBufferCache::<f64>::new(capacity, width).unwrap();
    let mut list: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for p in 1..=pushes {
        let k: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..width).map(|_| rng.normal()).collect();
        cache.push(p, &k, &v).unwrap();
        list.push((p, k, v));
        let keep = &list[list.len().saturating_sub(capacity)..];
        let w = cache.window().unwrap();
        prop_assert_eq!(&w.positions, &keep.iter().map(|e| e.0).collect::<Vec<_>>());
        for (i, (_, k, v)) in keep.iter().enumerate() {
            prop_assert_eq!(w.keys.row(i), k.as_slice());
            prop_assert_eq!(w.values.row(i), v.as_slice());
        }
    }
    Ok(())
}

#[test]
fn ring_buffer_matches_list_oracle_exhaustively() {
    let mut rng = SeededRng::new(12);
    for capacity in 1..=8 {
        for pushes in 1..=3 * capacity {
            list_oracle_check(capacity, pushes, &mut rng).unwrap();
        }
    }
}

proptest! {
    #[test]
    fn ring_buffer_list_oracle(capacity in 1usize..12, extra in 0usize..40, seed in any::<u64>()) {
        list_oracle_check(capacity, capacity + extra, &mut SeededRng::new(seed))?;
    }

    #[test]
    fn out_of_order_push_rejected(capacity in 1usize..6, pushes in 1usize..10, skip in 2usize..5) {
        let mut cache = RingBufferCache::<f64>::new(capacity, 2).unwrap();
        for p in 1..=pushes {
            cache.push(p, &[0.0, 1.0], &[1.0, 0.0]).unwrap();
        }
        let before = cache.clone();
        prop_assert!(cache.push(pushes + skip, &[0.0, 0.0], &[0.0, 0.0]).is_err());
        prop_assert_eq!(cache, before);
    }

    #[test]
    fn incremental_equals_batch(layers in 1usize..3, heads in prop::sample::select(vec![1usize, 2]),
                                order in 2usize..9, len in 1usize..16, seed in any::<u64>()) {
        let cfg = config(layers, heads, MaskSpec::ngram(order).unwrap());
        let gap = max_gap(&cfg, seed, len);
        prop_assert!(gap <= 1e-9, "gap {}", gap);
    }
}
