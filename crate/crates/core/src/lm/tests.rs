use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_diff_at, Graph};
use crate::error::Error;

fn tiny() -> ArchConfig {
    ArchConfig::tiny(12)
}

/// A model with a random (non-zero) head so predictions are not uniform.
fn random_model(arch: &ArchConfig, seed: u64) -> ParamStore {
    let mut p = init_model(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for a in p.entries.values_mut() {
        for v in a.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

fn closed_form_count(a: &ArchConfig) -> usize {
    let (v, c, d, f, l) = (a.vocab_size, a.context_len, a.d_model, 4 * a.d_model, a.n_layers);
    let block = 2 * d + 4 * d * d + 4 * d + 2 * d + d * f + f + f * d + d;
    v * d + c * d + l * block + 2 * d + if a.tie_output_head { 0 } else { d * v }
}

#[test]
fn init_is_deterministic() {
    let arch = ArchConfig::desk(64);
    assert_eq!(init_model(&arch, 7).unwrap(), init_model(&arch, 7).unwrap());
    assert_ne!(init_model(&arch, 7).unwrap(), init_model(&arch, 8).unwrap());
}

#[test]
fn invalid_arch_is_config_error() {
    let mut arch = tiny();
    arch.n_heads = 3;
    assert!(matches!(init_model(&arch, 0), Err(Error::Config(_))));
}

#[test]
fn zero_head_gives_uniform_prediction() {
    let p = init_model(&ArchConfig::desk(64), 1).unwrap();
    let d = next_token_dist(&p, &[4, 9, 2]).unwrap();
    for &q in &d.probs {
        assert!((q - 1.0 / 64.0).abs() < 1e-15);
    }
    let lp = sequence_logprob(&p, &[5, 6], &[7]).unwrap();
    assert!((lp - (1.0f64 / 64.0).ln()).abs() < 1e-12);
    assert!((lp + 4.1589).abs() < 1e-4);
}

#[test]
fn param_count_matches_closed_form() {
    for arch in [ArchConfig::desk(64), tiny(), {
        let mut a = tiny();
        a.tie_output_head = true;
        a.n_layers = 3;
        a
    }] {
        let p = init_model(&arch, 0).unwrap();
        let counted: usize = p.entries.values().map(|a| a.len()).sum();
        assert_eq!(counted, closed_form_count(&arch));
        assert_eq!(p.param_count(), arch.param_count());
    }
}

#[test]
fn layout_is_function_of_arch() {
    let a = init_model(&tiny(), 1).unwrap();
    let b = init_model(&tiny(), 99).unwrap();
    assert_eq!(a.names(), b.names());
    for (x, y) in a.entries.values().zip(b.entries.values()) {
        assert_eq!(x.shape(), y.shape());
    }
}

#[test]
fn snapshot_is_independent_of_live_store() {
    let mut live = random_model(&tiny(), 2);
    let snap = live.clone();
    let before = sequence_logprob(&snap, &[1, 2], &[3, 4]).unwrap();
    let mut flat = live.flatten();
    flat.iter_mut().for_each(|v| *v *= 2.0);
    live.assign_flat(&flat).unwrap();
    assert_eq!(sequence_logprob(&snap, &[1, 2], &[3, 4]).unwrap(), before);
}

#[test]
fn logits_are_causal() {
    let p = random_model(&tiny(), 3);
    let toks = vec![1, 5, 7, 2, 9, 4];
    let base = forward_logits(&p, &toks).unwrap();
    for j in 0..toks.len() {
        let mut t = toks.clone();
        t[j] = (t[j] + 1) % 12;
        let out = forward_logits(&p, &t).unwrap();
        for r in 0..j {
            assert_eq!(base.values().row(r), out.values().row(r), "row {r} changed by {j}");
        }
        assert_ne!(base.values().row(j), out.values().row(j));
    }
}

#[test]
fn forward_is_deterministic_and_rows_are_distributions() {
    let p = random_model(&tiny(), 4);
    let toks = [3, 1, 4, 1, 5];
    let a = forward_logits(&p, &toks).unwrap();
    assert_eq!(a, forward_logits(&p, &toks).unwrap());
    for r in 0..toks.len() {
        let d = a.distribution(r);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.probs.iter().all(|&q| q > 0.0));
    }
}

#[test]
fn length_and_vocab_errors() {
    let p = init_model(&tiny(), 0).unwrap();
    let long = vec![1; 17];
    assert!(matches!(forward_logits(&p, &long), Err(Error::Length { .. })));
    assert!(matches!(
        forward_logits(&p, &[1, 12]),
        Err(Error::TokenOutOfRange { id: 12, .. })
    ));
    assert!(matches!(sequence_logprob(&p, &[1; 10], &[1; 7]), Err(Error::Length { .. })));
    assert!(matches!(sequence_logprob(&p, &[], &[1]), Err(Error::Contract(_))));
    assert_eq!(sequence_logprob(&p, &[1], &[]).unwrap(), 0.0);
}

#[test]
fn sequence_logprob_matches_per_position_terms() {
    for seed in 0..10 {
        let p = random_model(&tiny(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..12)).collect();
        let resp: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..12)).collect();
        let mut full = prompt.clone();
        full.extend(&resp);
        let z = forward_logits(&p, &full).unwrap();
        let mut oracle = 0.0;
        for (i, &y) in resp.iter().enumerate() {
            let row = z.values().row(prompt.len() - 1 + i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            oracle += row[y as usize] - lse;
        }
        let got = sequence_logprob(&p, &prompt, &resp).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        assert!(got <= 0.0);
    }
}

#[test]
fn packed_batch_matches_single_scoring() {
    let p = random_model(&tiny(), 5);
    let exs = vec![
        Example::new(vec![1, 2, 3], vec![4, 5]),
        Example::new(vec![6], vec![7, 8, 9]),
        Example::new(vec![10, 11], vec![0]),
    ];
    let batch = score_examples(&p, &exs).unwrap();
    for (ex, s) in exs.iter().zip(&batch) {
        let single = sequence_logprob(&p, &ex.prompt, &ex.response).unwrap();
        assert!((s.total() - single).abs() < 1e-12);
    }
}

#[test]
fn teacher_forced_gradient_matches_finite_differences() {
    let p = random_model(&tiny(), 6);
    let mut g = Graph::new();
    let m = p.bind(&mut g, true).unwrap();
    let tf = teacher_forced(
        &mut g,
        &m,
        &[Example::new(vec![1, 2], vec![3, 4, 1]), Example::new(vec![5], vec![6, 1])],
    )
    .unwrap();
    let picked = g.pick_cols(tf.logp, &tf.targets).unwrap();
    let loss = g.mean(picked);
    let grads = g.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, leaf) in m.named.clone() {
        let n = g.value(leaf).len();
        let comps: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n)).collect();
        let fd = finite_diff_at(&mut g, loss, leaf, &comps, 1e-5).unwrap();
        let an = grads.get(leaf).unwrap();
        for (c, f) in comps.iter().zip(fd) {
            let a = an.data()[*c];
            assert!(
                (a - f).abs() <= 1e-6 + 1e-4 * f.abs(),
                "{name}[{c}]: autodiff {a} vs fd {f}"
            );
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let p = random_model(&ArchConfig::desk(40), 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    p.save(&path).unwrap();
    let q = ParamStore::load(&path).unwrap();
    let a = sequence_logprob(&p, &[1, 2, 3], &[4, 5, 6]).unwrap();
    let b = sequence_logprob(&q, &[1, 2, 3], &[4, 5, 6]).unwrap();
    assert!((a - b).abs() <= 1e-12);
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["arch"].is_object() && v["seed"] == 9 && v["params"]["head"]["shape"].is_array());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let p = init_model(&tiny(), 0).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
    v["params"]["head"]["shape"] = serde_json::json!([3, 3]);
    assert!(ParamStore::from_json(&v.to_string()).is_err());
}

#[test]
fn greedy_is_deterministic_and_follows_argmax() {
    let p = random_model(&tiny(), 10);
    let a = decode(&p, &[1, 2], Strategy::Greedy, 8, 1).unwrap();
    assert_eq!(a, decode(&p, &[1, 2], Strategy::Greedy, 8, 1).unwrap());
    let mut prefix = vec![1, 2];
    for &t in &a[0].tokens {
        assert_eq!(next_token_dist(&p, &prefix).unwrap().argmax(), t);
        prefix.push(t);
    }
    let d = &a[0];
    assert!(d.ended_with(1) || d.tokens.len() == 8);
}

#[test]
fn uniform_model_greedy_picks_lowest_id() {
    let p = init_model(&tiny(), 0).unwrap();
    let d = decode(&p, &[3], Strategy::Greedy, 4, 1).unwrap();
    assert_eq!(d[0].tokens, vec![0, 0, 0, 0]);
}

#[test]
fn beam_width_one_equals_greedy() {
    for seed in 0..5 {
        let p = random_model(&tiny(), seed);
        let g = decode(&p, &[2, 3], Strategy::Greedy, 6, 1).unwrap();
        let b = decode(&p, &[2, 3], Strategy::Beam { width: 1 }, 6, 1).unwrap();
        assert_eq!(g[0].tokens, b[0].tokens);
        assert!((g[0].logprob - b[0].logprob).abs() < 1e-12);
    }
}

#[test]
fn beam_is_sorted_distinct_and_scored() {
    let p = random_model(&tiny(), 11);
    let out = beam(&p, &[4], 5, 4, 1).unwrap();
    assert_eq!(out.len(), 5);
    for w in out.windows(2) {
        assert!(w[0].logprob >= w[1].logprob);
        assert_ne!(w[0].tokens, w[1].tokens);
    }
    for d in &out {
        let lp = sequence_logprob(&p, &[4], &d.tokens).unwrap();
        assert!((lp - d.logprob).abs() < 1e-10);
    }
}

#[test]
fn temperature_is_seeded() {
    let p = random_model(&tiny(), 12);
    let s = |seed| decode(&p, &[1], Strategy::Temperature { tau: 1.0, seed }, 6, 1).unwrap();
    assert_eq!(s(3), s(3));
    let distinct: std::collections::HashSet<_> = (0..10).map(|k| s(k)[0].tokens.clone()).collect();
    assert!(distinct.len() > 1);
}

#[test]
fn decode_config_errors() {
    let p = init_model(&tiny(), 0).unwrap();
    let bad = |s| decode(&p, &[1], s, 4, 1);
    assert!(matches!(bad(Strategy::Temperature { tau: 0.0, seed: 0 }), Err(Error::Config(_))));
    assert!(matches!(bad(Strategy::Temperature { tau: -1.0, seed: 0 }), Err(Error::Config(_))));
    assert!(matches!(bad(Strategy::Beam { width: 0 }), Err(Error::Config(_))));
    assert!(matches!(decode(&p, &[1], Strategy::Greedy, 0, 1), Err(Error::Config(_))));
}

#[test]
fn decode_respects_context_window() {
    let p = random_model(&tiny(), 13);
    let prompt = vec![2; 14];
    let d = decode(&p, &prompt, Strategy::Greedy, 10, 99).unwrap();
    assert_eq!(d[0].tokens.len(), 2);
    let full = vec![2; 16];
    assert!(matches!(
        decode(&p, &full, Strategy::Greedy, 1, 1),
        Err(Error::Length { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn continuations_sum_to_one(seed in 0u64..1000, prefix in proptest::collection::vec(0u32..12, 1..10)) {
        let p = random_model(&tiny(), seed);
        let total: f64 = next_token_logprobs(&p, &[&prefix]).unwrap()[0].iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sequence_logprob_ignores_trailing_padding(
        seed in 0u64..1000,
        prompt in proptest::collection::vec(0u32..12, 1..5),
        resp in proptest::collection::vec(0u32..12, 1..5),
        pad in proptest::collection::vec(0u32..12, 1..5),
    ) {
        let p = random_model(&tiny(), seed);
        let mut full = prompt.clone();
        full.extend(&resp);
        let mut padded = full.clone();
        padded.extend(&pad);
        let a = sequence_logprob(&p, &prompt, &resp).unwrap();
        let za = forward_logits(&p, &full).unwrap();
        let zb = forward_logits(&p, &padded).unwrap();
        for r in 0..full.len() {
            prop_assert_eq!(za.values().row(r), zb.values().row(r));
        }
        prop_assert!(a <= 0.0);
    }

    #[test]
    fn greedy_step_is_argmax(seed in 0u64..1000, prefix in proptest::collection::vec(0u32..12, 1..8)) {
        let p = random_model(&tiny(), seed);
        let d = decode(&p, &prefix, Strategy::Greedy, 1, 1).unwrap();
        let lp = &next_token_logprobs(&p, &[&prefix]).unwrap()[0];
        prop_assert_eq!(d[0].tokens[0] as usize, argmax(lp));
    }
}
