use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Var};
use crate::lm::{init_model, sequence_logprob, ArchConfig};
use crate::testutil::{gradient_check, random_batch, random_model};

fn tiny(v: usize) -> ArchConfig {
    ArchConfig::tiny(v)
}

fn value(p: &ParamStore, f: impl Fn(&mut Graph, &ModelVars) -> Result<LossValue>) -> LossValue {
    let mut g = Graph::new();
    let m = p.bind(&mut g, false).unwrap();
    f(&mut g, &m).unwrap()
}

fn batch(seed: u64, vocab: usize, n: usize) -> Vec<Example> {
    random_batch(&mut ChaCha8Rng::seed_from_u64(seed), vocab, n, 12)
}

fn aug_for(b: &[Example], ids: &[&str], seed: u64, vocab: usize) -> Vec<AugmentedSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.iter()
        .zip(b)
        .map(|(id, ex)| AugmentedSet {
            prompt_id: id.to_string(),
            tau: 1.0,
            seed,
            responses: random_batch(&mut rng, vocab, 2, 16 - ex.prompt.len() + 1)
                .into_iter()
                .map(|e| e.response)
                .collect(),
        })
        .collect()
}

#[test]
fn ga_uniform_single_token() {
    let p = init_model(&tiny(4), 0).unwrap();
    let v = value(&p, |g, m| loss_ga(g, m, &[Example::new(vec![1], vec![2])]));
    assert!((v.diagnostics.total - (0.25f64).ln()).abs() < 1e-12);
    assert!((v.diagnostics.total + 1.3863).abs() < 1e-4);
}

#[test]
fn ga_is_mean_sequence_logprob() {
    let p = random_model(&tiny(9), 1);
    let b = batch(1, 9, 5);
    let v = value(&p, |g, m| loss_ga(g, m, &b)).diagnostics.total;
    let oracle: f64 = b
        .iter()
        .map(|e| sequence_logprob(&p, &e.prompt, &e.response).unwrap())
        .sum::<f64>()
        / b.len() as f64;
    assert!((v - oracle).abs() < 1e-12);
}

#[test]
fn empty_batches_are_data_errors() {
    let p = init_model(&tiny(4), 0).unwrap();
    let mut g = Graph::new();
    let m = p.bind(&mut g, true).unwrap();
    assert!(matches!(loss_ga(&mut g, &m, &[]), Err(Error::Data(_))));
    assert!(matches!(loss_retain(&mut g, &m, &[]), Err(Error::Data(_))));
}

#[test]
fn parameter_range_errors() {
    let p = init_model(&tiny(4), 0).unwrap();
    let b = batch(0, 4, 2);
    let mut g = Graph::new();
    let m = p.bind(&mut g, true).unwrap();
    assert!(matches!(loss_graddiff(&mut g, &m, &b, &b, -1.0), Err(Error::Config(_))));
    assert!(matches!(loss_npo(&mut g, &m, &p, &b, 0.0), Err(Error::Config(_))));
    assert!(matches!(loss_wga(&mut g, &m, &b, -0.5), Err(Error::Config(_))));
    assert!(matches!(loss_bst(&mut g, &m, &b, 1.2, 2, 1.0), Err(Error::Config(_))));
    assert!(matches!(loss_bst(&mut g, &m, &b, 0.2, 5, 1.0), Err(Error::Config(_))));
    let ids = ["a", "b"];
    let aug = aug_for(&b, &ids, 0, 4);
    let cfg = LossConfig::of(LossKind::Bss);
    assert!(matches!(loss_bss(&mut g, &m, &b, &ids, &aug, 1.5, &cfg, None), Err(Error::Config(_))));
    let mut bad = LossConfig::of(LossKind::Bss);
    bad.base_loss = LossKind::Graddiff;
    assert!(matches!(bad.validate(4), Err(Error::Config(_))));
    let inputs = LossInputs {
        forget: &b,
        forget_ids: &ids,
        retain: &b,
        reference: None,
        augmented: None,
    };
    let npo = LossConfig { k: 2, ..LossConfig::of(LossKind::Npo) };
    assert!(matches!(build_loss(&mut g, &m, &npo, inputs), Err(Error::Config(_))));
}

#[test]
fn reduction_identities_are_exact() {
    for seed in 0..5 {
        let p = random_model(&tiny(10), seed);
        let b = batch(seed, 10, 4);
        let r = batch(seed + 100, 10, 3);
        let ga = value(&p, |g, m| loss_ga(g, m, &b)).diagnostics.total;
        assert_eq!(value(&p, |g, m| loss_graddiff(g, m, &b, &r, 0.0)).diagnostics.total, ga);
        assert_eq!(value(&p, |g, m| loss_wga(g, m, &b, 0.0)).diagnostics.total, ga);
        assert_eq!(value(&p, |g, m| loss_bst(g, m, &b, 0.0, 3, 1.0)).diagnostics.total, ga);
        let ids = ["r0", "r1", "r2", "r3"];
        let aug = aug_for(&b, &ids, seed, 10);
        for base in [LossKind::Ga, LossKind::Bst, LossKind::Wga, LossKind::Npo] {
            let mut cfg = LossConfig { k: 3, ..LossConfig::of(LossKind::Bss) };
            cfg.base_loss = base;
            let reference = random_model(&tiny(10), seed + 7);
            let orig = value(&p, |g, m| base_term(g, m, &cfg, base, &b, Some(&reference))).diagnostics.total;
            let aug_ex = augmented_examples(&b, &ids, &aug).unwrap();
            let on_aug = value(&p, |g, m| base_term(g, m, &cfg, base, &aug_ex, Some(&reference)))
                .diagnostics
                .total;
            let at = |l| value(&p, |g, m| loss_bss(g, m, &b, &ids, &aug, l, &cfg, Some(&reference)));
            assert_eq!(at(0.0).diagnostics.total, orig);
            assert_eq!(at(1.0).diagnostics.total, on_aug);
            let mid = at(0.4).diagnostics;
            assert!((mid.total - (0.6 * orig + 0.4 * on_aug)).abs() < 1e-10);
            assert!((mid.total - mid.recombine()).abs() < 1e-10);
        }
    }
}

#[test]
fn graddiff_diagnostics_recombine() {
    let p = random_model(&tiny(10), 3);
    let b = batch(3, 10, 4);
    let r = batch(4, 10, 4);
    let v = value(&p, |g, m| loss_graddiff(g, m, &b, &r, 2.5)).diagnostics;
    assert!(v.retain_term >= 0.0);
    assert!((v.total - v.recombine()).abs() < 1e-10);
    assert!((v.total - (v.forget_term + 2.5 * v.retain_term)).abs() < 1e-10);
}

#[test]
fn retain_is_negated_ga() {
    let p = random_model(&tiny(10), 5);
    let b = batch(5, 10, 4);
    let ga = value(&p, |g, m| loss_ga(g, m, &b)).diagnostics.total;
    let r = value(&p, |g, m| loss_retain(g, m, &b)).diagnostics.total;
    assert_eq!(r, -ga);
    assert!(r >= 0.0);
}

#[test]
fn npo_at_reference_is_two_ln2_over_beta() {
    let p = random_model(&tiny(10), 6);
    let b = batch(6, 10, 5);
    for beta in [0.05, 0.1, 0.5, 1.0] {
        let v = value(&p, |g, m| loss_npo(g, m, &p, &b, beta)).diagnostics.total;
        assert!((v - 2.0 / beta * std::f64::consts::LN_2).abs() < 1e-9, "beta {beta}: {v}");
    }
    let v = value(&p, |g, m| loss_npo(g, m, &p, &b[..1], 0.1)).diagnostics.total;
    assert!((v - 13.8629).abs() < 1e-4);
}

#[test]
fn npo_increases_with_policy_likelihood() {
    let reference = random_model(&tiny(6), 7);
    let b = vec![Example::new(vec![1, 2], vec![3])];
    // raise the target's logit by growing the head column for token 3
    let mut prev = f64::NEG_INFINITY;
    for step in 0..5 {
        let mut p = reference.clone();
        let head = p.entries.get_mut("head").unwrap();
        let v = head.cols();
        for r in 0..head.rows() {
            head.data_mut()[r * v + 3] += 0.2 * step as f64 * head.data()[r * v + 3].signum();
        }
        let lp = sequence_logprob(&p, &[1, 2], &[3]).unwrap();
        let npo = value(&p, |g, m| loss_npo(g, m, &reference, &b, 0.5)).diagnostics.total;
        if step > 0 {
            assert!(npo > prev, "logπ {lp}");
        }
        prev = npo;
    }
}

#[test]
fn wga_uniform_single_token() {
    let p = init_model(&tiny(4), 0).unwrap();
    let v = value(&p, |g, m| loss_wga(g, m, &[Example::new(vec![1], vec![2])], 1.0));
    assert!((v.diagnostics.total - 0.25 * (0.25f64).ln()).abs() < 1e-12);
    assert!((v.diagnostics.total + 0.3466).abs() < 1e-4);
}

#[test]
fn bst_single_position_example() {
    let mut g = Graph::new();
    let z = g.param(Array::matrix(1, 3, vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]).unwrap());
    let lp = g.log_softmax_rows(z).unwrap();
    let seq = soft_target_sequence_terms(&mut g, lp, &[0], &[1], 0.2, 2, 1.0).unwrap();
    let loss = g.sum(seq);
    let expect = 0.925 * 0.5f64.ln() + 0.075 * 0.3f64.ln();
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
    assert!((expect + 0.7315).abs() < 1e-4);
    let grad = g.grad(loss, &[z]).unwrap().pop().unwrap();
    let closed = [0.925 - 0.5, 0.075 - 0.3, 0.0 - 0.2];
    for (a, b) in grad.data().iter().zip(closed) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn bst_logit_gradient_is_target_minus_policy() {
    for seed in 0..10 {
        let p = random_model(&tiny(10), seed);
        let ex = batch(seed, 10, 1);
        let mut g = Graph::new();
        let m = p.bind(&mut g, true).unwrap();
        let tf = teacher_forced(&mut g, &m, &ex).unwrap();
        let seq = soft_target_sequence_terms(&mut g, tf.logp, &tf.targets, &tf.lens, 0.3, 4, 1.0).unwrap();
        let loss = g.mean(seq);
        let grads = g.backward(loss).unwrap();
        let dz = grads.get(tf.logits).unwrap();
        let lp = g.value(tf.logp).clone();
        let t = soft_targets(&lp, &tf.targets, 4, 0.3, 1.0).unwrap();
        for r in 0..tf.targets.len() {
            for v in 0..10 {
                let closed = t.at(r, v) - lp.at(r, v).exp();
                assert!((dz.at(r, v) - closed).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn soft_target_branch_carries_no_gradient() {
    // the gradient reaching the log-probabilities is exactly t: nothing flows
    // back through the belief
    let p = random_model(&tiny(8), 2);
    let ex = batch(2, 8, 2);
    let mut g = Graph::new();
    let m = p.bind(&mut g, true).unwrap();
    let tf = teacher_forced(&mut g, &m, &ex).unwrap();
    let seq = soft_target_sequence_terms(&mut g, tf.logp, &tf.targets, &tf.lens, 0.5, 3, 1.0).unwrap();
    let loss = g.sum(seq);
    let grads = g.backward(loss).unwrap();
    let t = soft_targets(g.value(tf.logp), &tf.targets, 3, 0.5, 1.0).unwrap();
    assert_eq!(grads.get(tf.logp).unwrap().data(), t.data());
}

fn check_all_losses(seed: u64) -> Vec<(&'static str, f64)> {
    let p = random_model(&tiny(10), seed);
    let reference = random_model(&tiny(10), seed + 1000);
    let b = batch(seed, 10, 3);
    let r = batch(seed + 1, 10, 2);
    let ids = ["x", "y", "z"];
    let aug = aug_for(&b, &ids, seed, 10);
    let per_leaf = 2;
    let cfg = LossConfig { k: 4, ..LossConfig::of(LossKind::Bss) };
    let s = |v: Result<LossValue>| v.unwrap().scalar;
    let checks: Vec<(&str, Box<dyn Fn(&mut Graph, &ModelVars) -> Var>)> = vec![
        ("ga", Box::new(|g, m| s(loss_ga(g, m, &b)))),
        ("graddiff", Box::new(|g, m| s(loss_graddiff(g, m, &b, &r, 2.0)))),
        ("npo", Box::new(|g, m| s(loss_npo(g, m, &reference, &b, 0.5)))),
        ("wga", Box::new(|g, m| s(loss_wga(g, m, &b, 1.0)))),
        ("bst", Box::new(|g, m| s(loss_bst(g, m, &b, 0.2, 4, 1.0)))),
        ("bss", Box::new(|g, m| s(loss_bss(g, m, &b, &ids, &aug, 0.6, &cfg, None)))),
        ("retain", Box::new(|g, m| s(loss_retain(g, m, &r)))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| (name, gradient_check(&p, seed, per_leaf, f)))
        .collect()
}

#[test]
fn every_loss_matches_finite_differences() {
    for seed in 0..8 {
        for (name, err) in check_all_losses(seed) {
            assert!(err <= 1e-4, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn misaligned_augmentation_is_data_error() {
    let b = batch(0, 6, 2);
    let aug = aug_for(&b, &["a", "b"], 0, 6);
    assert!(matches!(augmented_examples(&b, &["a", "c"], &aug), Err(Error::Data(_))));
    assert!(matches!(augmented_examples(&b, &["a", "b"], &aug[..1]), Err(Error::Data(_))));
}

#[test]
fn build_loss_retain_bookkeeping() {
    let p = random_model(&tiny(10), 9);
    let b = batch(9, 10, 3);
    let r = batch(10, 10, 3);
    let ids = ["a", "b", "c"];
    let inputs = LossInputs {
        forget: &b,
        forget_ids: &ids,
        retain: &r,
        reference: None,
        augmented: None,
    };
    let bst = LossConfig { k: 4, ..LossConfig::of(LossKind::Bst) };
    let v = value(&p, |g, m| build_loss(g, m, &bst, inputs)).diagnostics;
    assert_eq!(v.retain_term, 0.0);
    assert!(v.forget_term != 0.0);
    let with = LossConfig { lambda_retain: 1.5, ..bst };
    let v = value(&p, |g, m| build_loss(g, m, &with, inputs)).diagnostics;
    assert!(v.retain_term > 0.0);
    assert!((v.total - v.recombine()).abs() < 1e-10);
    let gd = LossConfig { k: 4, ..LossConfig::of(LossKind::Graddiff) };
    let ga = LossConfig { k: 4, ..LossConfig::of(LossKind::Ga) };
    assert_eq!(
        value(&p, |g, m| build_loss(g, m, &gd, inputs)).diagnostics.total,
        value(&p, |g, m| build_loss(g, m, &ga, inputs)).diagnostics.total
    );
}

#[test]
fn loss_config_json_round_trip() {
    let cfg: LossConfig = serde_json::from_str(r#"{"kind":"bst","lambda_bst":0.3,"k":5}"#).unwrap();
    assert_eq!(cfg.kind, LossKind::Bst);
    assert_eq!(cfg.k, 5);
    assert_eq!(cfg.beta, 0.1);
    let back: LossConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<LossConfig>(r#"{"kind":"rmu"}"#).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

    #[test]
    fn endpoint_reductions_hold_on_random_batches(seed in 0u64..10_000, n in 1usize..5) {
        let p = random_model(&tiny(9), seed);
        let b = batch(seed, 9, n);
        let r = batch(seed ^ 1, 9, 2);
        let ga = value(&p, |g, m| loss_ga(g, m, &b)).diagnostics.total;
        proptest::prop_assert_eq!(value(&p, |g, m| loss_graddiff(g, m, &b, &r, 0.0)).diagnostics.total, ga);
        proptest::prop_assert_eq!(value(&p, |g, m| loss_wga(g, m, &b, 0.0)).diagnostics.total, ga);
        proptest::prop_assert_eq!(value(&p, |g, m| loss_bst(g, m, &b, 0.0, 4, 1.0)).diagnostics.total, ga);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let aug = aug_for(&b, &ids, seed, 9);
        let cfg = LossConfig { k: 4, ..LossConfig::of(LossKind::Bss) };
        let base = value(&p, |g, m| loss_bst(g, m, &b, cfg.lambda_bst, 4, 1.0)).diagnostics.total;
        let bss = value(&p, |g, m| loss_bss(g, m, &b, &ids, &aug, 0.0, &cfg, None)).diagnostics.total;
        proptest::prop_assert_eq!(bss, base);
    }

    #[test]
    fn npo_at_reference_for_any_batch(seed in 0u64..10_000, n in 1usize..5, bi in 0usize..4) {
        let beta = [0.05, 0.1, 0.5, 1.0][bi];
        let p = random_model(&tiny(9), seed);
        let b = batch(seed, 9, n);
        let v = value(&p, |g, m| loss_npo(g, m, &p, &b, beta)).diagnostics.total;
        proptest::prop_assert!((v - 2.0 / beta * std::f64::consts::LN_2).abs() < 1e-9);
    }
}
