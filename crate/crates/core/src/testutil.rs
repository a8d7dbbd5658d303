use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_at, relative_error, Array, Graph, Var};
use crate::lm::{init_model, ArchConfig, Example, ModelVars, ParamStore, TokenId};

/// Seeded model with every parameter jittered so predictions are not uniform.
pub fn random_model(arch: &ArchConfig, seed: u64) -> ParamStore {
    let mut p = init_model(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for a in p.entries.values_mut() {
        for v in a.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

pub fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, n: usize, max_total: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let lp = rng.gen_range(1..=max_total / 2);
            let lr = rng.gen_range(1..=max_total - lp);
            let draw = |rng: &mut ChaCha8Rng, l| (0..l).map(|_| rng.gen_range(0..vocab) as TokenId).collect();
            Example::new(draw(rng, lp), draw(rng, lr))
        })
        .collect()
}

/// Relative error between autodiff and central differences over a random
/// subset of parameter components.
pub fn gradient_check(
    params: &ParamStore,
    seed: u64,
    per_leaf: usize,
    build: impl Fn(&mut Graph, &ModelVars) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let m = params.bind(&mut g, true).unwrap();
    let root = build(&mut g, &m);
    let grads = g.backward(root).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut an, mut fd) = (Vec::new(), Vec::new());
    for (_, leaf) in m.named.clone() {
        let n = g.value(leaf).len();
        let comps: Vec<usize> = (0..per_leaf).map(|_| rng.gen_range(0..n)).collect();
        let zero = Array::zeros(g.shape(leaf));
        let a = grads.get(leaf).unwrap_or(&zero);
        an.extend(comps.iter().map(|&c| a.data()[c]));
        fd.extend(finite_diff_at(&mut g, root, leaf, &comps, 1e-5).unwrap());
    }
    relative_error(&an, &fd, 1e-8)
}
