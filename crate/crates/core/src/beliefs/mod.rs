//! Model beliefs recycled as forgetting targets. Token-level beliefs feed
//! soft targets; sampled responses feed sequence-level augmentation.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{sample_batch, ParamStore, TokenDistribution, TokenId, TokenSequence};


/// Renormalized mass of the `k` most likely tokens; zero elsewhere. Always
/// treated as a constant when it enters a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefDistribution {
    pub probs: Vec<f64>,
    /// Retained ids, most likely first.
    pub support: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    pub probs: Vec<f64>,
    pub lambda_bst: f64,
    pub target_id: TokenId,
}

/// Ids of the `k` largest entries, largest first; ties go to the lower id.
pub(crate) fn topk_ids(probs: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn topk_belief(dist: &TokenDistribution, k: usize) -> Result<BeliefDistribution> {
    topk_belief_smoothed(&dist.probs, k, 1.0)
}

/// Top-k belief with an optional smoothing temperature applied inside the
/// support (`q ∝ p^(1/temperature)`); temperature 1 is plain renormalization.
pub fn topk_belief_smoothed(probs: &[f64], k: usize, temperature: f64) -> Result<BeliefDistribution> {
    let v = probs.len();
    if k < 1 || k > v {
        return Err(Error::Config(format!("top-k needs 1 ≤ k ≤ {v}, got {k}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("belief temperature must be > 0, got {temperature}")));
    }
    let support = topk_ids(probs, k);
    let mut out = vec![0.0; v];
    if temperature == 1.0 {
        let mass: f64 = support.iter().map(|&i| probs[i]).sum();
        for &i in &support {
            out[i] = probs[i] / mass;
        }
    } else {
        // log-space so tiny probabilities survive the power
        let logs: Vec<f64> = support.iter().map(|&i| probs[i].ln() / temperature).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mass: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        for (&i, l) in support.iter().zip(&logs) {
            out[i] = (l - m).exp() / mass;
        }
    }
    Ok(BeliefDistribution {
        probs: out,
        support: support.into_iter().map(|i| i as TokenId).collect(),
    })
}

fn check_lambda(lambda: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("{what} must be in [0,1], got {lambda}")));
    }
    Ok(())
}

/// `t = λ·q + (1−λ)·e_target`.
pub fn soft_target(belief: &BeliefDistribution, target_id: TokenId, lambda_bst: f64) -> Result<SoftTarget> {
    check_lambda(lambda_bst, "lambda_bst")?;
    let y = target_id as usize;
    if y >= belief.probs.len() {
        return Err(Error::TokenOutOfRange {
            id: y,
            vocab_size: belief.probs.len(),
        });
    }
    let mut probs: Vec<f64> = belief.probs.iter().map(|q| lambda_bst * q).collect();
    probs[y] += 1.0 - lambda_bst;
    Ok(SoftTarget {
        probs,
        lambda_bst,
        target_id,
    })
}

/// N sampled responses to one forget prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSet {
    pub prompt_id: String,
    pub tau: f64,
    pub seed: u64,
    pub responses: Vec<TokenSequence>,
}

/// Generator for response `index` of invocation `counter` under `seed`.
pub fn augmentation_rng(seed: u64, counter: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentationSpec {
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    pub max_len: usize,
    pub eos: TokenId,
}

/// Samples `spec.n` responses per prompt from the current model. Each
/// `(seed, counter)` pair reproduces the same sets; callers bump `counter`
/// on every invocation to resample.
pub fn sample_augmentations(
    params: &ParamStore,
    prompts: &[(&str, &[TokenId])],
    spec: AugmentationSpec,
    counter: u64,
) -> Result<Vec<AugmentedSet>> {
    if spec.n < 1 {
        return Err(Error::Config("number of augmentations must be ≥ 1".into()));
    }
    if !(spec.tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {}", spec.tau)));
    }
    let mut flat: Vec<&[TokenId]> = Vec::with_capacity(prompts.len() * spec.n);
    let mut rngs = Vec::with_capacity(prompts.len() * spec.n);
    for (p, (_, prompt)) in prompts.iter().enumerate() {
        for j in 0..spec.n {
            flat.push(prompt);
            rngs.push(augmentation_rng(spec.seed, counter, (p * spec.n + j) as u64));
        }
    }
    let decoded = sample_batch(params, &flat, spec.tau, &mut rngs, spec.max_len, spec.eos)?;
    let mut it = decoded.into_iter();
    Ok(prompts
        .iter()
        .map(|(id, _)| AugmentedSet {
            prompt_id: id.to_string(),
            tau: spec.tau,
            seed: spec.seed,
            responses: it.by_ref().take(spec.n).map(|d| d.tokens).collect(),
        })
        .collect())
}

pub fn write_augmented_jsonl(sets: &[AugmentedSet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for s in sets {
        writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
