use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{argmax, next_token_logprobs, TokenId, TokenSequence};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Decoding strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Temperature { tau: f64, seed: u64 },
    Beam { width: usize },
}

/// A generated continuation (prompt excluded) and its total log-probability
/// under the untempered model.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSequence,
    pub logprob: f64,
}

impl Decoded {
    pub fn ended_with(&self, eos: TokenId) -> bool {
        self.tokens.last() == Some(&eos)
    }
}

fn budget(params: &ParamStore, prompt: &[TokenId], max_len: usize) -> Result<usize> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be non-empty".into()));
    }
    let room = params.arch.context_len.saturating_sub(prompt.len());
    if room == 0 {
        return Err(Error::Length {
            len: prompt.len() + 1,
            context_len: params.arch.context_len,
        });
    }
    Ok(max_len.min(room))
}

/// Decodes a continuation of `prompt`. Each sequence stops at `eos` or after
/// `max_len` tokens (or when the context window is full).
pub fn decode(
    params: &ParamStore,
    prompt: &[TokenId],
    strategy: Strategy,
    max_len: usize,
    eos: TokenId,
) -> Result<Vec<Decoded>> {
    match strategy {
        Strategy::Greedy => Ok(greedy_batch(params, &[prompt], max_len, eos)?
            .pop()
            .into_iter()
            .collect()),
        Strategy::Temperature { tau, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(vec![sample(params, prompt, tau, &mut rng, max_len, eos)?])
        }
        Strategy::Beam { width } => beam(params, prompt, width, max_len, eos),
    }
}

/// Greedy decoding of many prompts in lockstep; argmax ties go to the
/// lowest token id.
pub fn greedy_batch(
    params: &ParamStore,
    prompts: &[&[TokenId]],
    max_len: usize,
    eos: TokenId,
) -> Result<Vec<Decoded>> {
    lockstep(params, prompts, max_len, eos, |_, lp| argmax(lp))
}

/// Extends every prompt one token at a time in a shared batch until each
/// hits `eos` or its budget. `pick(i, logprobs)` chooses prompt `i`'s token.
fn lockstep(
    params: &ParamStore,
    prompts: &[&[TokenId]],
    max_len: usize,
    eos: TokenId,
    mut pick: impl FnMut(usize, &[f64]) -> usize,
) -> Result<Vec<Decoded>> {
    let mut budgets = Vec::with_capacity(prompts.len());
    for p in prompts {
        budgets.push(budget(params, p, max_len)?);
    }
    let mut seqs: Vec<TokenSequence> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut out: Vec<Decoded> = prompts
        .iter()
        .map(|_| Decoded {
            tokens: Vec::new(),
            logprob: 0.0,
        })
        .collect();
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    while !active.is_empty() {
        let prefixes: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let lps = next_token_logprobs(params, &prefixes)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, lp) in active.iter().zip(&lps) {
            let tok = pick(i, lp);
            out[i].tokens.push(tok as TokenId);
            out[i].logprob += lp[tok];
            seqs[i].push(tok as TokenId);
            if tok as TokenId != eos && out[i].tokens.len() < budgets[i] {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

/// Samples from `softmax(z / tau)` with the caller's generator.
pub fn sample(
    params: &ParamStore,
    prompt: &[TokenId],
    tau: f64,
    rng: &mut ChaCha8Rng,
    max_len: usize,
    eos: TokenId,
) -> Result<Decoded> {
    Ok(sample_batch(params, &[prompt], tau, std::slice::from_mut(rng), max_len, eos)?
        .pop()
        .expect("one prompt"))
}

fn draw(lp: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = lp.iter().map(|v| v / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Temperature sampling of many prompts in lockstep, one generator per
/// prompt. Each sequence's draws depend only on its own generator.
pub fn sample_batch(
    params: &ParamStore,
    prompts: &[&[TokenId]],
    tau: f64,
    rngs: &mut [ChaCha8Rng],
    max_len: usize,
    eos: TokenId,
) -> Result<Vec<Decoded>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if rngs.len() != prompts.len() {
        return Err(Error::Contract("one generator per prompt required".into()));
    }
    lockstep(params, prompts, max_len, eos, |i, lp| draw(lp, tau, &mut rngs[i]))
}

#[derive(Clone)]
struct Hyp {
    tokens: TokenSequence,
    logprob: f64,
    done: bool,
}

fn rank(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search scored by total (unnormalized) log-probability. Returns up to
/// `width` distinct sequences, best first.
pub fn beam(
    params: &ParamStore,
    prompt: &[TokenId],
    width: usize,
    max_len: usize,
    eos: TokenId,
) -> Result<Vec<Decoded>> {
    if width < 1 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let limit = budget(params, prompt, max_len)?;
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
        done: false,
    }];
    for _ in 0..limit {
        let active: Vec<&Hyp> = beams.iter().filter(|h| !h.done).collect();
        if active.is_empty() {
            break;
        }
        let seqs: Vec<TokenSequence> = active
            .iter()
            .map(|h| {
                let mut s = prompt.to_vec();
                s.extend_from_slice(&h.tokens);
                s
            })
            .collect();
        let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
        let lps = next_token_logprobs(params, &refs)?;
        let mut cands: Vec<Hyp> = beams.iter().filter(|h| h.done).cloned().collect();
        for (h, lp) in active.iter().zip(&lps) {
            for (v, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v as TokenId);
                cands.push(Hyp {
                    tokens,
                    logprob: h.logprob + l,
                    done: v as TokenId == eos,
                });
            }
        }
        cands.sort_by(rank);
        cands.dedup_by(|a, b| a.tokens == b.tokens);
        cands.truncate(width);
        beams = cands;
    }
    beams.sort_by(rank);
    Ok(beams
        .into_iter()
        .map(|h| Decoded {
            tokens: h.tokens,
            logprob: h.logprob,
        })
        .collect())
}
