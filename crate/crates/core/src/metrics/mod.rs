//! Evaluation metrics: ROUGE-L, normalized probability, exact memorization,
//! extraction strength, truth ratio, a degeneracy proxy for fluency, and
//! harmonic-mean aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QaRecord, Split};
use crate::error::{Error, Result};
use crate::lm::{greedy_batch, score_examples, Example, ExampleScore, ParamStore, TokenId, TokenSequence};
use crate::par;


/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_f1<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("rouge_l_f1 needs a non-empty reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(reference, hyp) as f64;
    let (p, r) = (l / hyp.len() as f64, l / reference.len() as f64);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

fn non_empty_answer(answer: &[TokenId]) -> Result<()> {
    if answer.is_empty() {
        return Err(Error::Data("answer must be non-empty".into()));
    }
    Ok(())
}

fn score_one(params: &ParamStore, prompt: &[TokenId], answer: &[TokenId]) -> Result<ExampleScore> {
    non_empty_answer(answer)?;
    Ok(score_examples(params, &[Example::new(prompt.to_vec(), answer.to_vec())])?.remove(0))
}

/// Per-token geometric mean probability of a scored answer.
pub fn norm_prob_of(score: &ExampleScore) -> f64 {
    (score.total() / score.token_logprobs.len() as f64).exp()
}

/// Fraction of teacher-forced positions whose argmax is the answer token.
pub fn exact_mem_of(score: &ExampleScore) -> f64 {
    let hits = score.argmax_hits.iter().filter(|&&h| h).count();
    hits as f64 / score.argmax_hits.len() as f64
}

/// `1 − k*/|y|`. Greedy decoding from `(x, y<k)` reproduces `y≥k` exactly
/// when every teacher-forced argmax from position `k` on is a hit, so `k*`
/// is one past the last miss.
pub fn extraction_strength_of(score: &ExampleScore) -> f64 {
    let n = score.argmax_hits.len();
    let k_star = score.argmax_hits.iter().rposition(|&h| !h).map_or(0, |i| i + 1);
    1.0 - k_star as f64 / n as f64
}

pub fn normalized_probability(params: &ParamStore, prompt: &[TokenId], answer: &[TokenId]) -> Result<f64> {
    Ok(norm_prob_of(&score_one(params, prompt, answer)?))
}

pub fn exact_memorization(params: &ParamStore, prompt: &[TokenId], answer: &[TokenId]) -> Result<f64> {
    Ok(exact_mem_of(&score_one(params, prompt, answer)?))
}

pub fn extraction_strength(params: &ParamStore, prompt: &[TokenId], answer: &[TokenId]) -> Result<f64> {
    Ok(extraction_strength_of(&score_one(params, prompt, answer)?))
}

/// `r = mean normprob(perturbed) / normprob(correct)` and `max(0, 1 − r)`.
pub fn truth_ratio_from(correct: f64, perturbed: &[f64]) -> Result<(f64, f64)> {
    if perturbed.is_empty() {
        return Err(Error::Data("truth ratio needs ≥ 1 perturbed answer".into()));
    }
    let mean = perturbed.iter().sum::<f64>() / perturbed.len() as f64;
    let r = mean / correct;
    Ok((r, (1.0 - r).max(0.0)))
}

pub fn truth_ratio(
    params: &ParamStore,
    prompt: &[TokenId],
    correct: &[TokenId],
    perturbed: &[TokenSequence],
) -> Result<(f64, f64)> {
    if perturbed.is_empty() {
        return Err(Error::Data("truth ratio needs ≥ 1 perturbed answer".into()));
    }
    non_empty_answer(correct)?;
    let mut batch = vec![Example::new(prompt.to_vec(), correct.to_vec())];
    for p in perturbed {
        non_empty_answer(p)?;
        batch.push(Example::new(prompt.to_vec(), p.clone()));
    }
    let lp: Vec<f64> = score_examples(params, &batch)?.iter().map(mean_logprob).collect();
    truth_ratio_from_logs(lp[0], &lp[1..])
}

/// Mean per-token log-probability, the log of [`norm_prob_of`].
pub fn mean_logprob(score: &ExampleScore) -> f64 {
    score.total() / score.token_logprobs.len() as f64
}

/// [`truth_ratio_from`] on log normalized probabilities, so vanishing
/// probabilities do not produce 0/0.
pub fn truth_ratio_from_logs(correct: f64, perturbed: &[f64]) -> Result<(f64, f64)> {
    if perturbed.is_empty() {
        return Err(Error::Data("truth ratio needs ≥ 1 perturbed answer".into()));
    }
    let r = perturbed.iter().map(|a| (a - correct).exp()).sum::<f64>() / perturbed.len() as f64;
    Ok((r, (1.0 - r).max(0.0)))
}

/// `max(longest-run fraction, 1 − distinct-bigram ratio)`. The run fraction
/// counts adjacent repeats, `(L − 1)/(n − 1)` for a longest run of `L`, so
/// a sequence without repeats scores 0.
pub fn degeneracy_score<T: Eq + std::hash::Hash>(tokens: &[T]) -> Result<f64> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Data("degeneracy_score needs a non-empty sequence".into()));
    }
    if n == 1 {
        return Ok(0.0);
    }
    let (mut longest, mut run) = (1, 1);
    for w in tokens.windows(2) {
        run = if w[0] == w[1] { run + 1 } else { 1 };
        longest = longest.max(run);
    }
    let run_frac = (longest - 1) as f64 / (n - 1) as f64;
    let bigrams: std::collections::HashSet<(&T, &T)> = tokens.windows(2).map(|w| (&w[0], &w[1])).collect();
    let repeat_frac = 1.0 - bigrams.len() as f64 / (n - 1) as f64;
    Ok(run_frac.max(repeat_frac))
}

/// `n / Σ 1/vᵢ`, and 0 when any value is 0.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("harmonic mean of an empty list".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("harmonic mean of negative value {v}")));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Mean per-record scores of one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_records: usize,
    pub rouge_l: f64,
    pub norm_prob: f64,
    pub para_prob: f64,
    pub exact_mem: f64,
    pub extraction_strength: f64,
    /// Mean of `max(0, 1 − r)`; the raw ratio is unbounded and not kept.
    pub truth_ratio_inv: f64,
    pub degeneracy: f64,
}

impl SplitMetrics {
    /// `HM(norm_prob, rouge_l, truth_ratio_inv)`.
    pub fn composite(&self) -> f64 {
        harmonic_mean(&[self.norm_prob, self.rouge_l, self.truth_ratio_inv]).expect("scores are ≥ 0")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_split: BTreeMap<Split, SplitMetrics>,
    /// `1 − degeneracy` of forget-split generations.
    pub fluency: f64,
    pub memorization: f64,
    pub utility: f64,
    pub aggregate: f64,
    /// Retain normalized probability relative to the reference checkpoint.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retain_norm_prob_ratio: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 18] = [
    "checkpoint",
    "memorization",
    "utility",
    "aggregate",
    "fluency",
    "forget_exact_mem",
    "forget_extraction_strength",
    "forget_norm_prob",
    "forget_para_prob",
    "forget_truth_ratio_inv",
    "forget_rouge_l",
    "forget_degeneracy",
    "retain_norm_prob",
    "retain_rouge_l",
    "retain_truth_ratio_inv",
    "holdout_norm_prob",
    "holdout_rouge_l",
    "holdout_truth_ratio_inv",
];

impl MetricsReport {
    pub fn split(&self, s: Split) -> &SplitMetrics {
        &self.per_split[&s]
    }

    /// Values for [`CSV_COLUMNS`] after the checkpoint label.
    pub fn csv_values(&self) -> Vec<f64> {
        let (f, r, h) = (self.split(Split::Forget), self.split(Split::Retain), self.split(Split::Holdout));
        vec![
            self.memorization,
            self.utility,
            self.aggregate,
            self.fluency,
            f.exact_mem,
            f.extraction_strength,
            f.norm_prob,
            f.para_prob,
            f.truth_ratio_inv,
            f.rouge_l,
            f.degeneracy,
            r.norm_prob,
            r.rouge_l,
            r.truth_ratio_inv,
            h.norm_prob,
            h.rouge_l,
            h.truth_ratio_inv,
        ]
    }
}

/// Forget-side memorization: `HM(1−ES, 1−EM, 1−ParaProb, 1−TR_inv)`.
pub fn memorization_score(forget: &SplitMetrics) -> f64 {
    harmonic_mean(&[
        1.0 - forget.extraction_strength,
        1.0 - forget.exact_mem,
        1.0 - forget.para_prob,
        1.0 - forget.truth_ratio_inv,
    ])
    .expect("scores are in [0,1]")
}

pub fn utility_score(retain: &SplitMetrics, holdout: &SplitMetrics, fluency: f64) -> f64 {
    harmonic_mean(&[retain.composite(), holdout.composite(), fluency]).expect("scores are in [0,1]")
}

/// Tokens of a generation up to (excluding) eos.
pub fn strip_eos(tokens: &[TokenId], eos: TokenId) -> &[TokenId] {
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Per-record evaluation of one split; also returns the greedy generations.
pub fn evaluate_records(
    params: &ParamStore,
    corpus: &Corpus,
    records: &[&QaRecord],
) -> Result<(SplitMetrics, Vec<TokenSequence>)> {
    if records.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let vocab = &corpus.vocab;
    let eos = vocab.specials.eos;
    // one scoring batch: answer, paraphrases, perturbed answers per record
    let mut batch = Vec::new();
    let mut layout = Vec::with_capacity(records.len());
    let mut prompts = Vec::with_capacity(records.len());
    for r in records {
        let prompt = vocab.encode_prompt(&r.question)?;
        if r.perturbed_answers.is_empty() || r.paraphrases.is_empty() {
            return Err(Error::Data(format!("record {:?} lacks paraphrases or perturbations", r.id)));
        }
        batch.push(Example::new(prompt.clone(), vocab.encode(&r.answer)?));
        for t in r.paraphrases.iter().chain(&r.perturbed_answers) {
            batch.push(Example::new(prompt.clone(), vocab.encode(t)?));
        }
        layout.push((r.paraphrases.len(), r.perturbed_answers.len()));
        prompts.push(prompt);
    }
    let scores = score_examples(params, &batch)?;

    let prompt_refs: Vec<&[TokenId]> = prompts.iter().map(|p| p.as_slice()).collect();
    let chunks: Vec<&[&[TokenId]]> = prompt_refs.chunks(32).collect();
    let context = params.arch.context_len;
    let generations: Vec<TokenSequence> = par::try_map(&chunks, |c| -> Result<Vec<TokenSequence>> {
        Ok(greedy_batch(params, c, context, eos)?.into_iter().map(|d| d.tokens).collect())
    })?
    .into_iter()
    .flatten()
    .collect();

    let mut m = SplitMetrics {
        n_records: records.len(),
        ..SplitMetrics::default()
    };
    let mut i = 0;
    for (((n_para, n_pert), gen), r) in layout.iter().zip(&generations).zip(records) {
        let answer = &scores[i];
        let para = &scores[i + 1..i + 1 + n_para];
        let pert: Vec<f64> = scores[i + 1 + n_para..i + 1 + n_para + n_pert]
            .iter()
            .map(mean_logprob)
            .collect();
        i += 1 + n_para + n_pert;
        // perturbed answers share the answer template, so the answer is the like-for-like reference
        let (_, tr_inv) = truth_ratio_from_logs(mean_logprob(answer), &pert)?;
        let reference = vocab.words(&r.answer)?;
        let hyp = strip_eos(gen, eos);
        m.norm_prob += norm_prob_of(answer);
        m.exact_mem += exact_mem_of(answer);
        m.extraction_strength += extraction_strength_of(answer);
        m.para_prob += para.iter().map(norm_prob_of).sum::<f64>() / para.len() as f64;
        m.truth_ratio_inv += tr_inv;
        m.rouge_l += rouge_l_f1(&reference, hyp)?;
        // an empty generation counts as fully degenerate
        m.degeneracy += if hyp.is_empty() { 1.0 } else { degeneracy_score(hyp)? };
    }
    let n = records.len() as f64;
    for v in [
        &mut m.norm_prob,
        &mut m.exact_mem,
        &mut m.extraction_strength,
        &mut m.para_prob,
        &mut m.truth_ratio_inv,
        &mut m.rouge_l,
        &mut m.degeneracy,
    ] {
        *v /= n;
    }
    Ok((m, generations))
}

/// Full report over the three splits. With a reference checkpoint, also
/// reports the retain normalized-probability ratio against it.
pub fn evaluate_model(params: &ParamStore, corpus: &Corpus, reference: Option<&ParamStore>) -> Result<MetricsReport> {
    let mut per_split = BTreeMap::new();
    for s in Split::ALL {
        let records = corpus.split(s);
        if records.is_empty() {
            return Err(Error::Data(format!("corpus has no {s} records")));
        }
        per_split.insert(s, evaluate_records(params, corpus, &records)?.0);
    }
    let fluency = 1.0 - per_split[&Split::Forget].degeneracy;
    let memorization = memorization_score(&per_split[&Split::Forget]);
    let utility = utility_score(&per_split[&Split::Retain], &per_split[&Split::Holdout], fluency);
    let aggregate = harmonic_mean(&[memorization, utility])?;
    let retain_norm_prob_ratio = match reference {
        Some(r) => {
            let records = corpus.split(Split::Retain);
            let examples = corpus.examples(&records)?;
            let ref_np: f64 = score_examples(r, &examples)?.iter().map(norm_prob_of).sum::<f64>();
            Some(per_split[&Split::Retain].norm_prob * records.len() as f64 / ref_np)
        }
        None => None,
    };
    Ok(MetricsReport {
        per_split,
        fluency,
        memorization,
        utility,
        aggregate,
        retain_norm_prob_ratio,
    })
}
