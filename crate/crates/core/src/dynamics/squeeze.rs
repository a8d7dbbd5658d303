use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{beam, score_examples, Example, ParamStore, TokenId, TokenSequence};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    High,
    Mid,
    Low,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::High, Band::Mid, Band::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::High => "high",
            Band::Mid => "mid",
            Band::Low => "low",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Where squeeze candidates come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CandidateSource {
    /// Beam search on checkpoint 0.
    Beam { width: usize, max_len: usize, eos: TokenId },
    /// Fixed candidates per prompt.
    Given(Vec<Vec<TokenSequence>>),
}

/// Likelihood-band trace of one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandTrace {
    pub prompt_id: String,
    pub candidate_ids: Vec<usize>,
    pub candidates: Vec<TokenSequence>,
    pub band_of: Vec<Band>,
    /// Mean sequence logprob per checkpoint, columns high/mid/low.
    pub per_epoch_mean_logprob: Vec<[f64; 3]>,
}

impl BandTrace {
    pub fn band_size(&self, band: Band) -> usize {
        self.band_of.iter().filter(|&&b| b == band).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeResult {
    pub traces: Vec<BandTrace>,
    /// Per-checkpoint mean over prompts of each band mean.
    pub aggregate: Vec<[f64; 3]>,
}

/// Bands by descending logprob: top 20% high, next 40% mid, rest low.
/// Ties keep the lower candidate index first.
pub fn assign_bands(logprobs: &[f64]) -> Result<Vec<Band>> {
    let n = logprobs.len();
    if n < 5 {
        return Err(Error::Data(format!("squeeze bands need ≥ 5 candidates, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    let n_high = ((0.2 * n as f64).round() as usize).max(1);
    let mid_end = ((0.6 * n as f64).round() as usize).clamp(n_high + 1, n - 1);
    let mut bands = vec![Band::Low; n];
    for (rank, &i) in order.iter().enumerate() {
        bands[i] = if rank < n_high {
            Band::High
        } else if rank < mid_end {
            Band::Mid
        } else {
            Band::Low
        };
    }
    Ok(bands)
}

fn band_means(scores: &[f64], bands: &[Band]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = [0usize; 3];
    for (s, b) in scores.iter().zip(bands) {
        sum[b.index()] += s;
        count[b.index()] += 1;
    }
    [0, 1, 2].map(|i| sum[i] / count[i] as f64)
}

/// Scores fixed candidates under every checkpoint. Candidates come from
/// checkpoint 0 and bands are frozen from its scores. `exclude[i]`, when
/// given, is dropped from prompt `i`'s beam candidates (one extra beam is
/// searched to keep the count).
pub fn squeeze_trace(
    checkpoints: &[ParamStore],
    prompts: &[(String, TokenSequence)],
    source: &CandidateSource,
    exclude: &[Option<TokenSequence>],
) -> Result<SqueezeResult> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::Data("squeeze needs at least one checkpoint".into()));
    };
    if prompts.is_empty() {
        return Err(Error::Data("squeeze needs at least one prompt".into()));
    }
    let candidates: Vec<Vec<TokenSequence>> = match source {
        CandidateSource::Beam { width, max_len, eos } => par::map_range(prompts.len(), |i| -> Result<_> {
            let prompt = &prompts[i].1;
            let skip = exclude.get(i).and_then(|e| e.as_ref());
            let extra = usize::from(skip.is_some());
            let found = beam(first, prompt, width + extra, *max_len, *eos)?;
            Ok(found
                .into_iter()
                .map(|d| d.tokens)
                .filter(|t| Some(t) != skip)
                .take(*width)
                .collect())
        })
        .into_iter()
        .collect::<Result<_>>()?,
        CandidateSource::Given(c) => {
            if c.len() != prompts.len() {
                return Err(Error::Data(format!("{} candidate lists for {} prompts", c.len(), prompts.len())));
            }
            c.clone()
        }
    };

    let mut examples = Vec::new();
    let mut spans = Vec::with_capacity(prompts.len());
    for ((_, prompt), cands) in prompts.iter().zip(&candidates) {
        if cands.len() < 5 {
            return Err(Error::Data(format!("squeeze bands need ≥ 5 candidates, got {}", cands.len())));
        }
        spans.push(examples.len()..examples.len() + cands.len());
        examples.extend(cands.iter().map(|c| Example::new(prompt.clone(), c.clone())));
    }
    let per_ckpt: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|p| Ok(score_examples(p, &examples)?.iter().map(|s| s.total()).collect()))
        .collect::<Result<_>>()?;

    let mut traces = Vec::with_capacity(prompts.len());
    for (((id, _), cands), span) in prompts.iter().zip(candidates).zip(spans) {
        let bands = assign_bands(&per_ckpt[0][span.clone()])?;
        let per_epoch = per_ckpt.iter().map(|s| band_means(&s[span.clone()], &bands)).collect();
        traces.push(BandTrace {
            prompt_id: id.clone(),
            candidate_ids: (0..cands.len()).collect(),
            candidates: cands,
            band_of: bands,
            per_epoch_mean_logprob: per_epoch,
        });
    }
    let n = traces.len() as f64;
    let aggregate = (0..checkpoints.len())
        .map(|e| {
            let mut m = [0.0; 3];
            for t in &traces {
                for (b, v) in m.iter_mut().zip(t.per_epoch_mean_logprob[e]) {
                    *b += v / n;
                }
            }
            m
        })
        .collect();
    Ok(SqueezeResult { traces, aggregate })
}

pub const BANDS_CSV_COLUMNS: [&str; 5] = ["prompt_id", "epoch", "band", "mean_logprob", "n_candidates"];

/// One row per (prompt, checkpoint, band), followed by the aggregate rows
/// under prompt id `all`. `epochs[e]` labels checkpoint `e`.
pub fn write_bands_csv(result: &SqueezeResult, epochs: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(BANDS_CSV_COLUMNS).map_err(io)?;
    for t in &result.traces {
        if t.per_epoch_mean_logprob.len() != epochs.len() {
            return Err(Error::Contract("epoch labels do not match the trace length".into()));
        }
        for (e, means) in epochs.iter().zip(&t.per_epoch_mean_logprob) {
            for b in Band::ALL {
                w.write_record([
                    t.prompt_id.clone(),
                    e.to_string(),
                    b.as_str().to_string(),
                    means[b.index()].to_string(),
                    t.band_size(b).to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    for (e, means) in epochs.iter().zip(&result.aggregate) {
        for b in Band::ALL {
            let n: usize = result.traces.iter().map(|t| t.band_size(b)).sum();
            w.write_record([
                "all".to_string(),
                e.to_string(),
                b.as_str().to_string(),
                means[b.index()].to_string(),
                n.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
