//! Unlearning objectives as graph builders. Every loss is minimized; the
//! forget terms are mean sequence log-likelihoods (so minimizing them is
//! ascent on NLL) and the retain term is a mean NLL.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::beliefs::{soft_target, topk_belief_smoothed, AugmentedSet};
use crate::error::{Error, Result};
use crate::lm::{score_examples, teacher_forced, Example, ModelVars, ParamStore, TeacherForced};

#[cfg(test)]
mod tests;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ga,
    Graddiff,
    Npo,
    Wga,
    Bst,
    Bss,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ga => "ga",
            LossKind::Graddiff => "graddiff",
            LossKind::Npo => "npo",
            LossKind::Wga => "wga",
            LossKind::Bst => "bst",
            LossKind::Bss => "bss",
        }
    }

    pub fn needs_reference(self) -> bool {
        self == LossKind::Npo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda_retain: f64,
    pub beta: f64,
    pub alpha: f64,
    pub lambda_bst: f64,
    pub k: usize,
    /// Smoothing temperature for the top-k belief; 1 leaves it unchanged.
    pub belief_temperature: f64,
    pub lambda_bss: f64,
    pub n_aug: usize,
    pub tau: f64,
    pub base_loss: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ga,
            lambda_retain: 0.0,
            beta: 0.1,
            alpha: 1.0,
            lambda_bst: 0.2,
            k: 10,
            belief_temperature: 1.0,
            lambda_bss: 0.6,
            n_aug: 4,
            tau: 1.0,
            base_loss: LossKind::Bst,
        }
    }
}

/// Upper bound on augmentations per prompt.
pub const MAX_N_AUG: usize = 8;

impl LossConfig {
    pub fn of(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..Self::default()
        }
    }

    /// Checks every field, including ones the kind ignores.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lambda_retain >= 0.0) {
            return err(format!("lambda_retain must be ≥ 0, got {}", self.lambda_retain));
        }
        if !(self.beta > 0.0) {
            return err(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.alpha >= 0.0) {
            return err(format!("alpha must be ≥ 0, got {}", self.alpha));
        }
        for (name, v) in [("lambda_bst", self.lambda_bst), ("lambda_bss", self.lambda_bss)] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if self.k < 1 || self.k > vocab_size {
            return err(format!("k must be in 1..={vocab_size}, got {}", self.k));
        }
        if !(self.belief_temperature > 0.0) {
            return err(format!("belief_temperature must be > 0, got {}", self.belief_temperature));
        }
        if self.n_aug < 1 || self.n_aug > MAX_N_AUG {
            return err(format!("n_aug must be in 1..={MAX_N_AUG}, got {}", self.n_aug));
        }
        if !(self.tau > 0.0) {
            return err(format!("tau must be > 0, got {}", self.tau));
        }
        if matches!(self.base_loss, LossKind::Graddiff | LossKind::Bss) {
            return err(format!("base_loss must be one of ga, bst, npo, wga, got {}", self.base_loss.as_str()));
        }
        Ok(())
    }

    pub fn needs_reference(&self) -> bool {
        self.kind.needs_reference() || (self.kind == LossKind::Bss && self.base_loss.needs_reference())
    }
}

/// Per-term breakdown of a loss value:
/// `total = forget_weight·forget + aug_weight·aug + retain_weight·retain`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub forget_term: f64,
    pub aug_term: f64,
    pub retain_term: f64,
    pub forget_weight: f64,
    pub aug_weight: f64,
    pub retain_weight: f64,
    pub total: f64,
}

impl Diagnostics {
    pub fn recombine(&self) -> f64 {
        self.forget_weight * self.forget_term
            + self.aug_weight * self.aug_term
            + self.retain_weight * self.retain_term
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub scalar: Var,
    pub diagnostics: Diagnostics,
}

fn non_empty(batch: &[Example], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data(format!("{what} batch is empty")));
    }
    Ok(())
}

fn single(g: &Graph, scalar: Var) -> LossValue {
    let v = g.value(scalar).item();
    LossValue {
        scalar,
        diagnostics: Diagnostics {
            forget_term: v,
            forget_weight: 1.0,
            total: v,
            ..Diagnostics::default()
        },
    }
}

/// Sequence log-likelihoods `[B]` of a teacher-forced batch.
fn sequence_logprobs(g: &mut Graph, tf: &TeacherForced) -> Result<Var> {
    let picked = g.pick_cols(tf.logp, &tf.targets)?;
    g.segment_sum(picked, &tf.lens)
}

/// Mean sequence log-likelihood over the batch.
pub fn loss_ga(g: &mut Graph, m: &ModelVars, forget: &[Example]) -> Result<LossValue> {
    non_empty(forget, "forget")?;
    let tf = teacher_forced(g, m, forget)?;
    let seq = sequence_logprobs(g, &tf)?;
    let s = g.mean(seq);
    Ok(single(g, s))
}

/// Mean NLL over the retain batch.
pub fn loss_retain(g: &mut Graph, m: &ModelVars, retain: &[Example]) -> Result<LossValue> {
    non_empty(retain, "retain")?;
    let tf = teacher_forced(g, m, retain)?;
    let seq = sequence_logprobs(g, &tf)?;
    let mean = g.mean(seq);
    let s = g.scale(mean, -1.0);
    let v = g.value(s).item();
    Ok(LossValue {
        scalar: s,
        diagnostics: Diagnostics {
            retain_term: v,
            retain_weight: 1.0,
            total: v,
            ..Diagnostics::default()
        },
    })
}

/// `forget + λ·retain`.
fn with_retain(g: &mut Graph, forget: LossValue, retain: LossValue, lambda: f64) -> Result<LossValue> {
    let weighted = g.scale(retain.scalar, lambda);
    let s = g.add(forget.scalar, weighted)?;
    let mut d = forget.diagnostics;
    d.retain_term = retain.diagnostics.retain_term;
    d.retain_weight = lambda;
    d.total = g.value(s).item();
    Ok(LossValue { scalar: s, diagnostics: d })
}

pub fn loss_graddiff(
    g: &mut Graph,
    m: &ModelVars,
    forget: &[Example],
    retain: &[Example],
    lambda_retain: f64,
) -> Result<LossValue> {
    if !(lambda_retain >= 0.0) {
        return Err(Error::Config(format!("lambda_retain must be ≥ 0, got {lambda_retain}")));
    }
    let f = loss_ga(g, m, forget)?;
    let r = loss_retain(g, m, retain)?;
    with_retain(g, f, r, lambda_retain)
}

/// `(2/β)·mean softplus(β·(log π_θ − log π_ref))` over whole sequences.
pub fn loss_npo(
    g: &mut Graph,
    m: &ModelVars,
    reference: &ParamStore,
    forget: &[Example],
    beta: f64,
) -> Result<LossValue> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    non_empty(forget, "forget")?;
    let ref_lp: Vec<f64> = score_examples(reference, forget)?.iter().map(|s| s.total()).collect();
    let tf = teacher_forced(g, m, forget)?;
    let seq = sequence_logprobs(g, &tf)?;
    let r = g.constant(Array::vector(ref_lp));
    let diff = g.sub(seq, r)?;
    let scaled = g.scale(diff, beta);
    let sp = g.softplus(scaled);
    let mean = g.mean(sp);
    let s = g.scale(mean, 2.0 / beta);
    Ok(single(g, s))
}

/// `mean Σᵢ wᵢ·log π(yᵢ)` with `wᵢ = π(yᵢ)^α` held constant.
pub fn loss_wga(g: &mut Graph, m: &ModelVars, forget: &[Example], alpha: f64) -> Result<LossValue> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be ≥ 0, got {alpha}")));
    }
    non_empty(forget, "forget")?;
    let tf = teacher_forced(g, m, forget)?;
    let picked = g.pick_cols(tf.logp, &tf.targets)?;
    let frozen = g.stop_gradient(picked);
    let w = g.derived(
        frozen,
        "wga_weight",
        Arc::new(move |lp: &Array| {
            Array::new(lp.shape().to_vec(), lp.data().iter().map(|l| (alpha * l).exp()).collect())
        }),
    )?;
    let weighted = g.mul(w, picked)?;
    let seq = g.segment_sum(weighted, &tf.lens)?;
    let s = g.mean(seq);
    Ok(single(g, s))
}

/// Soft targets `[R, V]` built from constant log-probabilities.
pub(crate) fn soft_targets(
    logp: &Array,
    targets: &[usize],
    k: usize,
    lambda_bst: f64,
    temperature: f64,
) -> Result<Array> {
    let v = logp.cols();
    let mut out = Vec::with_capacity(logp.len());
    for (r, &y) in targets.iter().enumerate() {
        let probs: Vec<f64> = logp.row(r).iter().map(|l| l.exp()).collect();
        let q = topk_belief_smoothed(&probs, k, temperature)?;
        out.extend(soft_target(&q, y as u32, lambda_bst)?.probs);
    }
    Array::new(vec![targets.len(), v], out)
}

/// `mean Σᵢ ⟨tᵢ, log π(·|x, y<ᵢ)⟩` with `tᵢ` the soft target built from the
/// model's own (gradient-blocked) top-k belief.
pub fn loss_bst(
    g: &mut Graph,
    m: &ModelVars,
    forget: &[Example],
    lambda_bst: f64,
    k: usize,
    belief_temperature: f64,
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&lambda_bst) {
        return Err(Error::Config(format!("lambda_bst must be in [0,1], got {lambda_bst}")));
    }
    let vocab = m.arch.vocab_size;
    if k < 1 || k > vocab {
        return Err(Error::Config(format!("k must be in 1..={vocab}, got {k}")));
    }
    non_empty(forget, "forget")?;
    let tf = teacher_forced(g, m, forget)?;
    let seq = soft_target_sequence_terms(g, tf.logp, &tf.targets, &tf.lens, lambda_bst, k, belief_temperature)?;
    let s = g.mean(seq);
    Ok(single(g, s))
}

/// Per-sequence `Σᵢ ⟨tᵢ, logp_i⟩` from a `[R, V]` log-probability node.
pub(crate) fn soft_target_sequence_terms(
    g: &mut Graph,
    logp: Var,
    targets: &[usize],
    lens: &[usize],
    lambda_bst: f64,
    k: usize,
    belief_temperature: f64,
) -> Result<Var> {
    let vocab = g.value(logp).cols();
    let frozen = g.stop_gradient(logp);
    let targets: Arc<[usize]> = targets.into();
    let t = g.derived(
        frozen,
        "soft_target",
        Arc::new(move |lp: &Array| soft_targets(lp, &targets, k, lambda_bst, belief_temperature)),
    )?;
    let prod = g.mul(t, logp)?;
    let lens: Vec<usize> = lens.iter().map(|l| l * vocab).collect();
    g.segment_sum(prod, &lens)
}

/// One of the base losses usable inside BS-S.
fn base_term(
    g: &mut Graph,
    m: &ModelVars,
    cfg: &LossConfig,
    kind: LossKind,
    batch: &[Example],
    reference: Option<&ParamStore>,
) -> Result<LossValue> {
    match kind {
        LossKind::Ga => loss_ga(g, m, batch),
        LossKind::Npo => loss_npo(g, m, require_ref(reference)?, batch, cfg.beta),
        LossKind::Wga => loss_wga(g, m, batch, cfg.alpha),
        LossKind::Bst => loss_bst(g, m, batch, cfg.lambda_bst, cfg.k, cfg.belief_temperature),
        LossKind::Graddiff | LossKind::Bss => Err(Error::Config(format!(
            "{} cannot be a base loss",
            kind.as_str()
        ))),
    }
}

fn require_ref(reference: Option<&ParamStore>) -> Result<&ParamStore> {
    reference.ok_or_else(|| Error::Config("this loss needs a frozen reference checkpoint".into()))
}

/// Prompt/response pairs of augmented sets, aligned with the batch ids.
pub fn augmented_examples(
    batch: &[Example],
    batch_ids: &[&str],
    augmented: &[AugmentedSet],
) -> Result<Vec<Example>> {
    if augmented.len() != batch.len() || batch_ids.len() != batch.len() {
        return Err(Error::Data(format!(
            "{} augmented sets for a batch of {}",
            augmented.len(),
            batch.len()
        )));
    }
    let mut out = Vec::new();
    for ((ex, id), set) in batch.iter().zip(batch_ids).zip(augmented) {
        if set.prompt_id != *id {
            return Err(Error::Data(format!(
                "augmented set for {:?} is aligned with record {id:?}",
                set.prompt_id
            )));
        }
        if set.responses.is_empty() {
            return Err(Error::Data(format!("augmented set {id:?} has no responses")));
        }
        for r in &set.responses {
            out.push(Example::new(ex.prompt.clone(), r.clone()));
        }
    }
    Ok(out)
}

/// `(1−λ)·L_base(batch) + λ·L_base(augmented batch)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_bss(
    g: &mut Graph,
    m: &ModelVars,
    forget: &[Example],
    batch_ids: &[&str],
    augmented: &[AugmentedSet],
    lambda_bss: f64,
    base: &LossConfig,
    reference: Option<&ParamStore>,
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&lambda_bss) {
        return Err(Error::Config(format!("lambda_bss must be in [0,1], got {lambda_bss}")));
    }
    non_empty(forget, "forget")?;
    let aug = augmented_examples(forget, batch_ids, augmented)?;
    let orig = base_term(g, m, base, base.base_loss, forget, reference)?;
    let extra = base_term(g, m, base, base.base_loss, &aug, reference)?;
    let a = g.scale(orig.scalar, 1.0 - lambda_bss);
    let b = g.scale(extra.scalar, lambda_bss);
    let s = g.add(a, b)?;
    Ok(LossValue {
        scalar: s,
        diagnostics: Diagnostics {
            forget_term: orig.diagnostics.total,
            aug_term: extra.diagnostics.total,
            forget_weight: 1.0 - lambda_bss,
            aug_weight: lambda_bss,
            total: g.value(s).item(),
            ..Diagnostics::default()
        },
    })
}

/// Everything a configured loss may need for one step.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub forget: &'a [Example],
    pub forget_ids: &'a [&'a str],
    pub retain: &'a [Example],
    pub reference: Option<&'a ParamStore>,
    pub augmented: Option<&'a [AugmentedSet]>,
}

/// The configured objective plus `lambda_retain`·retain NLL. GradDiff
/// always includes the retain term; other kinds only when `lambda_retain > 0`.
pub fn build_loss(g: &mut Graph, m: &ModelVars, cfg: &LossConfig, inputs: LossInputs<'_>) -> Result<LossValue> {
    cfg.validate(m.arch.vocab_size)?;
    let forget = match cfg.kind {
        LossKind::Ga | LossKind::Graddiff => loss_ga(g, m, inputs.forget)?,
        LossKind::Npo => loss_npo(g, m, require_ref(inputs.reference)?, inputs.forget, cfg.beta)?,
        LossKind::Wga => loss_wga(g, m, inputs.forget, cfg.alpha)?,
        LossKind::Bst => loss_bst(g, m, inputs.forget, cfg.lambda_bst, cfg.k, cfg.belief_temperature)?,
        LossKind::Bss => {
            let aug = inputs
                .augmented
                .ok_or_else(|| Error::Data("bss needs augmented sets".into()))?;
            loss_bss(g, m, inputs.forget, inputs.forget_ids, aug, cfg.lambda_bss, cfg, inputs.reference)?
        }
    };
    if cfg.kind == LossKind::Graddiff || cfg.lambda_retain > 0.0 {
        let r = loss_retain(g, m, inputs.retain)?;
        with_retain(g, forget, r, cfg.lambda_retain)
    } else {
        Ok(forget)
    }
}
