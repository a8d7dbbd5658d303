//! Learning-dynamics oracles on small models: the softmax Jacobian `A`,
//! residuals `G`, the empirical NTK `K`, the one-step prediction
//! `Δlog π ≈ −η·A·K·G`, and likelihood-band squeezing traces.
//!
//! Residuals follow `G ≜ ∇_z(loss minimized)`. With the forget losses
//! written as log-likelihoods this gives `G_ga = e_y − π` and
//! `G_bst = t − π`.

mod squeeze;


pub use squeeze::{
    assign_bands, squeeze_trace, write_bands_csv, Band, BandTrace, CandidateSource, SqueezeResult, BANDS_CSV_COLUMNS,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph};
use crate::beliefs::{soft_target, topk_belief_smoothed, BeliefDistribution};
use crate::error::{Error, Result};
use crate::lm::{head, hidden_packed, Example, ParamStore, TokenDistribution, TokenId, TokenSequence};
use crate::objectives::{loss_bst, loss_ga, LossValue};

/// Largest model for which explicit per-parameter Jacobians are formed.
pub const DEFAULT_PARAM_CAP: usize = 20_000;

/// A prompt/response pair `χ = [x; y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chi {
    pub prompt: TokenSequence,
    pub response: TokenSequence,
}

impl Chi {
    pub fn new(prompt: TokenSequence, response: TokenSequence) -> Self {
        Chi { prompt, response }
    }

    pub fn tokens(&self) -> TokenSequence {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }

    pub fn example(&self) -> Example {
        Example::new(self.prompt.clone(), self.response.clone())
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if self.prompt.is_empty() || self.response.is_empty() {
            return Err(Error::Contract("chi needs a non-empty prompt and response".into()));
        }
        let len = self.prompt.len() + self.response.len();
        if len > params.arch.context_len {
            return Err(Error::Length {
                len,
                context_len: params.arch.context_len,
            });
        }
        Ok(())
    }

    /// Logit row predicting response token `pos`.
    fn row(&self, pos: usize) -> Result<usize> {
        if pos >= self.response.len() {
            return Err(Error::Contract(format!(
                "position {pos} outside a response of {} tokens",
                self.response.len()
            )));
        }
        Ok(self.prompt.len() - 1 + pos)
    }
}

/// `A = I − 1·πᵀ`, the Jacobian of `log π` with respect to the logits.
pub fn softmax_jacobian(dist: &TokenDistribution) -> Array {
    let v = dist.probs.len();
    let mut a = Array::zeros(&[v, v]);
    let d = a.data_mut();
    for i in 0..v {
        for j in 0..v {
            d[i * v + j] = if i == j { 1.0 } else { 0.0 } - dist.probs[j];
        }
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    Ga,
    Bst,
}

/// `∇_z` of the per-position forget term: `e_y − π` for GA, `t − π` for
/// BS-T with `t = (1−λ)·e_y + λ·q`.
pub fn residual(
    kind: ResidualKind,
    dist: &TokenDistribution,
    target_id: TokenId,
    belief: Option<&BeliefDistribution>,
    lambda_bst: Option<f64>,
) -> Result<Vec<f64>> {
    let v = dist.probs.len();
    if target_id as usize >= v {
        return Err(Error::TokenOutOfRange {
            id: target_id as usize,
            vocab_size: v,
        });
    }
    let target = match kind {
        ResidualKind::Ga => {
            let mut e = vec![0.0; v];
            e[target_id as usize] = 1.0;
            e
        }
        ResidualKind::Bst => {
            let (Some(belief), Some(lambda)) = (belief, lambda_bst) else {
                return Err(Error::Contract("the bst residual needs a belief and lambda_bst".into()));
            };
            if belief.probs.len() != v {
                return Err(Error::Dimension(format!(
                    "belief over {} tokens for a vocabulary of {v}",
                    belief.probs.len()
                )));
            }
            soft_target(belief, target_id, lambda)?.probs
        }
    };
    Ok(target.iter().zip(&dist.probs).map(|(t, p)| t - p).collect())
}

fn check_cap(params: &ParamStore, cap: usize) -> Result<()> {
    let n = params.param_count();
    if n > cap {
        return Err(Error::Capability(format!(
            "explicit Jacobians need ≤ {cap} parameters, model has {n}"
        )));
    }
    Ok(())
}

/// `∂z/∂θ` at response position `pos` of `chi`, as a `[V, P]` array in
/// [`ParamStore::flatten`] order.
pub fn logit_jacobian(params: &ParamStore, chi: &Chi, pos: usize, cap: usize) -> Result<Array> {
    check_cap(params, cap)?;
    chi.check(params)?;
    let row = chi.row(pos)?;
    let mut g = Graph::new();
    let m = params.bind(&mut g, true)?;
    let tokens = chi.tokens();
    let h = hidden_packed(&mut g, &m, &[&tokens])?;
    let z = head(&mut g, &m, h)?;
    let zr = g.gather_rows(z, &[row])?;
    let v = params.arch.vocab_size;
    let leaves = m.leaves();
    let mut out = Vec::with_capacity(v * params.param_count());
    for t in 0..v {
        let pick = g.pick_cols(zr, &[t])?;
        let s = g.sum(pick);
        for a in g.grad(s, &leaves)? {
            out.extend_from_slice(a.data());
        }
    }
    Array::new(vec![v, params.param_count()], out)
}

/// Empirical NTK block `K = J_a·J_bᵀ` between two positions.
pub fn entk_block(
    params: &ParamStore,
    chi_a: &Chi,
    chi_b: &Chi,
    pos_a: usize,
    pos_b: usize,
    cap: usize,
) -> Result<Array> {
    let ja = logit_jacobian(params, chi_a, pos_a, cap)?;
    let jb = logit_jacobian(params, chi_b, pos_b, cap)?;
    ja.matmul_nt(&jb)
}

/// Loss taken on `χ_u` by [`akg_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AkgLoss {
    Ga,
    Bst { lambda_bst: f64, k: usize },
    /// Zero loss; both predicted and actual changes vanish.
    Null,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    /// Response position of `χ_o`.
    pub position: usize,
    /// Softmax Jacobian at `χ_o`, `[V, V]`.
    pub a: Array,
    /// Residuals at every response position of `χ_u`, `[len_u, V]`.
    pub g: Array,
    /// `K(χ_o, χ_u)` blocks for every `χ_u` position, `[len_u, V, V]`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k_block: Option<Array>,
    pub predicted_delta_logpi: Vec<f64>,
    pub actual_delta_logpi: Vec<f64>,
    /// `max_v |actual − predicted|`.
    pub first_order_error: f64,
    pub eta: f64,
}

fn log_probs_at(params: &ParamStore, chi: &Chi) -> Result<Vec<Vec<f64>>> {
    let tokens = chi.tokens();
    let logits = crate::lm::forward_logits(params, &tokens)?;
    (0..chi.response.len())
        .map(|pos| {
            let r = chi.row(pos)?;
            let mut out = vec![0.0; params.arch.vocab_size];
            crate::autodiff::kernels::log_softmax_row(logits.values().row(r), &mut out);
            Ok(out)
        })
        .collect()
}

fn loss_on(g: &mut Graph, params: &ParamStore, chi_u: &Chi, loss: AkgLoss) -> Result<(LossValue, Vec<crate::autodiff::Var>)> {
    let m = params.bind(g, true)?;
    let batch = [chi_u.example()];
    let lv = match loss {
        AkgLoss::Ga => loss_ga(g, &m, &batch)?,
        AkgLoss::Bst { lambda_bst, k } => loss_bst(g, &m, &batch, lambda_bst, k, 1.0)?,
        AkgLoss::Null => {
            let base = loss_ga(g, &m, &batch)?;
            let zero = g.scale(base.scalar, 0.0);
            LossValue {
                scalar: zero,
                diagnostics: Default::default(),
            }
        }
    };
    Ok((lv, m.leaves()))
}

/// Residuals of `loss` at every response position of `chi_u`.
fn residuals_on(params: &ParamStore, chi_u: &Chi, loss: AkgLoss) -> Result<Array> {
    let v = params.arch.vocab_size;
    let lps = log_probs_at(params, chi_u)?;
    let mut out = Vec::with_capacity(lps.len() * v);
    for (pos, lp) in lps.iter().enumerate() {
        let dist = TokenDistribution::from_log_probs(lp);
        let y = chi_u.response[pos];
        let r = match loss {
            AkgLoss::Ga => residual(ResidualKind::Ga, &dist, y, None, None)?,
            AkgLoss::Bst { lambda_bst, k } => {
                let belief = topk_belief_smoothed(&dist.probs, k, 1.0)?;
                residual(ResidualKind::Bst, &dist, y, Some(&belief), Some(lambda_bst))?
            }
            AkgLoss::Null => vec![0.0; v],
        };
        out.extend(r);
    }
    Array::new(vec![lps.len(), v], out)
}

/// One-step check of `Δlog π(·|χ_o) = −η·A·K·G + O(η²)` for a plain SGD
/// step on `loss` over `χ_u`, reported at every response position of `χ_o`.
///
/// The prediction is evaluated as `−η·A_o·J_o·∇_θL`, which equals
/// `−η·A_o·Σ_j K(o, j)·G_j` because `∇_θL = Σ_j J_jᵀ·G_j`. With
/// `with_kernel` the blocks `K(o, j)` are also formed and reported.
pub fn akg_check(
    params: &ParamStore,
    chi_u: &Chi,
    chi_o: &Chi,
    loss: AkgLoss,
    eta: f64,
    cap: usize,
    with_kernel: bool,
) -> Result<Vec<DynamicsReport>> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("eta must be > 0, got {eta}")));
    }
    check_cap(params, cap)?;
    chi_u.check(params)?;
    chi_o.check(params)?;

    let mut g = Graph::new();
    let (lv, leaves) = loss_on(&mut g, params, chi_u, loss)?;
    let mut grad = Vec::with_capacity(params.param_count());
    for a in g.grad(lv.scalar, &leaves)? {
        grad.extend_from_slice(a.data());
    }
    let residuals = residuals_on(params, chi_u, loss)?;

    let mut stepped = params.clone();
    let theta: Vec<f64> = params.flatten().iter().zip(&grad).map(|(t, d)| t - eta * d).collect();
    stepped.assign_flat(&theta)?;
    let before = log_probs_at(params, chi_o)?;
    let after = log_probs_at(&stepped, chi_o)?;

    let v = params.arch.vocab_size;
    let mut reports = Vec::with_capacity(chi_o.response.len());
    for pos in 0..chi_o.response.len() {
        let jo = logit_jacobian(params, chi_o, pos, cap)?;
        let dz: Vec<f64> = (0..v)
            .map(|t| -eta * jo.row(t).iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let dist = TokenDistribution::from_log_probs(&before[pos]);
        let a = softmax_jacobian(&dist);
        let predicted: Vec<f64> = (0..v)
            .map(|i| a.row(i).iter().zip(&dz).map(|(x, y)| x * y).sum())
            .collect();
        let actual: Vec<f64> = after[pos].iter().zip(&before[pos]).map(|(x, y)| x - y).collect();
        let first_order_error = actual
            .iter()
            .zip(&predicted)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let k_block = if with_kernel {
            let mut data = Vec::with_capacity(chi_u.response.len() * v * v);
            for j in 0..chi_u.response.len() {
                let ju = logit_jacobian(params, chi_u, j, cap)?;
                data.extend_from_slice(jo.matmul_nt(&ju)?.data());
            }
            Some(Array::new(vec![chi_u.response.len(), v, v], data)?)
        } else {
            None
        };
        reports.push(DynamicsReport {
            position: pos,
            a,
            g: residuals.clone(),
            k_block,
            predicted_delta_logpi: predicted,
            actual_delta_logpi: actual,
            first_order_error,
            eta,
        });
    }
    Ok(reports)
}

/// Least-squares slope of `ln error` against `ln η`.
pub fn error_slope(etas: &[f64], errors: &[f64]) -> Result<f64> {
    if etas.len() != errors.len() || etas.len() < 2 {
        return Err(Error::Contract("slope fit needs ≥ 2 paired points".into()));
    }
    if etas.iter().chain(errors).any(|&x| !(x > 0.0)) {
        return Err(Error::Data("slope fit needs positive step sizes and errors".into()));
    }
    let xs: Vec<f64> = etas.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
