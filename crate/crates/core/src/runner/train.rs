use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::lm::{ModelVars, ParamStore};
use crate::objectives::{Diagnostics, LossValue};

use super::optim::AdamW;

/// Builds a loss on a fresh graph and applies one AdamW update to
/// `params`. Returns the loss diagnostics before the update.
pub fn train_step<F>(params: &mut ParamStore, opt: &mut AdamW, lr: f64, build: F) -> Result<Diagnostics>
where
    F: FnOnce(&mut Graph, &ModelVars) -> Result<LossValue>,
{
    let mut g = Graph::new();
    let m = params.bind(&mut g, true)?;
    let loss = build(&mut g, &m)?;
    if !loss.diagnostics.total.is_finite() {
        return Err(Error::Data(format!("loss became non-finite ({})", loss.diagnostics.total)));
    }
    let mut grads = g.backward(loss.scalar)?;
    let mut flat_grad = Vec::with_capacity(params.param_count());
    for leaf in m.leaves() {
        match grads.take(leaf) {
            Some(a) => flat_grad.extend_from_slice(a.data()),
            None => flat_grad.extend(std::iter::repeat_n(0.0, g.value(leaf).len())),
        }
    }
    let mut flat = params.flatten();
    opt.step(&mut flat, &flat_grad, lr);
    params.assign_flat(&flat)?;
    Ok(loss.diagnostics)
}
