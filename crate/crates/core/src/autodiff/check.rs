use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of `∂root/∂leaf`, every component.
///
/// Stop-gradient nodes stay frozen at their recorded values while the leaf
/// is perturbed, so the estimate targets the same function that
/// [`Graph::backward`] differentiates. The graph is restored on return.
pub fn finite_diff(g: &mut Graph, root: Var, leaf: Var, epsilon: f64) -> Result<Array> {
    let all: Vec<usize> = (0..g.value(leaf).len()).collect();
    let vals = finite_diff_at(g, root, leaf, &all, epsilon)?;
    Array::new(g.shape(leaf).to_vec(), vals)
}

/// Central differences for the selected flat components of `leaf` only.
pub fn finite_diff_at(
    g: &mut Graph,
    root: Var,
    leaf: Var,
    components: &[usize],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !g.value(root).is_scalar() {
        return Err(Error::Contract("finite_diff needs a scalar root".into()));
    }
    if !g.is_leaf(leaf) {
        return Err(Error::Contract("finite_diff perturbs leaves only".into()));
    }
    let mask = g.dependency_mask(leaf);
    let original = g.value(leaf).clone();
    let mut out = Vec::with_capacity(components.len());
    let eval_at = |g: &mut Graph, i: usize, x: f64| -> Result<f64> {
        let mut v = original.clone();
        v.data_mut()[i] = x;
        g.set_leaf(leaf, v)?;
        g.recompute_dependents(leaf, &mask)?;
        Ok(g.value(root).item())
    };
    for &i in components {
        let x0 = original.data()[i];
        let plus = eval_at(g, i, x0 + epsilon)?;
        let minus = eval_at(g, i, x0 - epsilon)?;
        out.push((plus - minus) / (2.0 * epsilon));
    }
    g.set_leaf(leaf, original)?;
    g.recompute_dependents(leaf, &mask)?;
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over paired components.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
