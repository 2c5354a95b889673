//! Central finite differences, used as ground truth for gradient checks.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Estimates `∂f/∂θ` for every coordinate of every parameter as
/// `(f(θ + ε) − f(θ − ε)) / 2ε`.
pub fn finite_difference(
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    epsilon: f64,
) -> Result<IndexMap<String, Tensor>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let mut out = IndexMap::with_capacity(params.len());
    for (name, value) in params.iter() {
        let mut grad = Vec::with_capacity(value.len());
        for i in 0..value.len() {
            let plus = f(&perturbed(params, name, i, epsilon)?)?;
            let minus = f(&perturbed(params, name, i, -epsilon)?)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteEvaluation {
                    param: name.to_string(),
                    index: i,
                });
            }
            grad.push((plus - minus) / (2.0 * epsilon));
        }
        out.insert(name.to_string(), Tensor::new(value.shape().to_vec(), grad)?);
    }
    Ok(out)
}

fn perturbed(params: &ParamSet, name: &str, index: usize, delta: f64) -> Result<ParamSet> {
    let mut p = params.clone();
    let t = p.get(name)?;
    let mut data = t.to_vec();
    data[index] += delta;
    let shape = t.shape().to_vec();
    p.params.insert(name.to_string(), Tensor::new(shape, data)?);
    Ok(p)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all coordinates.
///
/// `floor` keeps near-zero coordinates from dominating the ratio.
pub fn max_relative_error(a: &IndexMap<String, Tensor>, b: &IndexMap<String, Tensor>, floor: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (name, ta) in a {
        let tb = b.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let rel = ta.zip_map(tb, |x, y| (x - y).abs() / x.abs().max(y.abs()).max(floor))?;
        worst = rel.data().iter().fold(worst, |m, &r| m.max(r));
    }
    Ok(worst)
}
