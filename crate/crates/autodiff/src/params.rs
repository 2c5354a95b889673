use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backward;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::tensor::Tensor;

/// Named parameter tensors of one model, in a fixed architecture-defined order.
///
/// `buffers` carry non-trainable state such as normalization running
/// statistics; they are never differentiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub arch: String,
    pub params: IndexMap<String, Tensor>,
    #[serde(default)]
    pub buffers: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(arch: impl Into<String>) -> Self {
        ParamSet {
            arch: arch.into(),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "parameter layouts differ ({} vs {})",
                self.arch, other.arch
            )))
        }
    }

    /// Wraps every parameter as a differentiable variable.
    pub fn variables(&self) -> ParamExprs {
        self.variables_where(|_| true)
    }

    /// Parameters selected by `trainable` become variables, the rest constants.
    pub fn variables_where(&self, trainable: impl Fn(&str) -> bool) -> ParamExprs {
        ParamExprs {
            arch: self.arch.clone(),
            exprs: self
                .params
                .iter()
                .map(|(k, v)| {
                    let e = if trainable(k) {
                        Expr::variable(v.clone())
                    } else {
                        Expr::constant(v.clone())
                    };
                    (k.clone(), e)
                })
                .collect(),
        }
    }

    pub fn constants(&self) -> ParamExprs {
        self.variables_where(|_| false)
    }

    /// Squared L2 distance summed over all parameters.
    pub fn squared_distance(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        let mut total = 0.0;
        for (a, b) in self.params.values().zip(other.params.values()) {
            total += a.squared_distance(b)?;
        }
        Ok(total)
    }

    /// Applies `f(name, value) -> new value` to each parameter.
    pub fn map_params(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let mut out = ParamSet::new(self.arch.clone());
        out.buffers = self.buffers.clone();
        for (k, v) in &self.params {
            let nv = f(k, v)?;
            if nv.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "map_params",
                    left: v.shape().to_vec(),
                    right: nv.shape().to_vec(),
                });
            }
            out.params.insert(k.clone(), nv);
        }
        Ok(out)
    }
}

/// Graph handles for a [`ParamSet`], e.g. the variables Θ or adapted Θ′.
#[derive(Debug, Clone)]
pub struct ParamExprs {
    pub arch: String,
    pub exprs: IndexMap<String, Expr>,
}

impl ParamExprs {
    pub fn get(&self, name: &str) -> Result<&Expr> {
        self.exprs
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.exprs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    /// Current values, with `buffers` attached.
    pub fn values(&self, buffers: &IndexMap<String, Tensor>) -> ParamSet {
        ParamSet {
            arch: self.arch.clone(),
            params: self.exprs.iter().map(|(k, e)| (k.clone(), e.value().clone())).collect(),
            buffers: buffers.clone(),
        }
    }

    /// Expressions that are differentiable (variables or derived from them).
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Expr)> {
        self.iter().filter(|(_, e)| e.requires_grad())
    }

    /// Builds `self − step · direction` per parameter; names absent from
    /// `direction` are carried over unchanged.
    pub fn descend(&self, direction: &IndexMap<String, Expr>, step: f64) -> Result<ParamExprs> {
        let mut exprs = IndexMap::with_capacity(self.exprs.len());
        for (k, e) in &self.exprs {
            let next = match direction.get(k) {
                Some(d) => e.sub(&d.scale(step))?,
                None => e.clone(),
            };
            exprs.insert(k.clone(), next);
        }
        Ok(ParamExprs {
            arch: self.arch.clone(),
            exprs,
        })
    }
}

/// Gradient of a scalar with respect to every differentiable entry of
/// `params`. With `create_graph` the gradients are themselves differentiable.
///
/// Constant entries are skipped.
pub fn gradient(scalar: &Expr, params: &ParamExprs, create_graph: bool) -> Result<IndexMap<String, Expr>> {
    let (names, wrt): (Vec<&str>, Vec<Expr>) = params.trainable().map(|(k, e)| (k, e.clone())).unzip();
    let grads = backward::grad(scalar, &wrt, create_graph)?;
    Ok(names.into_iter().map(str::to_string).zip(grads).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new("toy");
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        p.insert("b", Tensor::scalar(0.5));
        p
    }

    #[test]
    fn order_is_insertion_order() {
        let names: Vec<_> = sample().names().map(str::to_string).collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn constants_are_skipped_by_gradient() {
        let p = sample();
        let vars = p.variables_where(|n| n == "w");
        let loss = vars.get("w").unwrap().sum().add(vars.get("b").unwrap()).unwrap();
        let g = gradient(&loss, &vars, false).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["w"].value().data(), &[1.0, 1.0]);
    }

    #[test]
    fn descend_moves_against_direction() {
        let p = sample();
        let vars = p.variables();
        let mut dir = IndexMap::new();
        dir.insert(
            "w".to_string(),
            Expr::constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()),
        );
        let next = vars.descend(&dir, 0.5).unwrap();
        assert_eq!(next.get("w").unwrap().value().data(), &[0.5, 2.5]);
        assert_eq!(next.get("b").unwrap().value().data(), &[0.5]);
    }
}
