//! Adam with bias correction, keyed by parameter name.

use indexmap::IndexMap;
use metapred_autodiff::precision::round_in_place;
use metapred_autodiff::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates persist across steps; parameters without a gradient in
/// a step are left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    pub steps: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Adam {
            lr,
            config,
            steps: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamSet, grads: &IndexMap<String, Tensor>) -> Result<ParamSet> {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = params.clone();
        for (name, g) in grads {
            let theta = params.get(name)?;
            if g.shape() != theta.shape() {
                return Err(Error::InvalidConfig(format!("gradient of {name} has the wrong shape")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut next = theta.to_vec();
            for (((x, &gi), mi), vi) in next.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            round_in_place(&mut next);
            out.insert(name.clone(), Tensor::new(theta.shape().to_vec(), next)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(theta: f64) -> ParamSet {
        let mut p = ParamSet::new("s");
        p.insert("theta", Tensor::scalar(theta));
        p
    }

    fn grad(g: f64) -> IndexMap<String, Tensor> {
        IndexMap::from([("theta".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(0.001, AdamConfig::default());
        let p = adam.step(&one(1.0), &grad(1.0)).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        let expect = 1.0 - 0.001 / (1.0 + 1e-8);
        assert_eq!(p.get("theta").unwrap().item().unwrap(), expect);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(0.1, AdamConfig::default());
        let p = one(0.37);
        let q = adam.step(&p, &grad(0.0)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut p = one(1.0);
        p.insert("frozen", Tensor::scalar(5.0));
        let mut adam = Adam::new(0.1, AdamConfig::default());
        let q = adam.step(&p, &grad(1.0)).unwrap();
        assert_eq!(q.get("frozen").unwrap().item().unwrap(), 5.0);
        assert_ne!(q.get("theta").unwrap().item().unwrap(), 1.0);
    }
}
