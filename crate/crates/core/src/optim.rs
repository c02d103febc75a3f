//! Adaptive-moment (Adam) optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Module;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor of `params` that has an entry in `grads`;
    /// all other tensors are left untouched.
    pub fn step<M: Module<S>>(&mut self, params: &mut M, grads: &Gradients<S>) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(t));
        let bc2 = S::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        let moments = &mut self.moments;
        params.visit("", &mut |name, value| {
            let Some(g) = grads.get(name) else { return Ok(()) };
            if g.shape() != value.shape() {
                return Err(Error::Param {
                    name: name.to_string(),
                    detail: format!("gradient {:?} vs parameter {:?}", g.shape(), value.shape()),
                });
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![S::zero(); g.len()], vec![S::zero(); g.len()]));
            let mut next = value.to_vec();
            for (i, (&gi, x)) in g.data().iter().zip(next.iter_mut()).enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *value = Tensor::new(value.shape().to_vec(), next)?;
            Ok(())
        })
    }
}
