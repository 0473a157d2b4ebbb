use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", config.lr)));
        }
        let zeros: Vec<Tensor<T>> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }

    /// One update; `grads[i]` pairs with the i-th parameter of the store.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} grads for {} params", grads.len(), self.m.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() || params.tensor(i).shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", params.tensor(i).shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let bc1: T = lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2: T = lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps): (T, T) = (lit(c.lr), lit(c.eps));
        let one = T::one();
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.numel() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
