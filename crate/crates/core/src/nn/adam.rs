use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate once per `decay_period` epochs.
    pub lr_decay: f64,
    pub decay_period: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.5,
            decay_period: 20,
        }
    }
}

impl AdamConfig {
    /// Step schedule: `lr · lr_decay^⌊epoch / decay_period⌋`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let periods = epoch / self.decay_period.max(1);
        self.lr * self.lr_decay.powi(periods as i32)
    }
}

/// Adam moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update of every parameter at learning rate `lr`.
    ///
    /// Every parameter must carry a gradient; nothing is modified otherwise.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.params().len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
