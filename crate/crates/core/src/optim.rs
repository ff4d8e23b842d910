//! Adam with decoupled weight decay.

use ndarray::Zip;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::reasoner::ModelParameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParameters) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.dim());
        Self {
            config,
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; a `None` gradient leaves moments untouched but still
    /// applies weight decay.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract("one gradient slot per parameter tensor"));
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            p.mapv_inplace(|w| w * (1.0 - lr * weight_decay));
            let Some(g) = &grads[i] else { continue };
            if g.dim() != p.dim() {
                return Err(Error::ShapeMismatch { expected: format!("{:?}", p.dim()), found: format!("{:?}", g.dim()) });
            }
            Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|w, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
