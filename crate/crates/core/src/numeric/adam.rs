use super::tape::{Gradients, ParamStore};
use super::tensor::Tensor2;
use crate::error::{D2kError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor2::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(D2kError::config(format!(
                "adam: {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (id, name, p) in params.iter() {
            let g = grads.get(id);
            if g.shape() != p.shape() {
                return Err(D2kError::config(format!(
                    "adam: gradient shape {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(D2kError::Training {
                    step: self.step as usize + 1,
                    msg: format!("non-finite gradient for parameter {name}"),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in 0..params.len() {
            let g = grads.get(id).data();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
