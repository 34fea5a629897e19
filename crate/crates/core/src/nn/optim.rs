//! AdamW with decoupled weight decay restricted to weight matrices.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::network::{Grads, Network, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) step: u64,
    pub(crate) m: Vec<Array2<f64>>,
    pub(crate) v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, net: &Network) -> Self {
        let zeros: Vec<Array2<f64>> = net
            .params()
            .iter()
            .map(|p| Array2::zeros(p.value.dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Array2<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array2<f64>] {
        &self.v
    }

    pub fn second_moment_sum(&self) -> f64 {
        self.v.iter().map(|v| v.sum()).sum()
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|m| m.fill(0.0));
        self.v.iter_mut().for_each(|v| v.fill(0.0));
    }

    /// One update. Masked weight entries have zero gradient, so their
    /// moments stay zero and the decoupled decay keeps them at zero.
    pub fn apply(&mut self, net: &mut Network, grads: &Grads) {
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((param, g), m), v) in net
            .params_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if param.kind == ParamKind::Weight {
                weight_decay
            } else {
                0.0
            };
            Zip::from(&mut *param.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *w -= lr * (update + decay * *w);
                });
        }
    }
}

/// Adam on a single scalar (used for the SAC log-temperature).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub lr: f64,
    pub step: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    pub fn apply(&mut self, value: &mut f64, grad: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        self.m = B1 * self.m + (1.0 - B1) * grad;
        self.v = B2 * self.v + (1.0 - B2) * grad * grad;
        let mhat = self.m / (1.0 - B1.powi(self.step as i32));
        let vhat = self.v / (1.0 - B2.powi(self.step as i32));
        *value -= self.lr * mhat / (vhat.sqrt() + 1e-8);
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m = 0.0;
        self.v = 0.0;
    }
}
