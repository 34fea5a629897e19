//! Gaussian policy heads: sampling, log-densities and their derivatives
//! with respect to the head outputs.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array1, Array2};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Splits a Gaussian head output `[mean | raw log-std]` and clamps the
/// log-std. `free` is 1 where the clamp is inactive (gradient passes).
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    pub free: Array2<f64>,
}

impl GaussianHead {
    pub fn from_output(output: &Array2<f64>) -> Self {
        let k = output.ncols() / 2;
        let mean = output.slice(s![.., ..k]).to_owned();
        let raw = output.slice(s![.., k..]).to_owned();
        let free = raw.mapv(|v| {
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) {
                1.0
            } else {
                0.0
            }
        });
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Self {
            mean,
            log_std,
            free,
        }
    }

    pub fn std(&self) -> Array2<f64> {
        self.log_std.mapv(f64::exp)
    }

    /// Joins mean and log-std gradients into a head-output gradient,
    /// dropping the log-std part where the clamp is active.
    pub fn join_grad(&self, d_mean: &Array2<f64>, d_log_std: &Array2<f64>) -> Array2<f64> {
        let k = self.mean.ncols();
        let mut out = Array2::zeros((self.mean.nrows(), 2 * k));
        out.slice_mut(s![.., ..k]).assign(d_mean);
        out.slice_mut(s![.., k..]).assign(&(d_log_std * &self.free));
        out
    }
}

/// Reparameterized tanh-squashed sample `a = tanh(μ + σ ε)`.
#[derive(Debug, Clone)]
pub struct SquashedSample {
    pub pre_tanh: Array2<f64>,
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
}

/// Log-density of the squashed sample, using
/// `log(1 - tanh(u)²) = 2 (ln 2 - u - softplus(-2u))`.
pub fn squashed_sample(head: &GaussianHead, eps: &Array2<f64>) -> SquashedSample {
    let std = head.std();
    let pre_tanh = &head.mean + &(&std * eps);
    let action = pre_tanh.mapv(f64::tanh);
    let mut log_prob = Array1::zeros(pre_tanh.nrows());
    for (r, lp) in log_prob.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..pre_tanh.ncols() {
            let u = pre_tanh[[r, c]];
            let e = eps[[r, c]];
            acc += -0.5 * e * e
                - head.log_std[[r, c]]
                - HALF_LOG_2PI
                - 2.0 * (LN_2 - u - softplus(-2.0 * u));
        }
        *lp = acc;
    }
    SquashedSample {
        pre_tanh,
        action,
        log_prob,
    }
}

/// Derivatives of `log π(a)` of a squashed reparameterized sample with the
/// noise held fixed: `∂/∂μ = 2 tanh(u)`, `∂/∂log σ = -1 + 2 tanh(u) σ ε`.
pub fn squashed_log_prob_grads(
    head: &GaussianHead,
    sample: &SquashedSample,
    eps: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d_mean = sample.action.mapv(|a| 2.0 * a);
    let sigma_eps = head.std() * eps;
    let d_log_std = &d_mean * &sigma_eps - 1.0;
    (d_mean, d_log_std)
}

/// Log-density of an unsquashed diagonal Gaussian.
pub fn gaussian_log_prob(head: &GaussianHead, action: &Array2<f64>) -> Array1<f64> {
    let var = head.log_std.mapv(|l| (2.0 * l).exp());
    let mut out = Array1::zeros(action.nrows());
    for (r, lp) in out.iter_mut().enumerate() {
        *lp = (0..action.ncols())
            .map(|c| {
                let d = action[[r, c]] - head.mean[[r, c]];
                -0.5 * d * d / var[[r, c]] - head.log_std[[r, c]] - HALF_LOG_2PI
            })
            .sum();
    }
    out
}

/// `(∂ log π / ∂μ, ∂ log π / ∂ log σ)` for an unsquashed Gaussian.
pub fn gaussian_log_prob_grads(
    head: &GaussianHead,
    action: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let var = head.log_std.mapv(|l| (2.0 * l).exp());
    let diff = action - &head.mean;
    let d_mean = &diff / &var;
    let d_log_std = (&diff * &diff) / &var - 1.0;
    (d_mean, d_log_std)
}

/// Differential entropy of a diagonal Gaussian, per row.
pub fn gaussian_entropy(head: &GaussianHead) -> Array1<f64> {
    let per_dim = 0.5 * (1.0 + (2.0 * PI).ln());
    head.log_std
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|l| l + per_dim).sum())
        .collect()
}
