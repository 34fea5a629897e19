//! Optimization-pathology metrics: feature rank, dormant neurons, activation
//! utilization, active-parameter norms, gradient covariance and the reset
//! schedule.

use std::io::Write;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Grads, Network};

pub const DEFAULT_DORMANT_TAU: f64 = 0.025;
pub const DEFAULT_SRANK_RELATIVE_TAU: f64 = 0.01;
pub const PROBE_BATCH: usize = 256;
/// Reset interval used when resets are requested without one.
pub const DEFAULT_RESET_INTERVAL: u64 = 200_000;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("feature matrix contains non-finite entries")]
    NonFinite,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("matrix must have at least one row and one column")]
    Empty,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("activation batch has no neurons")]
    NoNeurons,
}

/// Singular-value threshold for [`srank`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum SrankThreshold {
    Absolute(f64),
    /// Multiple of the largest singular value.
    Relative(f64),
}

impl Default for SrankThreshold {
    fn default() -> Self {
        Self::Relative(DEFAULT_SRANK_RELATIVE_TAU)
    }
}

pub fn singular_values(f: &Array2<f64>) -> Result<Vec<f64>, DiagnosticsError> {
    let (d, m) = f.dim();
    if d == 0 || m == 0 {
        return Err(DiagnosticsError::Empty);
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite);
    }
    let mat = DMatrix::from_fn(d, m, |i, j| f[[i, j]]);
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values of `f` strictly above the threshold.
pub fn srank(f: &Array2<f64>, threshold: SrankThreshold) -> Result<usize, DiagnosticsError> {
    let sv = singular_values(f)?;
    let tau = match threshold {
        SrankThreshold::Absolute(t) | SrankThreshold::Relative(t) if !(t > 0.0) => {
            return Err(DiagnosticsError::BadThreshold(t))
        }
        SrankThreshold::Absolute(t) => t,
        SrankThreshold::Relative(t) => t * sv[0],
    };
    Ok(sv.iter().filter(|&&s| s > tau).count())
}

/// Per-neuron mean absolute activation for one layer (`batch × width`).
fn mean_abs(layer: &Array2<f64>) -> Vec<f64> {
    let n = layer.nrows().max(1) as f64;
    layer
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / n)
        .collect()
}

/// Dormancy scores `ρ_i = mean|h_i| / mean_k mean|h_k|` for one layer. A
/// layer with no activity at all scores 0 everywhere.
pub fn dormancy_scores(layer: &Array2<f64>) -> Vec<f64> {
    let m = mean_abs(layer);
    let layer_mean = m.iter().sum::<f64>() / m.len().max(1) as f64;
    if layer_mean == 0.0 {
        return vec![0.0; m.len()];
    }
    m.iter().map(|v| v / layer_mean).collect()
}

/// Fraction of neurons, across all layers, with `ρ ≤ τ`.
pub fn dormant_ratio(layers: &[&Array2<f64>], tau: f64) -> Result<f64, DiagnosticsError> {
    let mut total = 0usize;
    let mut dormant = 0usize;
    for layer in layers {
        let scores = dormancy_scores(layer);
        total += scores.len();
        dormant += scores.iter().filter(|&&r| r <= tau).count();
    }
    if total == 0 {
        return Err(DiagnosticsError::NoNeurons);
    }
    Ok(dormant as f64 / total as f64)
}

/// Fraction of neurons that are positive on at least one probe.
pub fn fau(layers: &[&Array2<f64>]) -> f64 {
    let mut total = 0usize;
    let mut active = 0usize;
    for layer in layers {
        total += layer.ncols();
        active += layer
            .columns()
            .into_iter()
            .filter(|c| c.iter().any(|&v| v > 0.0))
            .count();
    }
    if total == 0 {
        0.0
    } else {
        active as f64 / total as f64
    }
}

/// L2 norm of the gradient over active weight entries and all biases and
/// normalization parameters.
pub fn grad_norm_active(net: &Network, grads: &Grads) -> f64 {
    net.params()
        .iter()
        .zip(&grads.0)
        .map(|(p, g)| match p.gate {
            Some(gate) => g.iter().zip(gate).map(|(g, m)| m * g * g).sum::<f64>(),
            None => g.iter().map(|g| g * g).sum(),
        })
        .sum::<f64>()
        .sqrt()
}

/// L2 norm of active weights and biases (normalization parameters are not
/// counted).
pub fn param_norm_active(net: &Network) -> f64 {
    use crate::nn::ParamKind;
    net.params()
        .iter()
        .filter(|p| matches!(p.kind, ParamKind::Weight | ParamKind::Bias))
        .map(|p| match p.gate {
            Some(gate) => p
                .value
                .iter()
                .zip(gate)
                .map(|(w, m)| m * w * w)
                .sum::<f64>(),
            None => p.value.iter().map(|w| w * w).sum(),
        })
        .sum::<f64>()
        .sqrt()
}

/// Cosine-similarity matrix of per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCovariance {
    pub matrix: Array2<f64>,
}

impl GradCovariance {
    pub fn from_vectors(grads: &[Vec<f64>]) -> Result<Self, DiagnosticsError> {
        let k = grads.len();
        if k < 2 {
            return Err(DiagnosticsError::TooFewSamples { need: 2, got: k });
        }
        let norms: Vec<f64> = grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut matrix = Array2::zeros((k, k));
        for i in 0..k {
            for j in i..k {
                let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                    0.0
                } else if i == j {
                    1.0
                } else {
                    let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                };
                matrix[[i, j]] = c;
                matrix[[j, i]] = c;
            }
        }
        Ok(Self { matrix })
    }

    pub fn from_grads(grads: &[Grads]) -> Result<Self, DiagnosticsError> {
        let flat: Vec<Vec<f64>> = grads.iter().map(Grads::flatten).collect();
        Self::from_vectors(&flat)
    }

    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let k = self.k();
        let sum: f64 = self
            .matrix
            .indexed_iter()
            .filter(|((i, j), _)| i != j)
            .map(|(_, v)| v.abs())
            .sum();
        sum / (k * (k - 1)) as f64
    }

    /// Header row `0..k`, then `k` rows of values.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.k();
        let header: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.matrix.rows() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Environment steps at which a periodic reset fires, strictly inside
/// `(0, total_steps)`.
pub fn reset_schedule(interval: u64, total_steps: u64) -> impl Iterator<Item = u64> {
    assert!(interval > 0, "reset interval must be positive");
    (1..)
        .map(move |i| i * interval)
        .take_while(move |&s| s < total_steps)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub srank: usize,
    pub dormant_ratio_actor: f64,
    pub dormant_ratio_critic: f64,
    /// Pooled over the hidden layers of both networks.
    pub fau: f64,
    pub grad_norm_actor: f64,
    pub grad_norm_critic: f64,
    pub param_norm_actor: f64,
    pub param_norm_critic: f64,
    pub cov_offdiag_mean: f64,
}

impl DiagnosticsRecord {
    /// `(metric, value)` pairs in logging order.
    pub fn metrics(&self) -> [(&'static str, f64); 9] {
        [
            ("srank", self.srank as f64),
            ("dormant_ratio_actor", self.dormant_ratio_actor),
            ("dormant_ratio_critic", self.dormant_ratio_critic),
            ("fau", self.fau),
            ("grad_norm_actor", self.grad_norm_actor),
            ("grad_norm_critic", self.grad_norm_critic),
            ("param_norm_actor", self.param_norm_actor),
            ("param_norm_critic", self.param_norm_critic),
            ("cov_offdiag_mean", self.cov_offdiag_mean),
        ]
    }
}

/// Settings for [`measure`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    pub srank_threshold: SrankThreshold,
    pub dormant_tau: f64,
    /// Number of per-sample gradients in the covariance matrix.
    pub covariance_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            srank_threshold: SrankThreshold::default(),
            dormant_tau: DEFAULT_DORMANT_TAU,
            covariance_samples: 32,
        }
    }
}

/// Computes every metric for `agent` on a probe batch of transitions.
/// Gradient norms come from the most recent training update when given.
/// Pure: no agent state changes.
pub fn measure(
    agent: &dyn crate::agents::Agent,
    probe: &[crate::agents::Transition],
    last: Option<&crate::agents::LossRecord>,
    step: u64,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsRecord, crate::agents::AgentError> {
    use crate::agents::Batch;
    let batch = Batch::from_transitions(probe);
    let actor_fwd = agent.actor().forward(&batch.states, None)?;
    let critic_action = agent.critic().spec().head == crate::nn::Head::ActionValue;
    let critic_fwd = agent
        .critic()
        .forward(&batch.states, critic_action.then_some(&batch.actions))?;

    let srank_value = srank(critic_fwd.cache.features(), config.srank_threshold).unwrap_or(0);
    let ratio = |acts: Vec<&Array2<f64>>| dormant_ratio(&acts, config.dormant_tau).unwrap_or(1.0);

    let k = config.covariance_samples.min(probe.len());
    let sample_grads = agent.critic_sample_grads(&probe[..k])?;
    let mut mean_grad = Grads::zeros_like(agent.critic());
    for g in &sample_grads {
        mean_grad.add_scaled(1.0 / k.max(1) as f64, g);
    }
    let cov = GradCovariance::from_grads(&sample_grads)
        .map(|c| c.mean_abs_off_diagonal())
        .unwrap_or(0.0);

    Ok(DiagnosticsRecord {
        step,
        srank: srank_value,
        dormant_ratio_actor: ratio(actor_fwd.cache.hidden_activations()),
        dormant_ratio_critic: ratio(critic_fwd.cache.hidden_activations()),
        fau: fau(&[
            actor_fwd.cache.hidden_activations(),
            critic_fwd.cache.hidden_activations(),
        ]
        .concat()),
        grad_norm_actor: last.map_or(0.0, |l| l.grad_norm_actor),
        grad_norm_critic: last.map_or_else(
            || grad_norm_active(agent.critic(), &mean_grad),
            |l| l.grad_norm_critic,
        ),
        param_norm_actor: param_norm_active(agent.actor()),
        param_norm_critic: param_norm_active(agent.critic()),
        cov_offdiag_mean: cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn srank_of_identity_and_rank_one() {
        let eye = Array2::<f64>::eye(4);
        assert_eq!(srank(&eye, SrankThreshold::Absolute(0.5)).unwrap(), 4);
        let u = array![1.0, 2.0, -1.0];
        let v = array![0.5, 3.0];
        let outer = Array2::from_shape_fn((3, 2), |(i, j)| u[i] * v[j]);
        assert_eq!(srank(&outer, SrankThreshold::Absolute(0.1)).unwrap(), 1);
        assert_eq!(srank(&outer, SrankThreshold::Relative(0.01)).unwrap(), 1);
    }

    #[test]
    fn srank_rejects_bad_input() {
        let eye = Array2::<f64>::eye(2);
        assert_eq!(
            srank(&eye, SrankThreshold::Absolute(0.0)),
            Err(DiagnosticsError::BadThreshold(0.0))
        );
        let mut bad = eye.clone();
        bad[[0, 1]] = f64::NAN;
        assert_eq!(
            srank(&bad, SrankThreshold::Absolute(0.1)),
            Err(DiagnosticsError::NonFinite)
        );
    }

    #[test]
    fn dormant_hand_case() {
        // Column mean |h| = (0.1, 1.0, 1.9).
        let acts = array![[0.1, 1.0, 1.8], [0.1, 1.0, 2.0]];
        let scores = dormancy_scores(&acts);
        for (s, e) in scores.iter().zip([0.1, 1.0, 1.9]) {
            assert!((s - e).abs() < 1e-12);
        }
        assert_eq!(dormant_ratio(&[&acts], 0.2).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn dormant_edge_cases() {
        let same = Array2::from_elem((4, 5), 0.7);
        assert_eq!(dormant_ratio(&[&same], 0.99).unwrap(), 0.0);
        let mut one_dead = same.clone();
        one_dead.column_mut(2).fill(0.0);
        assert_eq!(
            dormant_ratio(&[&one_dead], DEFAULT_DORMANT_TAU).unwrap(),
            0.2
        );
        let dead = Array2::zeros((3, 4));
        assert_eq!(dormant_ratio(&[&dead], 0.0).unwrap(), 1.0);
        assert_eq!(dormant_ratio(&[], 0.1), Err(DiagnosticsError::NoNeurons));
    }

    #[test]
    fn fau_counts() {
        assert_eq!(fau(&[&Array2::from_elem((3, 4), 1.0)]), 1.0);
        assert_eq!(fau(&[&Array2::zeros((3, 4))]), 0.0);
        let mut acts = Array2::zeros((5, 8));
        acts[[0, 1]] = 0.3;
        acts[[4, 5]] = 2.0;
        acts[[2, 7]] = 1e-9;
        assert_eq!(fau(&[&acts]), 0.375);
    }

    #[test]
    fn covariance_basics() {
        let g = vec![
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0],
        ];
        let c = GradCovariance::from_vectors(&g).unwrap();
        assert_eq!(c.matrix[[0, 2]], 1.0);
        assert_eq!(c.matrix[[0, 1]], 0.0);
        assert_eq!(c.matrix[[3, 3]], 0.0);
        assert_eq!(c.matrix[[1, 1]], 1.0);
        assert!(GradCovariance::from_vectors(&g[..1]).is_err());
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("0,1,2,3"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn reset_schedule_arithmetic() {
        let v: Vec<u64> = reset_schedule(200_000, 1_000_000).collect();
        assert_eq!(v, vec![200_000, 400_000, 600_000, 800_000]);
        assert_eq!(reset_schedule(5000, 1000).count(), 0);
    }

    proptest! {
        #[test]
        fn srank_bounded_and_monotone(
            d in 1usize..8, m in 1usize..8, seed in any::<u64>(), t1 in 0.01f64..2.0, t2 in 0.01f64..2.0,
        ) {
            let mut rng = crate::rng::stream_rng(seed, "prop");
            use rand::Rng;
            let f = Array2::from_shape_fn((d, m), |_| rng.random_range(-1.0..1.0));
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let a = srank(&f, SrankThreshold::Absolute(lo)).unwrap();
            let b = srank(&f, SrankThreshold::Absolute(hi)).unwrap();
            prop_assert!(a <= d.min(m));
            prop_assert!(b <= a);
        }

        #[test]
        fn dormant_ratio_monotone_in_tau(
            vals in proptest::collection::vec(-3.0f64..3.0, 12), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0,
        ) {
            let acts = Array2::from_shape_vec((3, 4), vals).unwrap();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let a = dormant_ratio(&[&acts], lo).unwrap();
            let b = dormant_ratio(&[&acts], hi).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a <= b);
            let f = fau(&[&acts]);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn covariance_invariant_under_rescaling(
            vals in proptest::collection::vec(-1.0f64..1.0, 15), k in 0.01f64..100.0, which in 0usize..5,
        ) {
            let mut g: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.to_vec()).collect();
            let a = GradCovariance::from_vectors(&g).unwrap();
            g[which].iter_mut().for_each(|v| *v *= k);
            let b = GradCovariance::from_vectors(&g).unwrap();
            for (x, y) in a.matrix.iter().zip(b.matrix.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(a.matrix[[i, j]], a.matrix[[j, i]]);
                    prop_assert!((-1.0..=1.0).contains(&a.matrix[[i, j]]));
                }
            }
        }
    }
}
