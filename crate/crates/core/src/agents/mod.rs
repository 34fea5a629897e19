//! SAC, DDPG and streaming actor-critic agents over masked networks.

pub mod ddpg;
pub mod policy;
pub mod replay;
pub mod sac;
pub mod stream;

pub use ddpg::DdpgAgent;
pub use replay::ReplayBuffer;
pub use sac::SacAgent;
pub use stream::StreamAgent;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdamW, AdamWConfig, NetError, Network};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("replay buffer holds {have} transitions, need {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Column-stacked view of a batch of transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub not_done: Array1<f64>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Self {
        let items: Vec<&Transition> = items.into_iter().collect();
        let n = items.len();
        let obs = items.first().map_or(0, |t| t.state.len());
        let act = items.first().map_or(0, |t| t.action.len());
        let rows = |f: &dyn Fn(&Transition) -> &[f64], width: usize| {
            Array2::from_shape_vec(
                (n, width),
                items.iter().flat_map(|t| f(t).to_vec()).collect(),
            )
            .expect("ragged transitions")
        };
        Self {
            states: rows(&|t| &t.state, obs),
            actions: rows(&|t| &t.action, act),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: rows(&|t| &t.next_state, obs),
            not_done: items
                .iter()
                .map(|t| if t.terminal { 0.0 } else { 1.0 })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Off-policy hyperparameters. Defaults follow the SAC/DDPG tables; the
/// discount, replay capacity and warmup are documented choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub replay_ratio: usize,
    pub alpha_init: f64,
    pub alpha_lr: f64,
    /// Target entropy; `None` means `-|A| / 2`.
    pub target_entropy: Option<f64>,
    pub exploration_noise: f64,
    pub buffer_capacity: usize,
    pub warmup_steps: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr_actor: 1e-4,
            lr_critic: 1e-4,
            tau: 5e-3,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            gamma: 0.99,
            replay_ratio: 2,
            alpha_init: 1e-2,
            alpha_lr: 1e-4,
            target_entropy: None,
            exploration_noise: 0.1,
            buffer_capacity: 1_000_000,
            warmup_steps: 5_000,
        }
    }
}

impl HyperParams {
    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("tau", self.tau),
            ("alpha_init", self.alpha_init),
            ("alpha_lr", self.alpha_lr),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(format!("{name} must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err("gamma must lie in (0, 1)".into());
        }
        if self.tau > 1.0 {
            return Err("tau must be at most 1".into());
        }
        if self.batch_size == 0 || self.replay_ratio == 0 || self.buffer_capacity == 0 {
            return Err("batch_size, replay_ratio and buffer_capacity must be positive".into());
        }
        if self.exploration_noise < 0.0 || self.weight_decay < 0.0 {
            return Err("exploration_noise and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Streaming actor-critic settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Bound the effective step by the trace L1 norm.
    pub bounded_step: bool,
    pub kappa_actor: f64,
    pub kappa_critic: f64,
    pub entropy_coef: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.8,
            lr_actor: 1.0,
            lr_critic: 1.0,
            bounded_step: true,
            kappa_actor: 3.0,
            kappa_critic: 2.0,
            entropy_coef: 0.01,
        }
    }
}

/// Scalars produced by one update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: Option<f64>,
    pub grad_norm_actor: f64,
    pub grad_norm_critic: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        self.critic_loss.is_finite()
            && self.actor_loss.is_finite()
            && self.alpha.is_none_or(f64::is_finite)
    }
}

/// Behaviour shared by all agents, used by the harness and diagnostics.
pub trait Agent: Send {
    fn act(&mut self, state: &[f64], mode: ActMode) -> Vec<f64>;
    /// Feeds a newly observed environment state to the normalizers.
    fn observe(&mut self, state: &[f64]);
    fn actor(&self) -> &Network;
    fn critic(&self) -> &Network;
    /// Every network the agent owns, online and target, with a label.
    fn networks(&self) -> Vec<(&'static str, &Network)>;
    /// Re-draws all active weights, clears optimizer state.
    fn reset(&mut self, seed: u64);
    /// Per-sample critic TD-loss gradients, without touching training state.
    fn critic_sample_grads(
        &self,
        samples: &[Transition],
    ) -> Result<Vec<crate::nn::Grads>, AgentError>;
    /// Sum of all optimizer second moments (zero right after a reset).
    fn second_moment_sum(&self) -> f64;
    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Network)>;
    /// Every learned or accumulated tensor (parameters, optimizer moments,
    /// traces) under a stable name, for checkpointing.
    fn tensors(&self) -> Vec<(String, &Array2<f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)>;
    /// Scalar training state (temperature, step counters).
    fn scalars(&self) -> Vec<(&'static str, f64)>;
    /// Returns false for an unknown name.
    fn set_scalar(&mut self, name: &str, value: f64) -> bool;
    /// Gradient updates applied so far.
    fn updates(&self) -> u64;

    /// Masked sparsity over actor and critic maskable weights.
    fn measured_sparsity(&self) -> f64 {
        crate::sparsity::measured_sparsity(
            [self.actor(), self.critic()]
                .into_iter()
                .flat_map(|n| n.linears().into_iter().map(|l| l.weight())),
        )
    }
}

pub(crate) fn net_tensors<'a>(
    label: &str,
    net: &'a Network,
    out: &mut Vec<(String, &'a Array2<f64>)>,
) {
    for p in net.params() {
        out.push((format!("{label}/{}", p.name), p.value));
    }
}

pub(crate) fn net_tensors_mut<'a>(
    label: &str,
    net: &'a mut Network,
    out: &mut Vec<(String, &'a mut Array2<f64>)>,
) {
    for p in net.params_mut() {
        out.push((format!("{label}/{}", p.name), p.value));
    }
}

pub(crate) fn opt_tensors<'a>(
    label: &str,
    opt: &'a AdamW,
    out: &mut Vec<(String, &'a Array2<f64>)>,
) {
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        out.push((format!("{label}/m/{i}"), m));
        out.push((format!("{label}/v/{i}"), v));
    }
}

pub(crate) fn opt_tensors_mut<'a>(
    label: &str,
    opt: &'a mut AdamW,
    out: &mut Vec<(String, &'a mut Array2<f64>)>,
) {
    for (i, (m, v)) in opt.m.iter_mut().zip(opt.v.iter_mut()).enumerate() {
        out.push((format!("{label}/m/{i}"), m));
        out.push((format!("{label}/v/{i}"), v));
    }
}

/// Feeds `state` to every normalizer in `nets`.
pub(crate) fn observe_all(nets: &mut [&mut Network], state: &[f64]) {
    for net in nets.iter_mut() {
        net.normalizer_mut().update(state);
    }
}

pub(crate) fn row(state: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row")
}

pub(crate) fn clip_unit(a: f64) -> f64 {
    a.clamp(-1.0, 1.0)
}
