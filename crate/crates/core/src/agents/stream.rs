//! Streaming actor-critic with accumulating eligibility traces.
//!
//! Each transition is used once, immediately, and then dropped. The critic
//! is a state-value network, the actor an unsquashed diagonal Gaussian whose
//! samples are clipped to the action box. With `bounded_step` the step size
//! shrinks whenever `α κ max(|δ|, 1) ‖z‖₁` exceeds one.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::policy::{gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grads, GaussianHead};
use super::{
    clip_unit, net_tensors, net_tensors_mut, observe_all, row, ActMode, Agent, AgentError, Batch,
    LossRecord, StreamConfig, Transition,
};
use crate::nn::{Grads, Head, NetError, Network, NetworkSpec, Topology};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone)]
pub struct StreamAgent {
    pub actor: Network,
    pub critic: Network,
    pub config: StreamConfig,
    pub actor_trace: Grads,
    pub critic_trace: Grads,
    rng: ChaCha8Rng,
    steps: u64,
}

/// `θ += k z`.
fn apply_step(net: &mut Network, k: f64, z: &Grads) {
    for (p, z) in net.params_mut().into_iter().zip(&z.0) {
        p.value.scaled_add(k, z);
    }
}

/// Effective step size after the optional trace-norm bound.
pub fn effective_step(lr: f64, kappa: f64, delta: f64, trace: &Grads, bounded: bool) -> f64 {
    if !bounded {
        return lr;
    }
    let m = lr * kappa * delta.abs().max(1.0) * trace.l1_norm();
    lr / m.max(1.0)
}

impl StreamAgent {
    pub fn new(
        actor_spec: &NetworkSpec,
        critic_spec: &NetworkSpec,
        topology: Topology<'_>,
        config: StreamConfig,
        seed: u64,
    ) -> Result<Self, NetError> {
        let actor = Network::build_with(
            &actor_spec.clone().with_head(Head::Gaussian),
            topology,
            seed,
        )?;
        let critic = Network::build_with(
            &critic_spec.clone().with_head(Head::StateValue),
            topology,
            seed,
        )?;
        Ok(Self {
            actor_trace: Grads::zeros_like(&actor),
            critic_trace: Grads::zeros_like(&critic),
            actor,
            critic,
            config,
            rng: stream_rng(seed, "agent/stream"),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn value(&self, state: &[f64]) -> Result<f64, NetError> {
        Ok(self.critic.forward(&row(state), None)?.output[[0, 0]])
    }

    /// TD error `δ = r + γ (1 - d) V(s') - V(s)` under the current weights.
    pub fn td_error(&self, t: &Transition) -> Result<f64, NetError> {
        let next = if t.terminal {
            0.0
        } else {
            self.value(&t.next_state)?
        };
        Ok(t.reward + self.config.gamma * next - self.value(&t.state)?)
    }

    /// `∇_θ V(s)`.
    pub fn value_grad(&self, state: &[f64]) -> Result<Grads, NetError> {
        let fwd = self.critic.forward(&row(state), None)?;
        let (g, _) = self
            .critic
            .backward(&fwd.cache, &Array2::ones((1, 1)), true)?;
        Ok(g.expect("requested"))
    }

    /// `∇_θ [log π(a|s) + c·sign(δ)·H(π(·|s))]`.
    pub fn policy_grad(
        &self,
        state: &[f64],
        action: &[f64],
        delta: f64,
    ) -> Result<Grads, NetError> {
        let fwd = self.actor.forward(&row(state), None)?;
        let head = GaussianHead::from_output(&fwd.output);
        let (d_mean, d_log_std) = gaussian_log_prob_grads(&head, &row(action));
        let ent = self.config.entropy_coef * sign(delta);
        let dout = head.join_grad(&d_mean, &(d_log_std + ent));
        let (g, _) = self.actor.backward(&fwd.cache, &dout, true)?;
        Ok(g.expect("requested"))
    }

    /// One online update from a single transition. Traces are cleared when
    /// the transition ends the episode (terminal or truncated via `done`).
    pub fn stream_step(&mut self, t: &Transition, done: bool) -> Result<LossRecord, AgentError> {
        let c = &self.config;
        let decay = c.gamma * c.lambda;
        let delta = self.td_error(t)?;
        let gv = self.value_grad(&t.state)?;
        let gp = self.policy_grad(&t.state, &t.action, delta)?;
        let (grad_norm_critic, grad_norm_actor) = (gv.norm(), gp.norm());

        self.critic_trace.scale(decay);
        self.critic_trace.add_scaled(1.0, &gv);
        self.actor_trace.scale(decay);
        self.actor_trace.add_scaled(1.0, &gp);

        let a_v = effective_step(
            c.lr_critic,
            c.kappa_critic,
            delta,
            &self.critic_trace,
            c.bounded_step,
        );
        let a_p = effective_step(
            c.lr_actor,
            c.kappa_actor,
            delta,
            &self.actor_trace,
            c.bounded_step,
        );

        let head = GaussianHead::from_output(&self.actor.forward(&row(&t.state), None)?.output);
        let log_prob = gaussian_log_prob(&head, &row(&t.action))[0];
        let entropy = gaussian_entropy(&head)[0];

        apply_step(&mut self.critic, a_v * delta, &self.critic_trace);
        apply_step(&mut self.actor, a_p * delta, &self.actor_trace);
        if done || t.terminal {
            self.clear_traces();
        }
        self.steps += 1;
        Ok(LossRecord {
            critic_loss: delta * delta,
            actor_loss: -delta * (log_prob + self.config.entropy_coef * sign(delta) * entropy),
            alpha: None,
            grad_norm_actor,
            grad_norm_critic,
        })
    }

    pub fn clear_traces(&mut self) {
        self.actor_trace.scale(0.0);
        self.critic_trace.scale(0.0);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Agent for StreamAgent {
    fn act(&mut self, state: &[f64], mode: ActMode) -> Vec<f64> {
        let out = self
            .actor
            .forward(&row(state), None)
            .expect("state width matches actor")
            .output;
        let head = GaussianHead::from_output(&out);
        let std = head.std();
        head.mean
            .row(0)
            .iter()
            .zip(std.row(0))
            .map(|(&m, &s)| match mode {
                ActMode::Eval => clip_unit(m),
                ActMode::Explore => {
                    let e: f64 = self.rng.sample(StandardNormal);
                    clip_unit(m + s * e)
                }
            })
            .collect()
    }

    fn observe(&mut self, state: &[f64]) {
        observe_all(&mut [&mut self.actor, &mut self.critic], state);
    }

    fn actor(&self) -> &Network {
        &self.actor
    }

    fn critic(&self) -> &Network {
        &self.critic
    }

    fn networks(&self) -> Vec<(&'static str, &Network)> {
        vec![("actor", &self.actor), ("critic", &self.critic)]
    }

    fn reset(&mut self, seed: u64) {
        self.actor.reinitialize(derive_seed(seed, "reset/actor"));
        self.critic.reinitialize(derive_seed(seed, "reset/critic"));
        self.clear_traces();
    }

    /// Gradients of `(V(s) - y)²` with `y = r + γ (1 - d) V(s')` held fixed.
    fn critic_sample_grads(&self, samples: &[Transition]) -> Result<Vec<Grads>, AgentError> {
        let batch = Batch::from_transitions(samples);
        let v = self
            .critic
            .forward(&batch.states, None)?
            .output
            .column(0)
            .to_owned();
        let v_next = self
            .critic
            .forward(&batch.next_states, None)?
            .output
            .column(0)
            .to_owned();
        let y = &batch.rewards + &(self.config.gamma * &batch.not_done * &v_next);
        samples
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut g = self.value_grad(&t.state)?;
                g.scale(2.0 * (v[i] - y[i]));
                Ok(g)
            })
            .collect()
    }

    /// Plain trace updates keep no moment estimates.
    fn second_moment_sum(&self) -> f64 {
        0.0
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Network)> {
        vec![("actor", &mut self.actor), ("critic", &mut self.critic)]
    }

    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        net_tensors("actor", &self.actor, &mut out);
        net_tensors("critic", &self.critic, &mut out);
        for (label, trace) in [
            ("actor_trace", &self.actor_trace),
            ("critic_trace", &self.critic_trace),
        ] {
            for (i, z) in trace.0.iter().enumerate() {
                out.push((format!("{label}/{i}"), z));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        net_tensors_mut("actor", &mut self.actor, &mut out);
        net_tensors_mut("critic", &mut self.critic, &mut out);
        for (label, trace) in [
            ("actor_trace", &mut self.actor_trace),
            ("critic_trace", &mut self.critic_trace),
        ] {
            for (i, z) in trace.0.iter_mut().enumerate() {
                out.push((format!("{label}/{i}"), z));
            }
        }
        out
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![("updates", self.steps as f64)]
    }

    fn set_scalar(&mut self, name: &str, value: f64) -> bool {
        if name == "updates" {
            self.steps = value as u64;
            return true;
        }
        false
    }

    fn updates(&self) -> u64 {
        self.steps
    }
}
