//! Soft actor-critic with a single critic, tanh-squashed Gaussian policy and
//! learned temperature.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::policy::{squashed_log_prob_grads, squashed_sample, GaussianHead};
use super::{
    clip_unit, net_tensors, net_tensors_mut, observe_all, opt_tensors, opt_tensors_mut, row,
    ActMode, Agent, AgentError, Batch, HyperParams, LossRecord, Transition,
};
use crate::diagnostics::grad_norm_active;
use crate::nn::{
    soft_update, AdamW, Grads, Head, NetError, Network, NetworkSpec, ScalarAdam, Topology,
};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub actor: Network,
    pub critic: Network,
    pub target_critic: Network,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
    pub log_alpha: f64,
    pub alpha_opt: ScalarAdam,
    pub hp: HyperParams,
    pub target_entropy: f64,
    rng: ChaCha8Rng,
    updates: u64,
}

impl SacAgent {
    pub fn new(
        actor_spec: &NetworkSpec,
        critic_spec: &NetworkSpec,
        topology: Topology<'_>,
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, NetError> {
        let actor = Network::build_with(
            &actor_spec.clone().with_head(Head::Gaussian),
            topology,
            seed,
        )?;
        let critic = Network::build_with(
            &critic_spec.clone().with_head(Head::ActionValue),
            topology,
            seed,
        )?;
        let target_critic = critic.clone();
        let target_entropy = hp
            .target_entropy
            .unwrap_or(-(actor_spec.action_dim as f64) / 2.0);
        Ok(Self {
            actor_opt: AdamW::new(hp.optimizer(hp.lr_actor), &actor),
            critic_opt: AdamW::new(hp.optimizer(hp.lr_critic), &critic),
            log_alpha: hp.alpha_init.ln(),
            alpha_opt: ScalarAdam::new(hp.alpha_lr),
            actor,
            critic,
            target_critic,
            target_entropy,
            rng: stream_rng(seed, "agent/sac"),
            updates: 0,
            hp,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn noise(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| self.rng.sample(StandardNormal))
    }

    /// `y = r + γ (1 - d) (Q̄(s', a') - α log π(a'|s'))` with `a' ~ π(·|s')`
    /// drawn using `eps`.
    pub fn td_target(&self, batch: &Batch, eps: &Array2<f64>) -> Result<Array1<f64>, AgentError> {
        let head = GaussianHead::from_output(&self.actor.forward(&batch.next_states, None)?.output);
        let next = squashed_sample(&head, eps);
        let q_next = self
            .target_critic
            .forward(&batch.next_states, Some(&next.action))?
            .output
            .column(0)
            .to_owned();
        let soft = q_next - self.alpha() * &next.log_prob;
        Ok(&batch.rewards + &(self.hp.gamma * &batch.not_done * &soft))
    }

    /// One gradient step on critic, actor and temperature, then a soft
    /// target update.
    pub fn update(&mut self, transitions: &[&Transition]) -> Result<LossRecord, AgentError> {
        if transitions.is_empty() {
            return Err(AgentError::InsufficientBuffer { have: 0, need: 1 });
        }
        let batch = Batch::from_transitions(transitions.iter().copied());
        let n = batch.len();
        let k = self.actor.spec().action_dim;
        let alpha = self.alpha();

        // Critic.
        let eps_next = self.noise(n, k);
        let y = self.td_target(&batch, &eps_next)?;
        let fwd = self.critic.forward(&batch.states, Some(&batch.actions))?;
        let err = &fwd.output.column(0) - &y;
        let critic_loss = err.mapv(|e| e * e).mean().unwrap_or(0.0);
        let dq = (err * (2.0 / n as f64)).insert_axis(Axis(1));
        let (critic_grads, _) = self.critic.backward(&fwd.cache, &dq, true)?;
        let critic_grads = critic_grads.expect("requested");
        let grad_norm_critic = grad_norm_active(&self.critic, &critic_grads);
        self.critic_opt.apply(&mut self.critic, &critic_grads);

        // Actor: minimize E[α log π(a|s) - Q(s, a)], a reparameterized.
        let eps = self.noise(n, k);
        let actor_fwd = self.actor.forward(&batch.states, None)?;
        let head = GaussianHead::from_output(&actor_fwd.output);
        let sample = squashed_sample(&head, &eps);
        let q_fwd = self.critic.forward(&batch.states, Some(&sample.action))?;
        let q = q_fwd.output.column(0).to_owned();
        let actor_loss = (alpha * &sample.log_prob - &q).mean().unwrap_or(0.0);
        let dloss_dq = Array2::from_elem((n, 1), -1.0 / n as f64);
        let (_, dinput) = self.critic.backward(&q_fwd.cache, &dloss_dq, false)?;
        let obs_dim = self.critic.spec().obs_dim;
        let dq_da = dinput.slice(ndarray::s![.., obs_dim..]).to_owned();
        let (dlp_dmean, dlp_dlogstd) = squashed_log_prob_grads(&head, &sample, &eps);
        let dtanh = sample.action.mapv(|a| 1.0 - a * a);
        let sigma_eps = head.std() * &eps;
        let scale = alpha / n as f64;
        let d_mean = &dlp_dmean * scale + &(&dq_da * &dtanh);
        let d_log_std = &dlp_dlogstd * scale + &(&dq_da * &dtanh * &sigma_eps);
        let dout = head.join_grad(&d_mean, &d_log_std);
        let (actor_grads, _) = self.actor.backward(&actor_fwd.cache, &dout, true)?;
        let actor_grads = actor_grads.expect("requested");
        let grad_norm_actor = grad_norm_active(&self.actor, &actor_grads);
        self.actor_opt.apply(&mut self.actor, &actor_grads);

        // Temperature: minimize α (-log π - H*) through log α.
        let gap = (-&sample.log_prob - self.target_entropy)
            .mean()
            .unwrap_or(0.0);
        self.alpha_opt.apply(&mut self.log_alpha, alpha * gap);

        soft_update(&mut self.target_critic, &self.critic, self.hp.tau)?;
        self.updates += 1;
        Ok(LossRecord {
            critic_loss,
            actor_loss,
            alpha: Some(alpha),
            grad_norm_actor,
            grad_norm_critic,
        })
    }
}

impl Agent for SacAgent {
    fn act(&mut self, state: &[f64], mode: ActMode) -> Vec<f64> {
        let out = self
            .actor
            .forward(&row(state), None)
            .expect("state width matches actor")
            .output;
        let head = GaussianHead::from_output(&out);
        let k = head.mean.ncols();
        match mode {
            ActMode::Eval => head
                .mean
                .row(0)
                .iter()
                .map(|m| clip_unit(m.tanh()))
                .collect(),
            ActMode::Explore => {
                let eps = self.noise(1, k);
                squashed_sample(&head, &eps)
                    .action
                    .row(0)
                    .iter()
                    .map(|&a| clip_unit(a))
                    .collect()
            }
        }
    }

    fn observe(&mut self, state: &[f64]) {
        observe_all(
            &mut [&mut self.actor, &mut self.critic, &mut self.target_critic],
            state,
        );
    }

    fn actor(&self) -> &Network {
        &self.actor
    }

    fn critic(&self) -> &Network {
        &self.critic
    }

    fn networks(&self) -> Vec<(&'static str, &Network)> {
        vec![
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("target_critic", &self.target_critic),
        ]
    }

    fn reset(&mut self, seed: u64) {
        self.actor.reinitialize(derive_seed(seed, "reset/actor"));
        self.critic.reinitialize(derive_seed(seed, "reset/critic"));
        self.target_critic
            .copy_from(&self.critic)
            .expect("target shares the critic architecture");
        self.actor_opt.reset();
        self.critic_opt.reset();
        self.alpha_opt.reset();
    }

    /// Squared TD error per sample with the deterministic next action
    /// `tanh(μ(s'))`, so the result does not depend on sampling noise.
    fn critic_sample_grads(&self, samples: &[Transition]) -> Result<Vec<Grads>, AgentError> {
        let batch = Batch::from_transitions(samples);
        let k = self.actor.spec().action_dim;
        let zero = Array2::zeros((batch.len(), k));
        let y = self.td_target(&batch, &zero)?;
        per_sample_critic_grads(&self.critic, &batch, &y)
    }

    fn second_moment_sum(&self) -> f64 {
        self.actor_opt.second_moment_sum() + self.critic_opt.second_moment_sum() + self.alpha_opt.v
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Network)> {
        vec![
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("target_critic", &mut self.target_critic),
        ]
    }

    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        net_tensors("actor", &self.actor, &mut out);
        net_tensors("critic", &self.critic, &mut out);
        net_tensors("target_critic", &self.target_critic, &mut out);
        opt_tensors("actor_opt", &self.actor_opt, &mut out);
        opt_tensors("critic_opt", &self.critic_opt, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        net_tensors_mut("actor", &mut self.actor, &mut out);
        net_tensors_mut("critic", &mut self.critic, &mut out);
        net_tensors_mut("target_critic", &mut self.target_critic, &mut out);
        opt_tensors_mut("actor_opt", &mut self.actor_opt, &mut out);
        opt_tensors_mut("critic_opt", &mut self.critic_opt, &mut out);
        out
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("updates", self.updates as f64),
            ("actor_opt_step", self.actor_opt.step as f64),
            ("critic_opt_step", self.critic_opt.step as f64),
            ("log_alpha", self.log_alpha),
            ("alpha_opt_step", self.alpha_opt.step as f64),
            ("alpha_opt_m", self.alpha_opt.m),
            ("alpha_opt_v", self.alpha_opt.v),
        ]
    }

    fn set_scalar(&mut self, name: &str, value: f64) -> bool {
        match name {
            "updates" => self.updates = value as u64,
            "actor_opt_step" => self.actor_opt.step = value as u64,
            "critic_opt_step" => self.critic_opt.step = value as u64,
            "log_alpha" => self.log_alpha = value,
            "alpha_opt_step" => self.alpha_opt.step = value as u64,
            "alpha_opt_m" => self.alpha_opt.m = value,
            "alpha_opt_v" => self.alpha_opt.v = value,
            _ => return false,
        }
        true
    }

    fn updates(&self) -> u64 {
        self.updates
    }
}

/// Gradients of `(Q(s_i, a_i) - y_i)²` for each sample separately.
pub(crate) fn per_sample_critic_grads(
    critic: &Network,
    batch: &Batch,
    y: &Array1<f64>,
) -> Result<Vec<Grads>, AgentError> {
    (0..batch.len())
        .map(|i| {
            let s = batch.states.row(i).insert_axis(Axis(0)).to_owned();
            let a = batch.actions.row(i).insert_axis(Axis(0)).to_owned();
            let fwd = critic.forward(&s, Some(&a))?;
            let d = Array2::from_elem((1, 1), 2.0 * (fwd.output[[0, 0]] - y[i]));
            let (g, _) = critic.backward(&fwd.cache, &d, true)?;
            Ok(g.expect("requested"))
        })
        .collect()
}
