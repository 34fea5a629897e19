//! DDPG with target actor and critic and clipped Gaussian exploration.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::sac::per_sample_critic_grads;
use super::{
    clip_unit, net_tensors, net_tensors_mut, observe_all, opt_tensors, opt_tensors_mut, row,
    ActMode, Agent, AgentError, Batch, HyperParams, LossRecord, Transition,
};
use crate::diagnostics::grad_norm_active;
use crate::nn::{soft_update, AdamW, Grads, Head, NetError, Network, NetworkSpec, Topology};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: Network,
    pub critic: Network,
    pub target_actor: Network,
    pub target_critic: Network,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
    pub hp: HyperParams,
    rng: ChaCha8Rng,
    updates: u64,
}

/// `tanh` of the deterministic head output.
fn policy(
    actor: &Network,
    states: &Array2<f64>,
) -> Result<(Array2<f64>, crate::nn::Forward), NetError> {
    let fwd = actor.forward(states, None)?;
    Ok((fwd.output.mapv(f64::tanh), fwd))
}

impl DdpgAgent {
    pub fn new(
        actor_spec: &NetworkSpec,
        critic_spec: &NetworkSpec,
        topology: Topology<'_>,
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, NetError> {
        let actor = Network::build_with(
            &actor_spec.clone().with_head(Head::Deterministic),
            topology,
            seed,
        )?;
        let critic = Network::build_with(
            &critic_spec.clone().with_head(Head::ActionValue),
            topology,
            seed,
        )?;
        Ok(Self {
            actor_opt: AdamW::new(hp.optimizer(hp.lr_actor), &actor),
            critic_opt: AdamW::new(hp.optimizer(hp.lr_critic), &critic),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            hp,
            rng: stream_rng(seed, "agent/ddpg"),
            updates: 0,
        })
    }

    /// `y = r + γ (1 - d) Q̄(s', μ̄(s'))`.
    pub fn td_target(&self, batch: &Batch) -> Result<Array1<f64>, AgentError> {
        let (next_action, _) = policy(&self.target_actor, &batch.next_states)?;
        let q_next = self
            .target_critic
            .forward(&batch.next_states, Some(&next_action))?
            .output
            .column(0)
            .to_owned();
        Ok(&batch.rewards + &(self.hp.gamma * &batch.not_done * &q_next))
    }

    /// Gradient of `-mean Q(s, μ(s))` with respect to the actor parameters.
    pub fn actor_grads(&self, states: &Array2<f64>) -> Result<(f64, Grads), AgentError> {
        let n = states.nrows();
        let (action, actor_fwd) = policy(&self.actor, states)?;
        let q_fwd = self.critic.forward(states, Some(&action))?;
        let loss = -q_fwd.output.mean().unwrap_or(0.0);
        let dq = Array2::from_elem((n, 1), -1.0 / n as f64);
        let (_, dinput) = self.critic.backward(&q_fwd.cache, &dq, false)?;
        let obs_dim = self.critic.spec().obs_dim;
        let da = dinput.slice(s![.., obs_dim..]).to_owned();
        let dpre = da * action.mapv(|a| 1.0 - a * a);
        let (grads, _) = self.actor.backward(&actor_fwd.cache, &dpre, true)?;
        Ok((loss, grads.expect("requested")))
    }

    pub fn update(&mut self, transitions: &[&Transition]) -> Result<LossRecord, AgentError> {
        if transitions.is_empty() {
            return Err(AgentError::InsufficientBuffer { have: 0, need: 1 });
        }
        let batch = Batch::from_transitions(transitions.iter().copied());
        let n = batch.len();

        let y = self.td_target(&batch)?;
        let fwd = self.critic.forward(&batch.states, Some(&batch.actions))?;
        let err = &fwd.output.column(0) - &y;
        let critic_loss = err.mapv(|e| e * e).mean().unwrap_or(0.0);
        let dq = (err * (2.0 / n as f64)).insert_axis(ndarray::Axis(1));
        let (critic_grads, _) = self.critic.backward(&fwd.cache, &dq, true)?;
        let critic_grads = critic_grads.expect("requested");
        let grad_norm_critic = grad_norm_active(&self.critic, &critic_grads);
        self.critic_opt.apply(&mut self.critic, &critic_grads);

        let (actor_loss, actor_grads) = self.actor_grads(&batch.states)?;
        let grad_norm_actor = grad_norm_active(&self.actor, &actor_grads);
        self.actor_opt.apply(&mut self.actor, &actor_grads);

        soft_update(&mut self.target_critic, &self.critic, self.hp.tau)?;
        soft_update(&mut self.target_actor, &self.actor, self.hp.tau)?;
        self.updates += 1;
        Ok(LossRecord {
            critic_loss,
            actor_loss,
            alpha: None,
            grad_norm_actor,
            grad_norm_critic,
        })
    }
}

impl Agent for DdpgAgent {
    fn act(&mut self, state: &[f64], mode: ActMode) -> Vec<f64> {
        let (action, _) = policy(&self.actor, &row(state)).expect("state width matches actor");
        let sigma = self.hp.exploration_noise;
        action
            .row(0)
            .iter()
            .map(|&a| match mode {
                ActMode::Eval => clip_unit(a),
                ActMode::Explore => {
                    let e: f64 = self.rng.sample(StandardNormal);
                    clip_unit(a + sigma * e)
                }
            })
            .collect()
    }

    fn observe(&mut self, state: &[f64]) {
        observe_all(
            &mut [
                &mut self.actor,
                &mut self.critic,
                &mut self.target_actor,
                &mut self.target_critic,
            ],
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
            ("target_actor", &self.target_actor),
            ("target_critic", &self.target_critic),
        ]
    }

    fn reset(&mut self, seed: u64) {
        self.actor.reinitialize(derive_seed(seed, "reset/actor"));
        self.critic.reinitialize(derive_seed(seed, "reset/critic"));
        self.target_actor
            .copy_from(&self.actor)
            .expect("same architecture");
        self.target_critic
            .copy_from(&self.critic)
            .expect("same architecture");
        self.actor_opt.reset();
        self.critic_opt.reset();
    }

    fn critic_sample_grads(&self, samples: &[Transition]) -> Result<Vec<Grads>, AgentError> {
        let batch = Batch::from_transitions(samples);
        let y = self.td_target(&batch)?;
        per_sample_critic_grads(&self.critic, &batch, &y)
    }

    fn second_moment_sum(&self) -> f64 {
        self.actor_opt.second_moment_sum() + self.critic_opt.second_moment_sum()
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Network)> {
        vec![
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("target_actor", &mut self.target_actor),
            ("target_critic", &mut self.target_critic),
        ]
    }

    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        net_tensors("actor", &self.actor, &mut out);
        net_tensors("critic", &self.critic, &mut out);
        net_tensors("target_actor", &self.target_actor, &mut out);
        net_tensors("target_critic", &self.target_critic, &mut out);
        opt_tensors("actor_opt", &self.actor_opt, &mut out);
        opt_tensors("critic_opt", &self.critic_opt, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        net_tensors_mut("actor", &mut self.actor, &mut out);
        net_tensors_mut("critic", &mut self.critic, &mut out);
        net_tensors_mut("target_actor", &mut self.target_actor, &mut out);
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
        ]
    }

    fn set_scalar(&mut self, name: &str, value: f64) -> bool {
        match name {
            "updates" => self.updates = value as u64,
            "actor_opt_step" => self.actor_opt.step = value as u64,
            "critic_opt_step" => self.critic_opt.step = value as u64,
            _ => return false,
        }
        true
    }

    fn updates(&self) -> u64 {
        self.updates
    }
}
