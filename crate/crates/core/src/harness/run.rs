use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{count_parameters, Algo, ExperimentConfig, HarnessError, Method, RunLog};
use crate::agents::{
    ActMode, Agent, DdpgAgent, LossRecord, ReplayBuffer, SacAgent, StreamAgent, Transition,
};
use crate::checkpoint::Checkpoint;
use crate::diagnostics::{measure, reset_schedule};
use crate::envs::{make_env, Environment};
use crate::nn::Topology;
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone)]
pub enum AnyAgent {
    Sac(SacAgent),
    Ddpg(DdpgAgent),
    Stream(StreamAgent),
}

impl AnyAgent {
    pub fn as_agent(&self) -> &dyn Agent {
        match self {
            AnyAgent::Sac(a) => a,
            AnyAgent::Ddpg(a) => a,
            AnyAgent::Stream(a) => a,
        }
    }

    pub fn as_agent_mut(&mut self) -> &mut dyn Agent {
        match self {
            AnyAgent::Sac(a) => a,
            AnyAgent::Ddpg(a) => a,
            AnyAgent::Stream(a) => a,
        }
    }

    fn replay_update(&mut self, batch: &[&Transition]) -> Result<LossRecord, HarnessError> {
        Ok(match self {
            AnyAgent::Sac(a) => a.update(batch)?,
            AnyAgent::Ddpg(a) => a.update(batch)?,
            AnyAgent::Stream(_) => unreachable!("streaming agents do not replay"),
        })
    }
}

/// Builds the agent for `config`: masks, initial weights and optimizer
/// state are all functions of the config alone.
pub fn build_agent(config: &ExperimentConfig) -> Result<AnyAgent, HarnessError> {
    config.validate()?;
    let (actor, critic) = config.network_specs()?;
    let plan = config.plan()?;
    let topology = match (&plan, config.sparsity_method) {
        (Some(plan), _) => Topology::Masked(plan),
        (None, Method::SparseInit) => Topology::SparseInit(config.sparsity),
        (None, _) => Topology::Dense,
    };
    let seed = derive_seed(config.seed, "agent");
    let hp = config.overrides.hyperparams.clone();
    Ok(match config.algo {
        Algo::Sac => AnyAgent::Sac(SacAgent::new(&actor, &critic, topology, hp, seed)?),
        Algo::Ddpg => AnyAgent::Ddpg(DdpgAgent::new(&actor, &critic, topology, hp, seed)?),
        Algo::StreamAc => AnyAgent::Stream(StreamAgent::new(
            &actor,
            &critic,
            topology,
            config.overrides.stream.clone(),
            seed,
        )?),
    })
}

/// Rebuilds the agent described by a checkpoint and loads its state.
pub fn restore_agent(ckpt: &Checkpoint) -> Result<(ExperimentConfig, AnyAgent), HarnessError> {
    let config: ExperimentConfig = serde_json::from_value(ckpt.header.config.clone())
        .map_err(|e| HarnessError::Config(format!("checkpoint config: {e}")))?;
    let mut agent = build_agent(&config)?;
    ckpt.restore(agent.as_agent_mut())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok((config, agent))
}

/// Mean undiscounted return of the deterministic policy over `episodes`
/// episodes. Episode `i` always starts from the same seeded state.
pub fn evaluate(
    agent: &mut dyn Agent,
    env_id: &str,
    episodes: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    let mut env = make_env(env_id)?;
    let mut total = 0.0;
    for i in 0..episodes {
        let mut obs = env.reset(derive_seed(seed, &format!("eval/{i}")));
        loop {
            let step = env.step(&agent.act(&obs, ActMode::Eval))?;
            total += step.reward;
            if step.done() {
                break;
            }
            obs = step.observation;
        }
    }
    Ok(total / episodes as f64)
}

/// `n` transitions from deterministic-policy rollouts in a separate
/// environment; the agent's training state is not touched.
pub fn collect_probe(
    agent: &mut dyn Agent,
    env_id: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<Transition>, HarnessError> {
    let mut env = make_env(env_id)?;
    let mut out = Vec::with_capacity(n);
    let mut episode = 0;
    let mut obs = env.reset(derive_seed(seed, "probe/0"));
    while out.len() < n {
        let action = agent.act(&obs, ActMode::Eval);
        let step = env.step(&action)?;
        out.push(Transition {
            state: obs,
            action,
            reward: step.reward,
            next_state: step.observation.clone(),
            terminal: step.terminal,
        });
        obs = if step.done() {
            episode += 1;
            env.reset(derive_seed(seed, &format!("probe/{episode}")))
        } else {
            step.observation
        };
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub config: ExperimentConfig,
    pub log: RunLog,
    pub agent: AnyAgent,
    pub env_steps: u64,
    pub diverged: bool,
}

impl TrainedRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.agent.as_agent(),
            serde_json::to_value(&self.config).expect("config serializes"),
            self.config.seed,
            self.env_steps,
        )
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunLog, HarnessError> {
    Ok(train(config)?.log)
}

struct Loop<'a> {
    config: &'a ExperimentConfig,
    agent: AnyAgent,
    env: Box<dyn Environment>,
    log: RunLog,
    buffer: Option<ReplayBuffer>,
    last_loss: Option<LossRecord>,
    episode: u64,
}

impl Loop<'_> {
    fn new_episode(&mut self) -> Vec<f64> {
        let obs = self.env.reset(derive_seed(
            self.config.seed,
            &format!("train/{}", self.episode),
        ));
        self.episode += 1;
        self.agent.as_agent_mut().observe(&obs);
        obs
    }

    fn probe(&mut self, step: u64) -> Result<Vec<Transition>, HarnessError> {
        let n = self.config.overrides.probe_size;
        match &self.buffer {
            Some(buf) if buf.len() >= 2 => {
                let mut rng = stream_rng(self.config.seed, &format!("probe/{step}"));
                Ok(buf.sample(n, &mut rng).into_iter().cloned().collect())
            }
            _ => collect_probe(
                self.agent.as_agent_mut(),
                &self.config.env,
                n,
                derive_seed(self.config.seed, &format!("probe/{step}")),
            ),
        }
    }

    fn record_metrics(&mut self, step: u64) -> Result<(), HarnessError> {
        let probe = self.probe(step)?;
        let record = measure(
            self.agent.as_agent(),
            &probe,
            self.last_loss.as_ref(),
            step,
            &self.config.overrides.diagnostics,
        )?;
        for (name, value) in record.metrics() {
            self.log.push(step, name, value);
        }
        let sparsity = self.agent.as_agent().measured_sparsity();
        self.log.push(step, "measured_sparsity", sparsity);
        Ok(())
    }

    fn record_loss(&mut self, step: u64) {
        if let Some(l) = self.last_loss {
            self.log.push(step, "critic_loss", l.critic_loss);
            self.log.push(step, "actor_loss", l.actor_loss);
            if let Some(alpha) = l.alpha {
                self.log.push(step, "alpha", alpha);
            }
        }
    }
}

/// Runs one experiment to completion (or divergence) and returns the log and
/// the final agent.
pub fn train(config: &ExperimentConfig) -> Result<TrainedRun, HarnessError> {
    config.validate()?;
    let (actor_spec, critic_spec) = config.network_specs()?;
    let plan = config.plan()?;
    let (total, learnable) = count_parameters(&actor_spec, &critic_spec, plan.as_ref());
    let hp = &config.overrides.hyperparams;
    let mut state = Loop {
        config,
        agent: build_agent(config)?,
        env: make_env(&config.env)?,
        log: RunLog::default(),
        buffer: config
            .algo
            .off_policy()
            .then(|| ReplayBuffer::new(hp.buffer_capacity)),
        last_loss: None,
        episode: 0,
    };
    let mut log_meta = RunLog::default();
    log_meta.set_meta("algo", config.algo.as_str());
    log_meta.set_meta("env", &config.env);
    log_meta.set_meta("sparsity_method", config.sparsity_method.as_str());
    log_meta.set_meta("sparsity", config.sparsity);
    log_meta.set_meta("width_scale", config.width_scale);
    log_meta.set_meta("depth_scale", config.depth_scale);
    log_meta.set_meta("seed", config.seed);
    log_meta.set_meta("total_parameters", total);
    log_meta.set_meta("learnable_parameters", learnable);
    log_meta.set_meta("config", config.to_json());

    let resets: Vec<u64> = config
        .reset_interval
        .map(|i| reset_schedule(i, config.total_steps).collect())
        .unwrap_or_default();
    let mut warmup_rng: ChaCha8Rng = stream_rng(config.seed, "warmup");
    let mut replay_rng: ChaCha8Rng = stream_rng(config.seed, "replay");
    let action_dim = state.env.spec().action_dim;
    let eval_seed = derive_seed(config.seed, "eval");

    state.log.push(
        0,
        "measured_sparsity",
        state.agent.as_agent().measured_sparsity(),
    );
    let mut obs = state.new_episode();
    let mut diverged_at = None;
    let mut env_steps = 0;
    for step in 1..=config.total_steps {
        let off_policy = config.algo.off_policy();
        let warming = off_policy && step <= hp.warmup_steps as u64;
        let action: Vec<f64> = if warming {
            (0..action_dim)
                .map(|_| warmup_rng.random_range(-1.0..=1.0))
                .collect()
        } else {
            state.agent.as_agent_mut().act(&obs, ActMode::Explore)
        };
        let out = state.env.step(&action)?;
        env_steps = step;
        let transition = Transition {
            state: std::mem::take(&mut obs),
            action,
            reward: out.reward,
            next_state: out.observation.clone(),
            terminal: out.terminal,
        };
        state.agent.as_agent_mut().observe(&out.observation);

        match state.agent {
            AnyAgent::Stream(ref mut agent) => {
                state.last_loss = Some(agent.stream_step(&transition, out.done())?);
            }
            _ => {
                let buffer = state.buffer.as_mut().expect("off-policy buffer");
                buffer.push(transition);
                if !warming && buffer.len() >= hp.batch_size {
                    for _ in 0..hp.replay_ratio {
                        let batch = buffer.sample(hp.batch_size, &mut replay_rng);
                        state.last_loss = Some(state.agent.replay_update(&batch)?);
                    }
                }
            }
        }
        if state.last_loss.is_some_and(|l| !l.is_finite()) {
            diverged_at = Some(step);
            break;
        }

        obs = if out.done() {
            state.new_episode()
        } else {
            out.observation
        };

        if step % config.overrides.log_every == 0 {
            state.record_loss(step);
        }
        if resets.binary_search(&step).is_ok() {
            state
                .agent
                .as_agent_mut()
                .reset(derive_seed(config.seed, &format!("reset/{step}")));
            state.last_loss = None;
            state.log.push(step, "reset_event", 1.0);
        }
        if step % config.metrics_every == 0 {
            state.record_metrics(step)?;
        }
        if step % config.eval_every == 0 || step == config.total_steps {
            let ret = evaluate(
                state.agent.as_agent_mut(),
                &config.env,
                config.eval_episodes,
                eval_seed,
            )?;
            state.log.push(step, "eval_return", ret);
        }
    }

    log_meta.set_meta("updates", state.agent.as_agent().updates());
    match diverged_at {
        Some(step) => {
            log_meta.set_meta("status", "diverged");
            log_meta.set_meta("diverged_step", step);
        }
        None => log_meta.set_meta("status", "ok"),
    }
    let mut log = state.log;
    log.meta = log_meta.meta;
    Ok(TrainedRun {
        config: config.clone(),
        log,
        agent: state.agent,
        env_steps,
        diverged: diverged_at.is_some(),
    })
}
