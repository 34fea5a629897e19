//! Experiment configuration, runs, sweeps and parameter accounting.

mod log;
mod run;
mod sweep;

pub use log::{merge_logs, Row, RunLog, SchemaError, MERGED_KEYS, METRICS};
pub use run::{
    build_agent, collect_probe, evaluate, restore_agent, run_experiment, train, AnyAgent,
    TrainedRun,
};
pub use sweep::{run_name, run_sweep, summarize, SettingKey, SummaryRow, SweepGrid, SweepResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, HyperParams, StreamConfig};
use crate::diagnostics::DiagnosticsConfig;
use crate::envs::{make_env, EnvError, EnvSpec};
use crate::nn::{Head, NetError, NetworkSpec};
use crate::sparsity::{plan_er, plan_uniform, SparsityError, SparsityMethod, SparsityPlan};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Sac,
    Ddpg,
    StreamAc,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Sac => "sac",
            Algo::Ddpg => "ddpg",
            Algo::StreamAc => "stream_ac",
        }
    }

    pub fn off_policy(self) -> bool {
        self != Algo::StreamAc
    }

    pub const ALL: [Algo; 3] = [Algo::Sac, Algo::Ddpg, Algo::StreamAc];
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Er,
    Uniform,
    /// Dense connectivity; `sparsity` is the fraction of weights zeroed at
    /// initialization, which training is free to move.
    SparseInit,
    Dense,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Er => "er",
            Method::Uniform => "uniform",
            Method::SparseInit => "sparse_init",
            Method::Dense => "dense",
        }
    }

    pub const ALL: [Method; 4] = [
        Method::Er,
        Method::Uniform,
        Method::SparseInit,
        Method::Dense,
    ];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown sparsity method `{s}`"))
    }
}

/// Knobs beyond the core protocol fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub actor_hidden: usize,
    pub actor_blocks: usize,
    pub critic_hidden: usize,
    pub critic_blocks: usize,
    /// Per-network sparsity; when either is set, actor and critic are
    /// planned separately instead of jointly.
    pub actor_sparsity: Option<f64>,
    pub critic_sparsity: Option<f64>,
    pub hyperparams: HyperParams,
    pub stream: StreamConfig,
    pub diagnostics: DiagnosticsConfig,
    /// Environment steps between logged loss rows.
    pub log_every: u64,
    pub probe_size: usize,
}

impl Default for Overrides {
    fn default() -> Self {
        Self {
            actor_hidden: NetworkSpec::ACTOR_HIDDEN,
            actor_blocks: NetworkSpec::ACTOR_BLOCKS,
            critic_hidden: NetworkSpec::CRITIC_HIDDEN,
            critic_blocks: NetworkSpec::CRITIC_BLOCKS,
            actor_sparsity: None,
            critic_sparsity: None,
            hyperparams: HyperParams::default(),
            stream: StreamConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            log_every: 1000,
            probe_size: crate::diagnostics::PROBE_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algo: Algo,
    pub env: String,
    pub width_scale: usize,
    pub depth_scale: usize,
    pub sparsity: f64,
    pub sparsity_method: Method,
    pub seed: u64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub metrics_every: u64,
    pub reset_interval: Option<u64>,
    pub overrides: Overrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Sac,
            env: "pendulum".into(),
            width_scale: 1,
            depth_scale: 1,
            sparsity: 0.0,
            sparsity_method: Method::Er,
            seed: 0,
            total_steps: 50_000,
            eval_every: 5_000,
            eval_episodes: 10,
            metrics_every: 10_000,
            reset_interval: None,
            overrides: Overrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.width_scale == 0 || self.depth_scale == 0 {
            return bad("width_scale and depth_scale must be at least 1");
        }
        let in_range = |s: f64| (0.0..1.0).contains(&s);
        if !in_range(self.sparsity) {
            return bad("sparsity must lie in [0, 1)");
        }
        let o = &self.overrides;
        if o.actor_sparsity.is_some_and(|s| !in_range(s))
            || o.critic_sparsity.is_some_and(|s| !in_range(s))
        {
            return bad("per-network sparsity must lie in [0, 1)");
        }
        if self.sparsity_method == Method::Dense
            && (self.sparsity != 0.0 || o.actor_sparsity.is_some() || o.critic_sparsity.is_some())
        {
            return bad("method dense requires sparsity 0");
        }
        if self.total_steps == 0
            || self.eval_every == 0
            || self.metrics_every == 0
            || o.log_every == 0
        {
            return bad("total_steps, eval_every, metrics_every and log_every must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        if self.reset_interval == Some(0) {
            return bad("reset_interval must be positive");
        }
        if o.probe_size < 2 || o.diagnostics.covariance_samples < 2 {
            return bad("probe_size and covariance_samples must be at least 2");
        }
        if [
            o.actor_hidden,
            o.actor_blocks,
            o.critic_hidden,
            o.critic_blocks,
        ]
        .contains(&0)
        {
            return bad("network base sizes must be positive");
        }
        o.hyperparams.validate().map_err(HarnessError::Config)?;
        let st = &o.stream;
        if !(st.gamma > 0.0 && st.gamma < 1.0) || !(0.0..=1.0).contains(&st.lambda) {
            return bad("stream gamma must lie in (0, 1) and lambda in [0, 1]");
        }
        if !(st.lr_actor > 0.0 && st.lr_critic > 0.0) {
            return bad("stream step sizes must be positive");
        }
        make_env(&self.env)?;
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec, HarnessError> {
        Ok(make_env(&self.env)?.spec())
    }

    /// Actor and critic specs with the heads used by the chosen algorithm.
    pub fn network_specs(&self) -> Result<(NetworkSpec, NetworkSpec), HarnessError> {
        let env = self.env_spec()?;
        let o = &self.overrides;
        let (actor_head, critic_head) = match self.algo {
            Algo::Sac => (Head::Gaussian, Head::ActionValue),
            Algo::Ddpg => (Head::Deterministic, Head::ActionValue),
            Algo::StreamAc => (Head::Gaussian, Head::StateValue),
        };
        let actor = NetworkSpec::actor(env.obs_dim, env.action_dim)
            .with_head(actor_head)
            .with_base(o.actor_hidden, o.actor_blocks)
            .with_scale(self.width_scale, self.depth_scale);
        let critic = NetworkSpec::critic(env.obs_dim, env.action_dim)
            .with_head(critic_head)
            .with_base(o.critic_hidden, o.critic_blocks)
            .with_scale(self.width_scale, self.depth_scale);
        Ok((actor, critic))
    }

    /// The mask plan, or `None` for dense and sparse-init runs. One global
    /// level is allocated jointly over actor and critic layers unless
    /// per-network levels are given.
    pub fn plan(&self) -> Result<Option<SparsityPlan>, HarnessError> {
        let method = match self.sparsity_method {
            Method::Er => SparsityMethod::Er,
            Method::Uniform => SparsityMethod::Uniform,
            Method::SparseInit | Method::Dense => return Ok(None),
        };
        let (actor, critic) = self.network_specs()?;
        let planner = |s: f64, shapes: &[crate::sparsity::LayerShape]| match method {
            SparsityMethod::Er => plan_er(s, shapes),
            SparsityMethod::Uniform => plan_uniform(s, shapes),
        };
        let o = &self.overrides;
        if o.actor_sparsity.is_none() && o.critic_sparsity.is_none() {
            let shapes: Vec<_> = actor
                .maskable_shapes()
                .into_iter()
                .chain(critic.maskable_shapes())
                .collect();
            return Ok(Some(planner(self.sparsity, &shapes)?));
        }
        let a = planner(
            o.actor_sparsity.unwrap_or(self.sparsity),
            &actor.maskable_shapes(),
        )?;
        let c = planner(
            o.critic_sparsity.unwrap_or(self.sparsity),
            &critic.maskable_shapes(),
        )?;
        let mut merged = SparsityPlan {
            method,
            global_sparsity: 0.0,
            layers: a.layers.into_iter().chain(c.layers).collect(),
        };
        merged.global_sparsity = merged.achieved_sparsity();
        Ok(Some(merged))
    }
}

/// `(total, learnable)` parameters of an actor-critic pair. Total counts
/// every weight, bias and normalization parameter; learnable subtracts the
/// weights removed by the plan.
pub fn count_parameters(
    actor: &NetworkSpec,
    critic: &NetworkSpec,
    plan: Option<&SparsityPlan>,
) -> (usize, usize) {
    let total = actor.parameter_count() + critic.parameter_count();
    let pruned: usize = plan.map_or(0, |plan| {
        actor
            .maskable_shapes()
            .iter()
            .chain(critic.maskable_shapes().iter())
            .filter_map(|s| plan.entry(&s.name))
            .map(|e| e.weight_count() - e.active_count)
            .sum()
    });
    (total, total - pruned)
}

fn maskable_count(spec: &NetworkSpec) -> usize {
    spec.maskable_shapes()
        .iter()
        .map(|s| s.weight_count())
        .sum()
}

/// Global sparsity for the `larger` pair that keeps its learnable parameter
/// count equal to the dense `anchor` pair.
pub fn equal_parameter_scaling(
    anchor: (&NetworkSpec, &NetworkSpec),
    larger: (&NetworkSpec, &NetworkSpec),
) -> Result<f64, HarnessError> {
    let (anchor_total, _) = count_parameters(anchor.0, anchor.1, None);
    let (larger_total, _) = count_parameters(larger.0, larger.1, None);
    let maskable = maskable_count(larger.0) + maskable_count(larger.1);
    let fixed = larger_total - maskable;
    if anchor_total > larger_total || anchor_total < fixed {
        return Err(HarnessError::Config(format!(
            "cannot match {anchor_total} learnable parameters with a model of {larger_total}"
        )));
    }
    Ok(1.0 - (anchor_total - fixed) as f64 / maskable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip_and_defaults() {
        let c =
            ExperimentConfig::from_json(r#"{"algo": "ddpg", "sparsity": 0.5, "seed": 4}"#).unwrap();
        assert_eq!(c.algo, Algo::Ddpg);
        assert_eq!(c.sparsity_method, Method::Er);
        assert_eq!(c.eval_episodes, 10);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        for key in [
            "algo",
            "env",
            "width_scale",
            "depth_scale",
            "sparsity",
            "sparsity_method",
            "seed",
            "total_steps",
            "eval_every",
            "eval_episodes",
            "metrics_every",
            "reset_interval",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            r#"{"sparsity": 1.0}"#,
            r#"{"width_scale": 0}"#,
            r#"{"env": "cartpole"}"#,
            r#"{"sparsity_method": "dense", "sparsity": 0.3}"#,
            r#"{"algo": "ppo"}"#,
            r#"{"sparsty": 0.3}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn joint_plan_covers_both_networks() {
        let c = ExperimentConfig {
            sparsity: 0.8,
            ..Default::default()
        };
        let plan = c.plan().unwrap().unwrap();
        assert!(plan.entry("actor.head").is_some());
        assert!(plan.entry("critic.block1.fc2").is_some());
        let (actor, critic) = c.network_specs().unwrap();
        let maskable = maskable_count(&actor) + maskable_count(&critic);
        assert!((plan.achieved_sparsity() - 0.8).abs() <= 8.0 / maskable as f64);
    }

    #[test]
    fn dense_counts_match() {
        let actor = NetworkSpec::actor(3, 1);
        let critic = NetworkSpec::critic(3, 1);
        let (t, l) = count_parameters(&actor, &critic, None);
        assert_eq!(t, l);
    }

    #[test]
    fn identical_pair_needs_no_pruning() {
        let a = NetworkSpec::actor(17, 6);
        let c = NetworkSpec::critic(17, 6);
        assert_eq!(equal_parameter_scaling((&a, &c), (&a, &c)).unwrap(), 0.0);
        let big_a = a.clone().with_scale(2, 1);
        let big_c = c.clone().with_scale(2, 1);
        assert!(equal_parameter_scaling((&big_a, &big_c), (&a, &c)).is_err());
    }
}
