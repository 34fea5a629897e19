//! Built-in continuous-control tasks.
//!
//! All tasks take actions in `[-1, 1]^k` (out-of-range actions are clipped),
//! integrate with fixed-step semi-implicit Euler, and are pure state
//! machines: the reset seed and the action sequence determine everything.

mod lqr;
mod pendulum;
mod reacher;

pub use lqr::Lqr;
pub use pendulum::Pendulum;
pub use reacher::Reacher2d;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown environment `{0}` (expected pendulum, reacher2d or lqr)")]
    UnknownEnv(String),
    #[error("episode is finished; call reset first")]
    EpisodeFinished,
    #[error("expected an action of width {expected}, got {got}")]
    ActionWidth { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub max_episode_steps: usize,
    pub reward_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send {
    fn id(&self) -> &'static str;
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
}

pub const ENV_IDS: [&str; 3] = ["pendulum", "reacher2d", "lqr"];

pub fn make_env(id: &str) -> Result<Box<dyn Environment>, EnvError> {
    match id {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "reacher2d" => Ok(Box::new(Reacher2d::new())),
        "lqr" => Ok(Box::new(Lqr::new())),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

/// Shared episode bookkeeping.
#[derive(Debug, Clone, Default)]
struct Episode {
    steps: usize,
    finished: bool,
}

impl Episode {
    fn begin(&mut self) {
        self.steps = 0;
        self.finished = false;
    }

    fn check(&self, action: &[f64], width: usize) -> Result<(), EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        if action.len() != width {
            return Err(EnvError::ActionWidth {
                expected: width,
                got: action.len(),
            });
        }
        Ok(())
    }

    /// Advances the counter and returns whether the episode is truncated.
    fn advance(&mut self, terminal: bool, limit: usize) -> bool {
        self.steps += 1;
        let truncated = !terminal && self.steps >= limit;
        self.finished = terminal || truncated;
        truncated
    }
}

fn clip_action(a: f64) -> f64 {
    if a.is_nan() {
        0.0
    } else {
        a.clamp(-1.0, 1.0)
    }
}
