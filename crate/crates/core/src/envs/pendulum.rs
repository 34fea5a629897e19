use std::f64::consts::PI;

use rand::Rng;

use super::{clip_action, EnvError, EnvSpec, Environment, Episode, Step};
use crate::rng::stream_rng;

/// Torque-limited pendulum swing-up. `theta = 0` is upright.
///
/// Observation `(cos θ, sin θ, θ̇)`; reward `-(θ² + 0.1 θ̇² + 0.001 u²)`
/// evaluated on the pre-step state, so the upright rest state scores 0.
/// Each 0.05 s control step is integrated as 10 semi-implicit Euler substeps.
#[derive(Debug, Clone)]
pub struct Pendulum {
    theta: f64,
    theta_dot: f64,
    episode: Episode,
}

impl Pendulum {
    pub const DT: f64 = 0.05;
    pub const SUBSTEPS: usize = 10;
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_STEPS: usize = 200;

    pub fn new() -> Self {
        Self {
            theta: PI,
            theta_dot: 0.0,
            episode: Episode::default(),
        }
    }

    /// Places the pendulum in a given state and starts a fresh episode.
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) -> Vec<f64> {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.episode.begin();
        self.observe()
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    /// Conserved quantity of the torque-free dynamics
    /// `θ̈ = (3g / 2l) sin θ`.
    pub fn energy(theta: f64, theta_dot: f64) -> f64 {
        0.5 * theta_dot * theta_dot + 1.5 * Self::GRAVITY / Self::LENGTH * theta.cos()
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for Pendulum {
    fn id(&self) -> &'static str {
        "pendulum"
    }

    fn spec(&self) -> EnvSpec {
        let worst = PI * PI + 0.1 * Self::MAX_SPEED.powi(2) + 0.001 * Self::MAX_TORQUE.powi(2);
        EnvSpec {
            obs_dim: 3,
            action_dim: 1,
            max_episode_steps: Self::MAX_STEPS,
            reward_range: (-worst, 0.0),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, "env/pendulum");
        let theta = rng.random_range(-PI..PI);
        let theta_dot = rng.random_range(-1.0..1.0);
        self.set_state(theta, theta_dot)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        self.episode.check(action, 1)?;
        let u = clip_action(action[0]) * Self::MAX_TORQUE;
        let th = angle_normalize(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);

        let h = Self::DT / Self::SUBSTEPS as f64;
        let accel_gain = 1.5 * Self::GRAVITY / Self::LENGTH;
        let torque_gain = 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH);
        for _ in 0..Self::SUBSTEPS {
            self.theta_dot += (accel_gain * self.theta.sin() + torque_gain * u) * h;
            self.theta_dot = self.theta_dot.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            self.theta += self.theta_dot * h;
        }
        let truncated = self.episode.advance(false, Self::MAX_STEPS);
        Ok(Step {
            observation: self.observe(),
            reward,
            terminal: false,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_rest_scores_zero() {
        let mut env = Pendulum::new();
        env.set_state(0.0, 0.0);
        let step = env.step(&[0.0]).unwrap();
        assert_eq!(step.reward, 0.0);
        assert_eq!(step.reward, env.spec().reward_range.1);
        assert_eq!(env.state(), (0.0, 0.0));
    }

    // Closed-form energy along an unforced small swing about the bottom.
    #[test]
    fn unforced_energy_is_conserved() {
        let mut env = Pendulum::new();
        let (th0, w0) = (PI - 0.1, 0.0);
        env.set_state(th0, w0);
        let e0 = Pendulum::energy(th0, w0);
        for _ in 0..100 {
            env.step(&[0.0]).unwrap();
            let (th, w) = env.state();
            assert!((Pendulum::energy(th, w) - e0).abs() < 1e-3);
        }
    }

    #[test]
    fn truncates_at_limit() {
        let mut env = Pendulum::new();
        env.reset(0);
        for t in 1..=Pendulum::MAX_STEPS {
            let step = env.step(&[0.3]).unwrap();
            assert_eq!(step.truncated, t == Pendulum::MAX_STEPS);
            assert!(!step.terminal);
        }
    }
}
