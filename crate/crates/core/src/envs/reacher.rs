use rand::Rng;

use super::{clip_action, EnvError, EnvSpec, Environment, Episode, Step};
use crate::rng::stream_rng;

/// Point mass in the unit box pushed toward a random target.
///
/// Observation `(x, y, vx, vy, gx, gy)`; reward `-(|p - g| + 0.01 |a|²)`
/// measured after the step. Walls stop the mass (velocity component zeroed).
#[derive(Debug, Clone)]
pub struct Reacher2d {
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    episode: Episode,
}

impl Reacher2d {
    pub const DT: f64 = 0.05;
    pub const FORCE: f64 = 2.0;
    pub const DAMPING: f64 = 1.0;
    pub const MAX_SPEED: f64 = 2.0;
    pub const MAX_STEPS: usize = 200;

    pub fn new() -> Self {
        Self {
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            episode: Episode::default(),
        }
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0],
            self.goal[1],
        ]
    }

    pub fn distance(&self) -> f64 {
        (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1])
    }
}

impl Default for Reacher2d {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Reacher2d {
    fn id(&self) -> &'static str {
        "reacher2d"
    }

    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 6,
            action_dim: 2,
            max_episode_steps: Self::MAX_STEPS,
            reward_range: (-(8f64.sqrt() + 0.02), 0.0),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, "env/reacher2d");
        for i in 0..2 {
            self.pos[i] = rng.random_range(-1.0..1.0);
            self.goal[i] = rng.random_range(-1.0..1.0);
        }
        self.vel = [0.0; 2];
        self.episode.begin();
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        self.episode.check(action, 2)?;
        let a = [clip_action(action[0]), clip_action(action[1])];
        for i in 0..2 {
            let accel = Self::FORCE * a[i] - Self::DAMPING * self.vel[i];
            self.vel[i] = (self.vel[i] + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            self.pos[i] += self.vel[i] * Self::DT;
            if self.pos[i].abs() > 1.0 {
                self.pos[i] = self.pos[i].clamp(-1.0, 1.0);
                self.vel[i] = 0.0;
            }
        }
        let reward = -(self.distance() + 0.01 * (a[0] * a[0] + a[1] * a[1]));
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
    fn pushing_toward_goal_reduces_distance() {
        let mut env = Reacher2d::new();
        env.reset(4);
        let d0 = env.distance();
        for _ in 0..40 {
            let dx = env.goal[0] - env.pos[0];
            let dy = env.goal[1] - env.pos[1];
            let gain = 4.0;
            env.step(&[gain * dx - env.vel[0], gain * dy - env.vel[1]])
                .unwrap();
        }
        assert!(env.distance() < 0.2 * d0);
    }
}
