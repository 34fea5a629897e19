use rand::Rng;

use super::{clip_action, EnvError, EnvSpec, Environment, Episode, Step};
use crate::rng::stream_rng;

/// Double-integrator regulator with a known finite-horizon optimum.
///
/// State `x = (position, velocity)`, control `u = 3a`. Semi-implicit Euler
/// gives `x' = A x + B u` with `A = [[1, dt], [0, 1]]`, `B = [dt², dt]`.
/// Reward is `-(xᵀx + u²)` on the pre-step state. With no terminal cost
/// the optimal unconstrained return from `x₀` is `-x₀ᵀ P₀ x₀` where `P₀`
/// comes from the backward Riccati recursion over the episode horizon.
#[derive(Debug, Clone)]
pub struct Lqr {
    x: [f64; 2],
    episode: Episode,
}

type Mat2 = [[f64; 2]; 2];

impl Lqr {
    pub const DT: f64 = 0.1;
    pub const U_MAX: f64 = 3.0;
    pub const CONTROL_COST: f64 = 1.0;
    pub const STATE_BOUND: f64 = 10.0;
    pub const HORIZON: usize = 100;

    pub fn new() -> Self {
        Self {
            x: [0.0; 2],
            episode: Episode::default(),
        }
    }

    pub fn set_state(&mut self, x: [f64; 2]) -> Vec<f64> {
        self.x = x;
        self.episode.begin();
        self.x.to_vec()
    }

    fn dynamics() -> (Mat2, [f64; 2]) {
        let dt = Self::DT;
        ([[1.0, dt], [0.0, 1.0]], [dt * dt, dt])
    }

    /// Cost-to-go matrices `P_t` and gains `K_t` for `t = 0..HORIZON`.
    pub fn riccati() -> (Vec<Mat2>, Vec<[f64; 2]>) {
        let (a, b) = Self::dynamics();
        let mut p = vec![[[0.0; 2]; 2]; Self::HORIZON + 1];
        let mut k = vec![[0.0; 2]; Self::HORIZON];
        for t in (0..Self::HORIZON).rev() {
            let next = p[t + 1];
            // BᵀP, BᵀPB, BᵀPA
            let btp = [
                b[0] * next[0][0] + b[1] * next[1][0],
                b[0] * next[0][1] + b[1] * next[1][1],
            ];
            let btpb = btp[0] * b[0] + btp[1] * b[1];
            let btpa = [
                btp[0] * a[0][0] + btp[1] * a[1][0],
                btp[0] * a[0][1] + btp[1] * a[1][1],
            ];
            let gain = [
                btpa[0] / (Self::CONTROL_COST + btpb),
                btpa[1] / (Self::CONTROL_COST + btpb),
            ];
            // Closed loop A - B K, then P = Q + Aᵀ P (A - B K).
            let mut cl = a;
            for (i, row) in cl.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v -= b[i] * gain[j];
                }
            }
            let mut pt = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = if i == j { 1.0 } else { 0.0 };
                    for r in 0..2 {
                        for c in 0..2 {
                            acc += a[r][i] * next[r][c] * cl[c][j];
                        }
                    }
                    pt[i][j] = acc;
                }
            }
            p[t] = pt;
            k[t] = gain;
        }
        (p, k)
    }

    /// Minimum total cost from `x0` over the full horizon.
    pub fn optimal_cost(x0: [f64; 2]) -> f64 {
        let (p, _) = Self::riccati();
        let p0 = p[0];
        x0[0] * (p0[0][0] * x0[0] + p0[0][1] * x0[1])
            + x0[1] * (p0[1][0] * x0[0] + p0[1][1] * x0[1])
    }

    /// Optimal normalized action at step `t` (may exceed the bounds for
    /// large states).
    pub fn optimal_action(x: [f64; 2], t: usize) -> f64 {
        let (_, k) = Self::riccati();
        -(k[t][0] * x[0] + k[t][1] * x[1]) / Self::U_MAX
    }
}

impl Default for Lqr {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Lqr {
    fn id(&self) -> &'static str {
        "lqr"
    }

    fn spec(&self) -> EnvSpec {
        let b = Self::STATE_BOUND;
        EnvSpec {
            obs_dim: 2,
            action_dim: 1,
            max_episode_steps: Self::HORIZON,
            reward_range: (
                -(2.0 * b * b + Self::CONTROL_COST * Self::U_MAX.powi(2)),
                0.0,
            ),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, "env/lqr");
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.set_state(x)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        self.episode.check(action, 1)?;
        let u = clip_action(action[0]) * Self::U_MAX;
        let reward = -(self.x[0] * self.x[0] + self.x[1] * self.x[1] + Self::CONTROL_COST * u * u);
        self.x[1] += u * Self::DT;
        self.x[0] += self.x[1] * Self::DT;
        let bound = Self::STATE_BOUND;
        self.x = [
            self.x[0].clamp(-bound, bound),
            self.x[1].clamp(-bound, bound),
        ];
        let truncated = self.episode.advance(false, Self::HORIZON);
        Ok(Step {
            observation: self.x.to_vec(),
            reward,
            terminal: false,
            truncated,
        })
    }
}
