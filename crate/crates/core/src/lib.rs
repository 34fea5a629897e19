//! Static sparse training for SimBa-style actor-critic agents.
//!
//! One-shot random pruning at initialization (uniform or Erdős–Rényi layer
//! allocation), SAC / DDPG / streaming actor-critic agents over masked
//! residual networks, built-in control tasks, and plasticity diagnostics
//! (Srank, dormant ratio, FAU, gradient and parameter norms, gradient
//! covariance, periodic resets).

pub mod agents;
pub mod checkpoint;
pub mod cli;
pub mod diagnostics;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod sparsity;
