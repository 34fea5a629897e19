//! Masked SimBa networks: layers, network assembly, optimizer.

pub mod layers;
pub mod network;
pub mod optim;

pub use layers::{orthogonal, LayerNorm, MaskedLinear, ObsNormalizer, VARIANCE_FLOOR};
pub use network::{
    soft_update, Forward, ForwardCache, Grads, Head, NetError, Network, NetworkSpec, ParamKind,
    Role, Topology, EXPANSION,
};
pub use optim::{AdamW, AdamWConfig, ScalarAdam};
