//! SimBa-style residual networks over masked linear layers.
//!
//! Layout: observation normalizer, masked embedding, `blocks` pre-norm
//! residual MLP blocks (`LayerNorm -> Linear(h, 4h) -> ReLU -> Linear(4h, h)`
//! plus skip), a final LayerNorm and a masked output head.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::layers::{LayerNorm, LayerNormCache, MaskedLinear, ObsNormalizer};
use crate::rng::derive_seed;
use crate::sparsity::{self, sample_mask, LayerShape, Mask, SparsityError, SparsityPlan};

/// Width multiplier inside each residual block.
pub const EXPANSION: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("plan does not match the architecture: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error("expected input width {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache does not belong to this network")]
    CacheMismatch,
    #[error("networks have different architectures")]
    ArchitectureMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Actor,
    Critic,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Actor => "actor",
            Role::Critic => "critic",
        }
    }
}

/// What the output head computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Mean and log-std per action dimension.
    Gaussian,
    /// One pre-squash action per dimension.
    Deterministic,
    /// `Q(s, a)`; the action is appended to the normalized observation.
    ActionValue,
    /// `V(s)`.
    StateValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub head: Head,
    pub base_hidden: usize,
    pub base_blocks: usize,
    pub width_scale: usize,
    pub depth_scale: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
}

impl NetworkSpec {
    pub const ACTOR_HIDDEN: usize = 128;
    pub const ACTOR_BLOCKS: usize = 1;
    pub const CRITIC_HIDDEN: usize = 512;
    pub const CRITIC_BLOCKS: usize = 2;

    pub fn actor(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            role: Role::Actor,
            head: Head::Gaussian,
            base_hidden: Self::ACTOR_HIDDEN,
            base_blocks: Self::ACTOR_BLOCKS,
            width_scale: 1,
            depth_scale: 1,
            obs_dim,
            action_dim,
        }
    }

    pub fn critic(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            role: Role::Critic,
            head: Head::ActionValue,
            base_hidden: Self::CRITIC_HIDDEN,
            base_blocks: Self::CRITIC_BLOCKS,
            width_scale: 1,
            depth_scale: 1,
            obs_dim,
            action_dim,
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn with_base(mut self, hidden: usize, blocks: usize) -> Self {
        self.base_hidden = hidden;
        self.base_blocks = blocks;
        self
    }

    pub fn with_scale(mut self, width: usize, depth: usize) -> Self {
        self.width_scale = width;
        self.depth_scale = depth;
        self
    }

    pub fn hidden(&self) -> usize {
        self.base_hidden * self.width_scale
    }

    pub fn blocks(&self) -> usize {
        self.base_blocks * self.depth_scale
    }

    pub fn input_dim(&self) -> usize {
        match self.head {
            Head::ActionValue => self.obs_dim + self.action_dim,
            _ => self.obs_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Gaussian => 2 * self.action_dim,
            Head::Deterministic => self.action_dim,
            Head::ActionValue | Head::StateValue => 1,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let fields = [
            ("base_hidden", self.base_hidden),
            ("base_blocks", self.base_blocks),
            ("width_scale", self.width_scale),
            ("depth_scale", self.depth_scale),
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(NetError::InvalidSpec(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    /// Every parameter tensor in canonical order. Weight matrices are
    /// maskable; biases and LayerNorm parameters are not.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let p = self.role.as_str();
        let h = self.hidden();
        let mut out = vec![
            LayerShape::linear(format!("{p}.embed"), self.input_dim(), h),
            LayerShape::vector(format!("{p}.embed.bias"), h),
        ];
        for b in 0..self.blocks() {
            out.push(LayerShape::vector(format!("{p}.block{b}.ln.scale"), h));
            out.push(LayerShape::vector(format!("{p}.block{b}.ln.offset"), h));
            out.push(LayerShape::linear(
                format!("{p}.block{b}.fc1"),
                h,
                EXPANSION * h,
            ));
            out.push(LayerShape::vector(
                format!("{p}.block{b}.fc1.bias"),
                EXPANSION * h,
            ));
            out.push(LayerShape::linear(
                format!("{p}.block{b}.fc2"),
                EXPANSION * h,
                h,
            ));
            out.push(LayerShape::vector(format!("{p}.block{b}.fc2.bias"), h));
        }
        out.push(LayerShape::vector(format!("{p}.final_ln.scale"), h));
        out.push(LayerShape::vector(format!("{p}.final_ln.offset"), h));
        out.push(LayerShape::linear(
            format!("{p}.head"),
            h,
            self.output_dim(),
        ));
        out.push(LayerShape::vector(
            format!("{p}.head.bias"),
            self.output_dim(),
        ));
        out
    }

    pub fn maskable_shapes(&self) -> Vec<LayerShape> {
        self.layer_shapes()
            .into_iter()
            .filter(|s| s.maskable)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(LayerShape::weight_count)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormOffset,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a Array2<f64>,
    pub gate: Option<&'a Array2<f64>>,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut Array2<f64>,
    pub gate: Option<&'a Array2<f64>>,
}

/// Gradients in the network's canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Array2<f64>>);

impl Grads {
    pub fn zeros_like(net: &Network) -> Self {
        Grads(
            net.params()
                .iter()
                .map(|p| Array2::zeros(p.value.dim()))
                .collect(),
        )
    }

    pub fn sq_norm(&self) -> f64 {
        self.0.iter().flat_map(|g| g.iter()).map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn dot(&self, other: &Grads) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn add_scaled(&mut self, k: f64, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.scaled_add(k, b);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|g| g.iter().copied()).collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().flat_map(|g| g.iter()).map(|v| v.abs()).sum()
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    norm: LayerNorm,
    fc1: MaskedLinear,
    fc2: MaskedLinear,
}

#[derive(Debug, Clone)]
struct BlockCache {
    normed: Array2<f64>,
    ln: LayerNormCache,
    hidden: Array2<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    features: Array2<f64>,
}

impl ForwardCache {
    /// Post-ReLU activations of each block's expanded hidden layer.
    pub fn hidden_activations(&self) -> Vec<&Array2<f64>> {
        self.blocks.iter().map(|b| &b.hidden).collect()
    }

    /// Penultimate representation (input to the output head).
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Array2<f64>,
    pub cache: ForwardCache,
}

/// How the connectivity of a freshly built network is chosen.
#[derive(Debug, Clone, Copy)]
pub enum Topology<'a> {
    Dense,
    /// Fixed masks sampled from the plan.
    Masked(&'a SparsityPlan),
    /// Dense connectivity with this fraction of each weight matrix zeroed at
    /// initialization; the zeros are trainable.
    SparseInit(f64),
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    sparse_init: Option<f64>,
    pub(crate) normalizer: ObsNormalizer,
    embed: MaskedLinear,
    blocks: Vec<ResidualBlock>,
    final_norm: LayerNorm,
    head: MaskedLinear,
}

impl Network {
    /// Builds the network, samples masks from `plan` (when given) with
    /// `mask_seed`, and draws initial weights with `init_seed`.
    pub fn build(
        spec: &NetworkSpec,
        plan: Option<&SparsityPlan>,
        mask_seed: u64,
        init_seed: u64,
    ) -> Result<Self, NetError> {
        spec.validate()?;
        let masks: Vec<Option<Arc<Mask>>> = match plan {
            None => vec![None; 2 + 2 * spec.blocks()],
            Some(plan) => spec
                .maskable_shapes()
                .iter()
                .map(|shape| {
                    let entry = plan.entry(&shape.name).ok_or_else(|| {
                        NetError::PlanMismatch(format!("missing layer `{}`", shape.name))
                    })?;
                    if (entry.fan_in, entry.fan_out) != (shape.fan_in, shape.fan_out) {
                        return Err(NetError::PlanMismatch(format!(
                            "layer `{}` is {}x{} in the plan but {}x{} in the network",
                            shape.name, entry.fan_out, entry.fan_in, shape.fan_out, shape.fan_in
                        )));
                    }
                    Ok(Some(Arc::new(sample_mask(plan, shape, mask_seed)?)))
                })
                .collect::<Result<_, _>>()?,
        };
        let mut masks = masks.into_iter();
        let p = spec.role.as_str();
        let h = spec.hidden();
        let embed = MaskedLinear::new(
            format!("{p}.embed"),
            spec.input_dim(),
            h,
            masks.next().unwrap(),
        );
        let blocks = (0..spec.blocks())
            .map(|b| ResidualBlock {
                norm: LayerNorm::new(format!("{p}.block{b}.ln"), h),
                fc1: MaskedLinear::new(
                    format!("{p}.block{b}.fc1"),
                    h,
                    EXPANSION * h,
                    masks.next().unwrap(),
                ),
                fc2: MaskedLinear::new(
                    format!("{p}.block{b}.fc2"),
                    EXPANSION * h,
                    h,
                    masks.next().unwrap(),
                ),
            })
            .collect();
        let head = MaskedLinear::new(
            format!("{p}.head"),
            h,
            spec.output_dim(),
            masks.next().unwrap(),
        );
        let mut net = Self {
            spec: spec.clone(),
            sparse_init: None,
            normalizer: ObsNormalizer::new(spec.obs_dim),
            embed,
            blocks,
            final_norm: LayerNorm::new(format!("{p}.final_ln"), h),
            head,
        };
        net.reinitialize(init_seed);
        Ok(net)
    }

    pub fn build_with(
        spec: &NetworkSpec,
        topology: Topology<'_>,
        seed: u64,
    ) -> Result<Self, NetError> {
        match topology {
            Topology::Dense => Self::build(spec, None, seed, seed),
            Topology::Masked(plan) => Self::build(spec, Some(plan), seed, seed),
            Topology::SparseInit(fraction) => {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(SparsityError::FractionOutOfRange(fraction).into());
                }
                let mut net = Self::build(spec, None, seed, seed)?;
                net.sparse_init = Some(fraction);
                net.reinitialize(seed);
                Ok(net)
            }
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn sparse_init_fraction(&self) -> Option<f64> {
        self.sparse_init
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut ObsNormalizer {
        &mut self.normalizer
    }

    /// Redraws every active weight from the initialization distribution and
    /// resets biases and LayerNorm parameters. Masks and normalizer
    /// statistics are kept.
    pub fn reinitialize(&mut self, seed: u64) {
        let sparse_init = self.sparse_init;
        for lin in self.linears_mut() {
            lin.initialize(seed);
            if let Some(fraction) = sparse_init {
                let stream = derive_seed(seed, &format!("sparse_init/{}", lin.name()));
                let zeroed = sparsity::sparse_init_zeros(lin.weight(), fraction, stream)
                    .expect("fraction validated at build");
                lin.set_weight(zeroed);
            }
        }
        for block in &mut self.blocks {
            block.norm.reset();
        }
        self.final_norm.reset();
    }

    pub fn linears(&self) -> Vec<&MaskedLinear> {
        let mut out = vec![&self.embed];
        for b in &self.blocks {
            out.push(&b.fc1);
            out.push(&b.fc2);
        }
        out.push(&self.head);
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut MaskedLinear> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.fc1);
            out.push(&mut b.fc2);
        }
        out.push(&mut self.head);
        out
    }

    pub fn masks(&self) -> Vec<Option<&Arc<Mask>>> {
        self.linears().into_iter().map(MaskedLinear::mask).collect()
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        fn lin<'a>(out: &mut Vec<ParamRef<'a>>, l: &'a MaskedLinear) {
            out.push(ParamRef {
                name: l.name().to_string(),
                kind: ParamKind::Weight,
                value: &l.weight,
                gate: l.gate(),
            });
            out.push(ParamRef {
                name: format!("{}.bias", l.name()),
                kind: ParamKind::Bias,
                value: &l.bias,
                gate: None,
            });
        }
        fn ln<'a>(out: &mut Vec<ParamRef<'a>>, n: &'a LayerNorm) {
            out.push(ParamRef {
                name: format!("{}.scale", n.name()),
                kind: ParamKind::NormScale,
                value: &n.scale,
                gate: None,
            });
            out.push(ParamRef {
                name: format!("{}.offset", n.name()),
                kind: ParamKind::NormOffset,
                value: &n.offset,
                gate: None,
            });
        }
        let mut out = Vec::new();
        lin(&mut out, &self.embed);
        for b in &self.blocks {
            ln(&mut out, &b.norm);
            lin(&mut out, &b.fc1);
            lin(&mut out, &b.fc2);
        }
        ln(&mut out, &self.final_norm);
        lin(&mut out, &self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn lin<'a>(out: &mut Vec<ParamMut<'a>>, l: &'a mut MaskedLinear) {
            let name = l.name().to_string();
            let gate = l.gate.as_deref();
            out.push(ParamMut {
                name: name.clone(),
                kind: ParamKind::Weight,
                value: &mut l.weight,
                gate,
            });
            out.push(ParamMut {
                name: format!("{name}.bias"),
                kind: ParamKind::Bias,
                value: &mut l.bias,
                gate: None,
            });
        }
        fn ln<'a>(out: &mut Vec<ParamMut<'a>>, n: &'a mut LayerNorm) {
            let name = n.name().to_string();
            out.push(ParamMut {
                name: format!("{name}.scale"),
                kind: ParamKind::NormScale,
                value: &mut n.scale,
                gate: None,
            });
            out.push(ParamMut {
                name: format!("{name}.offset"),
                kind: ParamKind::NormOffset,
                value: &mut n.offset,
                gate: None,
            });
        }
        let mut out = Vec::new();
        lin(&mut out, &mut self.embed);
        for b in &mut self.blocks {
            ln(&mut out, &mut b.norm);
            lin(&mut out, &mut b.fc1);
            lin(&mut out, &mut b.fc2);
        }
        ln(&mut out, &mut self.final_norm);
        lin(&mut out, &mut self.head);
        out
    }

    /// Total parameters, ignoring masks.
    pub fn total_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters not removed by a mask.
    pub fn learnable_parameters(&self) -> usize {
        self.params()
            .iter()
            .map(|p| match p.gate {
                Some(g) => g.iter().filter(|&&v| v != 0.0).count(),
                None => p.value.len(),
            })
            .sum()
    }

    /// Fraction of maskable weight entries that are exactly zero.
    pub fn measured_sparsity(&self) -> f64 {
        sparsity::measured_sparsity(self.linears().into_iter().map(MaskedLinear::weight))
    }

    /// Concatenates the normalized observation with the action for
    /// action-value heads.
    pub fn assemble_input(
        &self,
        obs: &Array2<f64>,
        action: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>, NetError> {
        if obs.ncols() != self.spec.obs_dim {
            return Err(NetError::DimensionMismatch {
                expected: self.spec.obs_dim,
                got: obs.ncols(),
            });
        }
        let normed = self.normalizer.normalize(obs);
        match (self.spec.head, action) {
            (Head::ActionValue, Some(a)) => {
                if a.ncols() != self.spec.action_dim || a.nrows() != obs.nrows() {
                    return Err(NetError::DimensionMismatch {
                        expected: self.spec.action_dim,
                        got: a.ncols(),
                    });
                }
                Ok(concatenate![Axis(1), normed, *a])
            }
            (Head::ActionValue, None) => Err(NetError::DimensionMismatch {
                expected: self.spec.input_dim(),
                got: obs.ncols(),
            }),
            (_, _) => Ok(normed),
        }
    }

    pub fn forward(
        &self,
        obs: &Array2<f64>,
        action: Option<&Array2<f64>>,
    ) -> Result<Forward, NetError> {
        let input = self.assemble_input(obs, action)?;
        Ok(self.forward_input(input))
    }

    /// Forward from an already assembled (normalized) input row batch.
    pub fn forward_input(&self, input: Array2<f64>) -> Forward {
        let mut x = self.embed.forward(&input);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (normed, ln) = block.norm.forward(&x);
            let hidden = block.fc1.forward(&normed).mapv_into(|v| v.max(0.0));
            x += &block.fc2.forward(&hidden);
            caches.push(BlockCache { normed, ln, hidden });
        }
        let (features, final_ln) = self.final_norm.forward(&x);
        let output = self.head.forward(&features);
        Forward {
            output,
            cache: ForwardCache {
                input,
                blocks: caches,
                final_ln,
                features,
            },
        }
    }

    /// Backpropagates `grad_output = dL/d(output)` through a recorded
    /// forward pass. Returns parameter gradients (when requested) and the
    /// gradient with respect to the assembled input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Array2<f64>,
        want_params: bool,
    ) -> Result<(Option<Grads>, Array2<f64>), NetError> {
        if cache.blocks.len() != self.blocks.len()
            || cache.input.ncols() != self.spec.input_dim()
            || grad_output.dim() != (cache.batch_size(), self.spec.output_dim())
        {
            return Err(NetError::CacheMismatch);
        }
        let mut grads: Vec<Array2<f64>> = Vec::new();
        let push = |grads: &mut Vec<Array2<f64>>, p: Option<(Array2<f64>, Array2<f64>)>| {
            if let Some((a, b)) = p {
                // Collected in reverse; the pair order is flipped back below.
                grads.push(b);
                grads.push(a);
            }
        };

        let (dfeat, p) = self
            .head
            .backward(&cache.features, grad_output, want_params);
        push(&mut grads, p);
        let (mut dx, p) = self
            .final_norm
            .backward(&cache.final_ln, &dfeat, want_params);
        push(&mut grads, p);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dhidden, p) = block.fc2.backward(&bc.hidden, &dx, want_params);
            push(&mut grads, p);
            let mut dpre = dhidden;
            dpre.zip_mut_with(&bc.hidden, |d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
            let (dnormed, p) = block.fc1.backward(&bc.normed, &dpre, want_params);
            push(&mut grads, p);
            let (dln, p) = block.norm.backward(&bc.ln, &dnormed, want_params);
            push(&mut grads, p);
            dx += &dln;
        }
        let (dinput, p) = self.embed.backward(&cache.input, &dx, want_params);
        push(&mut grads, p);
        let grads = want_params.then(|| {
            grads.reverse();
            Grads(grads)
        });
        Ok((grads, dinput))
    }

    /// Overwrites this network's parameters and normalizer with `other`'s.
    pub fn copy_from(&mut self, other: &Network) -> Result<(), NetError> {
        self.check_same_architecture(other)?;
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value.assign(src.value);
        }
        self.normalizer = other.normalizer.clone();
        Ok(())
    }

    pub fn check_same_architecture(&self, other: &Network) -> Result<(), NetError> {
        let same_masks = self
            .masks()
            .iter()
            .zip(other.masks())
            .all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => Arc::ptr_eq(a, b) || a == &b,
                _ => false,
            });
        if self.spec != other.spec || !same_masks {
            return Err(NetError::ArchitectureMismatch);
        }
        Ok(())
    }

    pub fn output_slice(output: &Array2<f64>, cols: std::ops::Range<usize>) -> Array2<f64> {
        output.slice(s![.., cols]).to_owned()
    }
}

/// `target <- (1 - tau) * target + tau * online` over every parameter.
/// Masked entries are zero in both networks and stay zero.
pub fn soft_update(target: &mut Network, online: &Network, tau: f64) -> Result<(), NetError> {
    target.check_same_architecture(online)?;
    for (dst, src) in target.params_mut().into_iter().zip(online.params()) {
        dst.value
            .zip_mut_with(src.value, |t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
    Ok(())
}
