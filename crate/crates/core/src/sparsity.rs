//! Layer-wise sparsity allocation and one-shot random masks.
//!
//! A [`SparsityPlan`] turns a single global sparsity target into per-layer
//! active-weight counts, either uniformly or with the Erdős–Rényi rule where
//! a layer's density is proportional to `(fan_in + fan_out) / (fan_in * fan_out)`.
//! Masks are then sampled uniformly without replacement and never change.

use std::collections::HashSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum SparsityError {
    #[error("global sparsity {0} is outside [0, 1)")]
    SparsityOutOfRange(f64),
    #[error("fraction {0} is outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("no maskable layers given")]
    NoMaskableLayers,
    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),
    #[error("layer `{0}` has an empty weight tensor")]
    EmptyLayer(String),
    #[error(
        "sparsity {sparsity} leaves {target} active weights for {layers} layers; at least one per layer is required"
    )]
    Infeasible {
        sparsity: f64,
        target: usize,
        layers: usize,
    },
    #[error("layer `{0}` is not part of the plan")]
    UnknownLayer(String),
    #[error("layer `{name}` is {got:?} but the plan records {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Shape of one parameter tensor as seen by the allocator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    pub maskable: bool,
}

impl LayerShape {
    pub fn linear(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
            kernel: None,
            maskable: true,
        }
    }

    pub fn conv(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        kernel: (usize, usize),
    ) -> Self {
        Self {
            kernel: Some(kernel),
            ..Self::linear(name, fan_in, fan_out)
        }
    }

    /// Bias or normalization vector; counted as a parameter, never pruned.
    pub fn vector(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            fan_in: 1,
            fan_out: len,
            kernel: None,
            maskable: false,
        }
    }

    pub fn weight_count(&self) -> usize {
        let k = self.kernel.map_or(1, |(w, h)| w * h);
        self.fan_in * self.fan_out * k
    }

    /// Unnormalized Erdős–Rényi density.
    pub fn er_score(&self) -> f64 {
        let (num, den) = match self.kernel {
            None => (self.fan_in + self.fan_out, self.fan_in * self.fan_out),
            Some((w, h)) => (
                self.fan_in + self.fan_out + w + h,
                self.fan_in * self.fan_out * w * h,
            ),
        };
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMethod {
    Uniform,
    Er,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    pub sparsity: f64,
    pub active_count: usize,
}

impl PlanEntry {
    pub fn weight_count(&self) -> usize {
        self.fan_in * self.fan_out * self.kernel.map_or(1, |(w, h)| w * h)
    }

    pub fn density(&self) -> f64 {
        self.active_count as f64 / self.weight_count() as f64
    }
}

/// Per-layer allocation of a global sparsity target over maskable layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub method: SparsityMethod,
    pub global_sparsity: f64,
    pub layers: Vec<PlanEntry>,
}

impl SparsityPlan {
    pub fn entry(&self, name: &str) -> Option<&PlanEntry> {
        self.layers.iter().find(|e| e.name == name)
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(PlanEntry::weight_count).sum()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(|e| e.active_count).sum()
    }

    /// Sparsity actually realized after rounding.
    pub fn achieved_sparsity(&self) -> f64 {
        1.0 - self.total_active() as f64 / self.total_weights() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

fn check_global(s: f64) -> Result<(), SparsityError> {
    if !(0.0..1.0).contains(&s) {
        return Err(SparsityError::SparsityOutOfRange(s));
    }
    Ok(())
}

fn maskable_shapes(shapes: &[LayerShape]) -> Result<Vec<&LayerShape>, SparsityError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for shape in shapes.iter().filter(|s| s.maskable) {
        if !seen.insert(shape.name.as_str()) {
            return Err(SparsityError::DuplicateLayer(shape.name.clone()));
        }
        if shape.weight_count() == 0 {
            return Err(SparsityError::EmptyLayer(shape.name.clone()));
        }
        out.push(shape);
    }
    if out.is_empty() {
        return Err(SparsityError::NoMaskableLayers);
    }
    Ok(out)
}

fn entry(shape: &LayerShape, sparsity: f64, active_count: usize) -> PlanEntry {
    PlanEntry {
        name: shape.name.clone(),
        fan_in: shape.fan_in,
        fan_out: shape.fan_out,
        kernel: shape.kernel,
        sparsity,
        active_count,
    }
}

/// Every maskable layer gets sparsity `s` exactly.
pub fn plan_uniform(s: f64, shapes: &[LayerShape]) -> Result<SparsityPlan, SparsityError> {
    check_global(s)?;
    let layers = maskable_shapes(shapes)?
        .into_iter()
        .map(|shape| {
            let n = shape.weight_count();
            let pruned = (s * n as f64).round() as usize;
            entry(shape, s, n - pruned.min(n))
        })
        .collect();
    Ok(SparsityPlan {
        method: SparsityMethod::Uniform,
        global_sparsity: s,
        layers,
    })
}

/// Erdős–Rényi allocation with water-filling for layers whose scaled density
/// would exceed one.
///
/// Each layer's count is rounded independently, so the total lands within
/// half a weight per layer of `round((1 - s) * total)`.
pub fn plan_er(s: f64, shapes: &[LayerShape]) -> Result<SparsityPlan, SparsityError> {
    check_global(s)?;
    let shapes = maskable_shapes(shapes)?;
    let sizes: Vec<usize> = shapes.iter().map(|l| l.weight_count()).collect();
    let scores: Vec<f64> = shapes.iter().map(|l| l.er_score()).collect();
    let total: usize = sizes.iter().sum();
    let exact_target = (1.0 - s) * total as f64;
    let target = exact_target.round() as usize;
    if target < shapes.len() {
        return Err(SparsityError::Infeasible {
            sparsity: s,
            target,
            layers: shapes.len(),
        });
    }

    let mut dense = vec![false; shapes.len()];
    let mut scale;
    loop {
        let capped: usize = (0..shapes.len())
            .filter(|&i| dense[i])
            .map(|i| sizes[i])
            .sum();
        let remaining = (exact_target - capped as f64).max(0.0);
        let denom: f64 = (0..shapes.len())
            .filter(|&i| !dense[i])
            .map(|i| scores[i] * sizes[i] as f64)
            .sum();
        scale = if denom > 0.0 { remaining / denom } else { 0.0 };
        let mut changed = false;
        for i in 0..shapes.len() {
            if !dense[i] && scale * scores[i] > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut active: Vec<usize> = (0..shapes.len())
        .map(|i| {
            if dense[i] {
                sizes[i]
            } else {
                let a = (scale * scores[i] * sizes[i] as f64).round() as usize;
                a.clamp(1, sizes[i])
            }
        })
        .collect();

    // Per-layer rounding keeps identical shapes identical; only the surplus
    // introduced by the one-weight floor is taken back, largest layer first.
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let bound = shapes.len().div_ceil(2);
    let mut sum: usize = active.iter().sum();
    for &i in &order {
        if sum <= target + bound {
            break;
        }
        let take = (active[i] - 1).min(sum - target - bound);
        active[i] -= take;
        sum -= take;
    }

    let layers = shapes
        .iter()
        .zip(&active)
        .zip(&sizes)
        .map(|((shape, &a), &n)| entry(shape, (n - a) as f64 / n as f64, a))
        .collect();
    Ok(SparsityPlan {
        method: SparsityMethod::Er,
        global_sparsity: s,
        layers,
    })
}

/// Fixed binary mask over a weight tensor, bit-packed row-major
/// (`fan_out` rows of `fan_in * kernel` entries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: LayerShape,
    bits: Vec<u64>,
    active_count: usize,
    seed: u64,
}

impl Mask {
    pub fn from_bits(shape: LayerShape, bits: &[bool], seed: u64) -> Self {
        assert_eq!(bits.len(), shape.weight_count(), "mask length mismatch");
        let mut packed = vec![0u64; bits.len().div_ceil(64)];
        let mut active_count = 0;
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            packed[i / 64] |= 1 << (i % 64);
            active_count += 1;
        }
        Self {
            shape,
            bits: packed,
            active_count,
            seed,
        }
    }

    /// Rebuilds a mask from its packed words; trailing bits past the tensor
    /// length must be zero.
    pub fn from_packed(shape: LayerShape, words: Vec<u64>, seed: u64) -> Option<Self> {
        let n = shape.weight_count();
        if words.len() != n.div_ceil(64) {
            return None;
        }
        if !n.is_multiple_of(64) && words.last().is_some_and(|w| w >> (n % 64) != 0) {
            return None;
        }
        let active_count = words.iter().map(|w| w.count_ones() as usize).sum();
        Some(Self {
            shape,
            bits: words,
            active_count,
            seed,
        })
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.shape.weight_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.bits[index / 64] >> (index % 64) & 1 == 1
    }

    pub fn packed(&self) -> &[u64] {
        &self.bits
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(|i| self.is_active(i))
    }

    /// 0/1 matrix of shape `(fan_out, fan_in)` for element-wise gating.
    pub fn gate(&self) -> Array2<f64> {
        let cols = self.len() / self.shape.fan_out;
        Array2::from_shape_fn((self.shape.fan_out, cols), |(r, c)| {
            if self.is_active(r * cols + c) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Samples exactly `active_count` positions uniformly without replacement,
/// using a partial Fisher–Yates shuffle on the stream `mask/<layer name>`.
pub fn sample_mask(
    plan: &SparsityPlan,
    layer: &LayerShape,
    seed: u64,
) -> Result<Mask, SparsityError> {
    let entry = plan
        .entry(&layer.name)
        .ok_or_else(|| SparsityError::UnknownLayer(layer.name.clone()))?;
    if entry.weight_count() != layer.weight_count() || entry.fan_out != layer.fan_out {
        return Err(SparsityError::ShapeMismatch {
            name: layer.name.clone(),
            expected: (entry.fan_out, entry.fan_in),
            got: (layer.fan_out, layer.fan_in),
        });
    }
    let n = layer.weight_count();
    let k = entry.active_count.min(n);
    let mut bits = vec![false; n];
    for i in choose_indices(n, k, seed, &format!("mask/{}", layer.name)) {
        bits[i] = true;
    }
    Ok(Mask::from_bits(layer.clone(), &bits, seed))
}

fn choose_indices(n: usize, k: usize, seed: u64, stream: &str) -> Vec<usize> {
    let mut rng = stream_rng(seed, stream);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Zeroes `round(fraction * len)` uniformly chosen entries. The result carries
/// no mask: the zeros are ordinary trainable values.
pub fn sparse_init_zeros(
    weights: &Array2<f64>,
    fraction: f64,
    seed: u64,
) -> Result<Array2<f64>, SparsityError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SparsityError::FractionOutOfRange(fraction));
    }
    let n = weights.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut out = weights.clone();
    let flat = out
        .as_slice_mut()
        .expect("weight tensors are standard layout");
    for i in choose_indices(n, k, seed, "sparse_init") {
        flat[i] = 0.0;
    }
    Ok(out)
}

/// Fraction of entries that are exactly zero across the given weight tensors.
pub fn measured_sparsity<'a>(tensors: impl IntoIterator<Item = &'a Array2<f64>>) -> f64 {
    let (zeros, total) = tensors.into_iter().fold((0usize, 0usize), |(z, t), w| {
        (z + w.iter().filter(|&&v| v == 0.0).count(), t + w.len())
    });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}
