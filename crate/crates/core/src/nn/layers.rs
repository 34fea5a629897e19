//! Masked linear layers, layer normalization and running observation
//! normalization, with hand-written backward passes.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::sparsity::Mask;

/// Variance floor used by [`LayerNorm`] and [`ObsNormalizer`].
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Orthogonal matrix of shape `(rows, cols)` from the QR factorization of a
/// standard Gaussian draw, sign-corrected so the result is Haar distributed.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (tall, wide) = (rows.max(cols), rows.min(cols));
    let draw = nalgebra::DMatrix::<f64>::from_fn(tall, wide, |_, _| rng.sample(StandardNormal));
    let qr = draw.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..wide {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] }
    })
}

/// Sets entries with a zero gate to `+0.0` (multiplying would leave `-0.0`).
pub(crate) fn zero_masked(values: &mut Array2<f64>, gate: &Array2<f64>) {
    values.zip_mut_with(gate, |v, &g| {
        if g == 0.0 {
            *v = 0.0;
        }
    });
}

/// `y = x Wᵀ + b` with `W` stored `fan_out × fan_in` and an optional fixed
/// mask. Masked entries of `W` are held at exactly zero, so `W` is always the
/// effective weight `M ⊙ W`.
#[derive(Debug, Clone)]
pub struct MaskedLinear {
    name: String,
    pub(crate) weight: Array2<f64>,
    pub(crate) bias: Array2<f64>,
    mask: Option<Arc<Mask>>,
    pub(crate) gate: Option<Arc<Array2<f64>>>,
}

impl MaskedLinear {
    pub fn new(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        mask: Option<Arc<Mask>>,
    ) -> Self {
        let gate = mask.as_ref().map(|m| {
            assert_eq!(m.shape().fan_out, fan_out, "mask rows");
            assert_eq!(m.len(), fan_in * fan_out, "mask size");
            Arc::new(m.gate())
        });
        Self {
            name: name.into(),
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array2::zeros((1, fan_out)),
            mask,
            gate,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array2<f64> {
        &self.bias
    }

    pub fn mask(&self) -> Option<&Arc<Mask>> {
        self.mask.as_ref()
    }

    pub(crate) fn gate(&self) -> Option<&Array2<f64>> {
        self.gate.as_deref()
    }

    /// Orthogonal weights on stream `init/<name>`, zero bias, then masked.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = stream_rng(seed, &format!("init/{}", self.name));
        self.weight = orthogonal(self.fan_out(), self.fan_in(), 1.0, &mut rng);
        self.bias.fill(0.0);
        self.apply_mask();
    }

    pub fn apply_mask(&mut self) {
        if let Some(gate) = &self.gate {
            zero_masked(&mut self.weight, gate);
        }
    }

    /// Replaces the weights; masked positions are zeroed.
    pub fn set_weight(&mut self, weight: Array2<f64>) {
        assert_eq!(weight.dim(), self.weight.dim());
        self.weight = weight;
        self.apply_mask();
    }

    pub fn set_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.fan_out());
        self.bias.iter_mut().zip(bias).for_each(|(b, v)| *b = *v);
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `dL/dx` and, when requested, `(dL/dW, dL/db)` with `dL/dW`
    /// exactly zero at masked positions.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        want_params: bool,
    ) -> (Array2<f64>, Option<(Array2<f64>, Array2<f64>)>) {
        let dx = dy.dot(&self.weight);
        let params = want_params.then(|| {
            let mut dw = dy.t().dot(x);
            if let Some(gate) = &self.gate {
                zero_masked(&mut dw, gate);
            }
            let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            (dw, db)
        });
        (dx, params)
    }
}

/// Per-row layer normalization with learnable scale and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    name: String,
    pub(crate) scale: Array2<f64>,
    pub(crate) offset: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNormCache {
    /// Normalized input before the affine transform.
    pub fn normalized(&self) -> &Array2<f64> {
        &self.normalized
    }
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            scale: Array2::ones((1, dim)),
            offset: Array2::zeros((1, dim)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.scale.ncols()
    }

    pub fn reset(&mut self) {
        self.scale.fill(1.0);
        self.offset.fill(0.0);
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let width = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / width;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / width;
        let inv_std = var.mapv(|v| 1.0 / (v + VARIANCE_FLOOR).sqrt());
        let normalized = centered * inv_std.view().insert_axis(Axis(1));
        let y = &normalized * &self.scale + &self.offset;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        want_params: bool,
    ) -> (Array2<f64>, Option<(Array2<f64>, Array2<f64>)>) {
        let width = dy.ncols() as f64;
        let xhat = &cache.normalized;
        let dxhat = dy * &self.scale;
        let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut dx = dxhat * width - sum_d - xhat * &sum_dx;
        dx *= &(cache
            .inv_std
            .view()
            .insert_axis(Axis(1))
            .mapv(|s| s / width));
        let params = want_params.then(|| {
            let dscale = (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            let doffset = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
            (dscale, doffset)
        });
        (dx, params)
    }
}

/// Running mean/variance of environment observations (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, obs: &[f64]) {
        assert_eq!(obs.len(), self.dim(), "observation width");
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(obs) {
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
        }
    }

    /// Population variance; unit variance before any observation.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2
            .iter()
            .map(|m2| (m2 / self.count as f64).max(0.0))
            .collect()
    }

    pub fn normalize(&self, obs: &Array2<f64>) -> Array2<f64> {
        let var = self.variance();
        let mut out = obs.clone();
        for mut row in out.rows_mut() {
            for ((v, mean), var) in row.iter_mut().zip(&self.mean).zip(&var) {
                *v = (*v - mean) / (var + VARIANCE_FLOOR).sqrt();
            }
        }
        out
    }
}
