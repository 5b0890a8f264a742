//! Desk-scale rate-distortion codec with analytic gradients.
//!
//! ```text
//! x ─g_a─▶ y ─(+u | round)─▶ ŷ ─g_s─▶ x̂
//!          │
//!          └─h_a─▶ z ─(+u' | round)─▶ ẑ ─h_s─▶ g_e ─▶ (μ, log σ) for ŷ
//! ```
//!
//! `g_a` and `g_s` are affine-tanh-affine, `h_a` and `h_s` are affine, and
//! `g_e` is affine-tanh-affine. `ŷ` is coded under a Gaussian conditional
//! model, `ẑ` under a learnable per-dimension logistic prior that lives in
//! the last entropy-parameter layer.
//!
//! Rates are reported in bits per input dimension, the vector analogue of
//! bits per pixel.

mod codec;
mod data;
pub mod likelihood;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use codec::LatentCache;
pub use data::{generate_batch, Batch};

use crate::error::{Error, Result};
use crate::paramstore::{FlatParams, LayerRole, LayerSpan};
use crate::scalar::Real;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCodecConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub hyper_dim: usize,
    /// Width of the hyper-synthesis output.
    pub hyper_hidden: usize,
    /// Hidden width of the entropy-parameter network.
    pub entropy_hidden: usize,
    pub lambda: f64,
    pub distortion_scale: f64,
}

impl Default for ToyCodecConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dim: 32,
            latent_dim: 16,
            hyper_dim: 8,
            hyper_hidden: 24,
            entropy_hidden: 48,
            lambda: 0.0018,
            distortion_scale: 255.0 * 255.0,
        }
    }
}

impl ToyCodecConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("hyper_dim", self.hyper_dim),
            ("hyper_hidden", self.hyper_hidden),
            ("entropy_hidden", self.entropy_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if !(self.distortion_scale > 0.0 && self.distortion_scale.is_finite()) {
            return Err(Error::Config("distortion_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Mean squared error over samples and dimensions.
    pub distortion: T,
    pub rate_y: T,
    pub rate_z: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn rate(&self) -> T {
        self.rate_y + self.rate_z
    }
}

/// How latents are quantized: additive uniform noise (training surrogate,
/// seeded) or rounding (evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    Noise(u64),
    Round,
}

/// A dense layer `out = W · in + b` located inside the flat vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    pub out: usize,
    pub inp: usize,
}

impl Dense {
    fn at(start: usize, out: usize, inp: usize) -> Self {
        Self { w: start, b: start + out * inp, out, inp }
    }

    fn len(&self) -> usize {
        self.out * self.inp + self.out
    }

    pub fn apply<T: Real>(&self, p: &[T], x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.inp);
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &p[self.w + r * self.inp..self.w + (r + 1) * self.inp];
            let mut acc = p[self.b + r];
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            *yr = acc;
        }
    }

    /// Accumulates parameter gradients for upstream `dy` and, when asked,
    /// writes the input gradient into `dx`.
    pub fn backprop<T: Real>(&self, p: &[T], x: &[T], dy: &[T], grad: &mut [T], dx: Option<&mut [T]>) {
        for (r, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let grow = &mut grad[self.w + r * self.inp..self.w + (r + 1) * self.inp];
            for (gw, v) in grow.iter_mut().zip(x) {
                *gw += g * *v;
            }
            grad[self.b + r] += g;
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|d| *d = T::zero());
            for (r, &g) in dy.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = &p[self.w + r * self.inp..self.w + (r + 1) * self.inp];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * *w;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub ga0: Dense,
    pub ga1: Dense,
    pub ha: Dense,
    pub hs: Dense,
    pub ge0: Dense,
    pub ge1: Dense,
    pub prior_loc: usize,
    pub prior_log_scale: usize,
    pub gs0: Dense,
    pub gs1: Dense,
    pub layers: Vec<LayerSpan>,
    pub n: usize,
}

impl Layout {
    fn new(cfg: &ToyCodecConfig) -> Self {
        let (d, h, k, j) = (cfg.input_dim, cfg.hidden_dim, cfg.latent_dim, cfg.hyper_dim);
        let (g, q) = (cfg.hyper_hidden, cfg.entropy_hidden);
        let mut layers = Vec::new();
        let mut at = 0;
        let mut dense = |name: &str, role: LayerRole, out: usize, inp: usize| {
            let l = Dense::at(at, out, inp);
            layers.push(LayerSpan { name: name.into(), role, start: at, len: l.len() });
            at += l.len();
            l
        };
        let ga0 = dense("g_a.0", LayerRole::Analysis, h, d);
        let ga1 = dense("g_a.1", LayerRole::Analysis, k, h);
        let ha = dense("h_a", LayerRole::HyperAnalysis, j, k);
        let hs = dense("h_s", LayerRole::HyperSynthesis, g, j);
        let ge0 = dense("g_e.0", LayerRole::EntropyParams, q, g);
        let ge1 = dense("g_e.1", LayerRole::EntropyParams, 2 * k, q);
        let prior_loc = at;
        let prior_log_scale = at + j;
        layers.push(LayerSpan {
            name: "g_e.prior".into(),
            role: LayerRole::EntropyParams,
            start: at,
            len: 2 * j,
        });
        at += 2 * j;
        let mut dense = |name: &str, role: LayerRole, out: usize, inp: usize| {
            let l = Dense::at(at, out, inp);
            layers.push(LayerSpan { name: name.into(), role, start: at, len: l.len() });
            at += l.len();
            l
        };
        let gs0 = dense("g_s.0", LayerRole::Synthesis, h, k);
        let gs1 = dense("g_s.1", LayerRole::Synthesis, d, h);
        Self { ga0, ga1, ha, hs, ge0, ge1, prior_loc, prior_log_scale, gs0, gs1, layers, n: at }
    }
}

/// The toy codec: architecture fixed by [`ToyCodecConfig`], parameters held
/// externally in a [`FlatParams`].
#[derive(Clone, Debug)]
pub struct ToyCodec<T> {
    config: ToyCodecConfig,
    layout: Layout,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Real> ToyCodec<T> {
    pub fn new(config: ToyCodecConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self { config, layout, _scalar: std::marker::PhantomData })
    }

    pub fn config(&self) -> &ToyCodecConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.n
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layout.layers
    }

    /// Scaled-normal weights, zero biases, unit entropy scales.
    pub fn init_params(&self, seed: u64) -> FlatParams<T> {
        let mut rng = seed::derived_rng(seed, "init", 0);
        let mut values = vec![T::zero(); self.layout.n];
        let l = &self.layout;
        for (dense, gain) in [
            (l.ga0, 1.0),
            (l.ga1, 1.0),
            (l.ha, 1.0),
            (l.hs, 1.0),
            (l.ge0, 1.0),
            (l.ge1, 0.1),
            (l.gs0, 1.0),
            (l.gs1, 1.0),
        ] {
            let std = gain / (dense.inp as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut values[dense.w..dense.w + dense.out * dense.inp] {
                *v = T::from_f(normal.sample(&mut rng));
            }
        }
        FlatParams { values, layers: self.layout.layers.clone() }
    }

    pub(crate) fn check_layout(&self, params: &[T]) -> Result<()> {
        if params.len() != self.layout.n {
            return Err(Error::Layout { expected: self.layout.n, got: params.len() });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        if batch.dim != self.config.input_dim || batch.inputs.len() != batch.batch_size * batch.dim {
            return Err(Error::Config(format!(
                "batch of dimension {} does not fit codec input dimension {}",
                batch.dim, self.config.input_dim
            )));
        }
        if batch.batch_size == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(())
    }
}
