use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;
use crate::seed;

/// A batch of flattened input patches, row-major `batch_size × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub inputs: Vec<T>,
    pub batch_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl<T: Real> Batch<T> {
    pub fn sample(&self, b: usize) -> &[T] {
        &self.inputs[b * self.dim..(b + 1) * self.dim]
    }

    /// Single-sample batch holding sample `b`.
    pub fn single(&self, b: usize) -> Batch<T> {
        Batch { inputs: self.sample(b).to_vec(), batch_size: 1, dim: self.dim, seed: self.seed }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Batch<T> {
        let n = n.min(self.batch_size);
        Batch { inputs: self.inputs[..n * self.dim].to_vec(), batch_size: n, dim: self.dim, seed: self.seed }
    }
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn side_of(dim: usize) -> Option<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    (s * s == dim).then_some(s)
}

/// Separable 5-tap binomial blur with clamped borders. Square dimensions are
/// treated as `s × s` patches, anything else as a 1-D signal.
fn low_pass(noise: &[f64]) -> Vec<f64> {
    let blur_1d = |src: &[f64], len: usize, stride: usize, count: usize, offset: &dyn Fn(usize) -> usize| {
        let mut out = src.to_vec();
        for line in 0..count {
            let base = offset(line);
            for i in 0..len {
                let mut acc = 0.0;
                for (t, w) in BINOMIAL5.iter().enumerate() {
                    let j = (i as isize + t as isize - 2).clamp(0, len as isize - 1) as usize;
                    acc += w * src[base + j * stride];
                }
                out[base + i * stride] = acc;
            }
        }
        out
    };
    match side_of(noise.len()) {
        Some(s) if s > 1 => {
            let rows = blur_1d(noise, s, 1, s, &|r| r * s);
            blur_1d(&rows, s, s, s, &|c| c)
        }
        _ => blur_1d(noise, noise.len(), 1, 1, &|_| 0),
    }
}

/// Deterministic smoothed random fields, min-max normalized to `[0, 1]` per
/// sample.
pub fn generate_batch<T: Real>(batch_size: usize, dim: usize, seed: u64) -> Batch<T> {
    let mut rng = seed::derived_rng(seed, "patch", 0);
    let mut inputs = Vec::with_capacity(batch_size * dim);
    for _ in 0..batch_size {
        let noise: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let field = low_pass(&noise);
        let (lo, hi) = field
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        inputs.extend(field.iter().map(|&v| {
            let u = if span > 0.0 { (v - lo) / span } else { 0.5 };
            T::from_f(u)
        }));
    }
    Batch { inputs, batch_size, dim, seed }
}
