//! Noisy quadratic model: `L(θ) = ½ (θ − c)ᵀ A (θ − c)` with diagonal `A`
//! and `c ~ N(0, Σ)` redrawn every step. Closed-form steady-state variances
//! of SGD and of SMA with embedded coordinates, and a Monte-Carlo simulator
//! to check them against.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NqmConfig {
    /// Diagonal of `A`.
    pub a: Vec<f64>,
    /// Diagonal of `Σ`.
    pub sigma2: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
    pub interval: u32,
    /// Fraction `p` of coordinates that are embedded.
    pub embed_fraction: f64,
    /// Affine coefficients of embedded coordinates; `E[k²]` is their mean square.
    pub k_values: Vec<f64>,
    pub steps: usize,
    pub num_seeds: usize,
    pub seed: u64,
    /// Leading fraction of steps discarded before measuring.
    pub burn_in: f64,
    /// Starting value of every coordinate.
    pub init: f64,
}

impl Default for NqmConfig {
    fn default() -> Self {
        Self {
            a: log_spaced(0.1, 1.0, 10),
            sigma2: vec![1.0; 10],
            gamma: 0.1,
            alpha: 0.8,
            interval: 5,
            embed_fraction: 0.5,
            k_values: vec![0.9f64.sqrt()],
            steps: 200_000,
            num_seeds: 64,
            seed: 0,
            burn_in: 0.5,
            init: 0.0,
        }
    }
}

/// `n` values log-spaced over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (l, h) = (lo.ln(), hi.ln());
    (0..n).map(|i| (l + (h - l) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl NqmConfig {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn mean_k2(&self) -> f64 {
        if self.k_values.is_empty() {
            return 0.0;
        }
        self.k_values.iter().map(|k| k * k).sum::<f64>() / self.k_values.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.a.is_empty() || self.a.len() != self.sigma2.len() {
            return bad("a and sigma2 must be non-empty and of equal length".into());
        }
        if self.a.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("every a must be positive".into());
        }
        if self.sigma2.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("every sigma2 must be non-negative".into());
        }
        let max_a = self.a.iter().copied().fold(0.0, f64::max);
        if !(self.gamma >= 0.0 && self.gamma * max_a < 1.0) {
            return bad(format!("learning rate must satisfy 0 <= gamma < 1/max(a) = {}", 1.0 / max_a));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]".into());
        }
        if self.interval == 0 {
            return bad("interval must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.embed_fraction) {
            return bad("embed_fraction must lie in [0, 1]".into());
        }
        let pd = self.embed_fraction * self.dim() as f64;
        if (pd - pd.round()).abs() > 1e-9 {
            return bad(format!("embed_fraction * dim = {pd} must be an integer"));
        }
        if self.embed_fraction > 0.0 && self.k_values.is_empty() {
            return bad("k_values are required when embed_fraction > 0".into());
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad("burn_in must lie in [0, 1)".into());
        }
        if self.num_seeds == 0 || self.steps == 0 {
            return bad("steps and num_seeds must be at least 1".into());
        }
        Ok(())
    }
}

/// Steady-state SGD variance `γ²a²σ² / (1 − (1 − γa)²)`.
pub fn closed_form_sgd_variance(cfg: &NqmConfig) -> Vec<f64> {
    cfg.a
        .iter()
        .zip(&cfg.sigma2)
        .map(|(&a, &s2)| {
            let q = 1.0 - cfg.gamma * a;
            let denom = 1.0 - q * q;
            if denom == 0.0 {
                0.0
            } else {
                cfg.gamma * cfg.gamma * a * a * s2 / denom
            }
        })
        .collect()
}

/// Variance reduction of sampling-then-averaging at a given `γa`.
pub fn averaging_factor(alpha: f64, interval: u32, gamma_a: f64) -> f64 {
    let q = 1.0 - gamma_a;
    let ql = q.powi(interval as i32);
    let num = alpha * alpha * (1.0 - ql * ql);
    let den = num + 2.0 * alpha * (1.0 - alpha) * (1.0 - ql);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Steady-state variance with averaging and a fraction `p` of embedded
/// coordinates: `(1 − p + p·E[k²]) · factor · V_SGD`.
pub fn closed_form_proposed_variance(cfg: &NqmConfig) -> Vec<f64> {
    let mix = 1.0 - cfg.embed_fraction + cfg.embed_fraction * cfg.mean_k2();
    closed_form_sgd_variance(cfg)
        .into_iter()
        .zip(&cfg.a)
        .map(|(v, &a)| mix * averaging_factor(cfg.alpha, cfg.interval, cfg.gamma * a) * v)
        .collect()
}

/// Averaging without embedding.
pub fn closed_form_sma_variance(cfg: &NqmConfig) -> Vec<f64> {
    closed_form_proposed_variance(&NqmConfig { embed_fraction: 0.0, ..cfg.clone() })
}

/// `½ Σ a (E² + V + σ²)` with zero mean.
pub fn expected_loss(a: &[f64], variance: &[f64], sigma2: &[f64], mean: Option<&[f64]>) -> f64 {
    0.5 * a
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            let m = mean.map_or(0.0, |m| m[i]);
            ai * (m * m + variance[i] + sigma2[i])
        })
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NqmMethod {
    Sgd,
    Sma,
    Proposed,
}

impl NqmMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sma => "sma",
            Self::Proposed => "proposed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NqmResult<T> {
    pub method: NqmMethod,
    pub empirical_mean: Vec<T>,
    pub empirical_variance: Vec<T>,
    pub closedform_variance: Vec<T>,
    pub empirical_loss: T,
    pub closedform_loss: T,
}

impl<T: Real> NqmResult<T> {
    pub fn relative_errors(&self) -> Vec<f64> {
        self.empirical_variance
            .iter()
            .zip(&self.closedform_variance)
            .map(|(e, c)| {
                let (e, c) = (e.to_f(), c.to_f());
                if c == 0.0 {
                    e.abs()
                } else {
                    (e - c).abs() / c
                }
            })
            .collect()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors().into_iter().fold(0.0, f64::max)
    }
}

pub const NQM_CSV_HEADER: &str = "method,coordinate,a,sigma2,v_emp,v_closed,rel_err";

pub fn results_csv<T: Real>(cfg: &NqmConfig, results: &[NqmResult<T>]) -> String {
    let mut out = String::from(NQM_CSV_HEADER);
    out.push('\n');
    for r in results {
        for (i, rel) in r.relative_errors().into_iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{i},{},{},{},{},{rel}",
                r.method.as_str(),
                cfg.a[i],
                cfg.sigma2[i],
                r.empirical_variance[i].to_f(),
                r.closedform_variance[i].to_f()
            );
        }
    }
    out
}

/// Running first and second moments of the measured quantities.
#[derive(Clone, Debug)]
struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { sum: vec![0.0; d], sum_sq: vec![0.0; d], count: vec![0.0; d] }
    }

    fn add(&mut self, i: usize, x: f64, weight_sq: f64) {
        self.sum[i] += x;
        self.sum_sq[i] += x * x * weight_sq;
        self.count[i] += 1.0;
    }

    fn merge(mut self, o: &Moments) -> Self {
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sum_sq[i] += o.sum_sq[i];
            self.count[i] += o.count[i];
        }
        self
    }
}

/// One coordinate's iterate under SGD with optional sampling-then-averaging.
struct Chain<T> {
    theta: T,
    avg: T,
}

impl<T: Real> Chain<T> {
    fn new(init: T) -> Self {
        Self { theta: init, avg: init }
    }

    /// One SGD step; on a sample point the average absorbs the iterate and
    /// is written back. Returns whether this was a sample point.
    fn step(&mut self, gamma_a: T, gamma_a_sigma: T, noise: T, sync: Option<T>) -> bool {
        self.theta = self.theta - gamma_a * self.theta + gamma_a_sigma * noise;
        match sync {
            Some(alpha) => {
                self.avg = (T::one() - alpha) * self.avg + alpha * self.theta;
                self.theta = self.avg;
                true
            }
            None => false,
        }
    }
}

struct SeedStats {
    /// Per-coordinate moments of the free (or plain) iterate.
    free: Moments,
    /// Per-coordinate moments of embedded followers `k·φ_ref`.
    embedded: Moments,
}

fn simulate_seed<T: Real>(cfg: &NqmConfig, method: NqmMethod, s: usize) -> Result<SeedStats> {
    let d = cfg.dim();
    let mut rng = seed::derived_rng(cfg.seed, "nqm", s as u64);
    let averaging = method != NqmMethod::Sgd;
    let with_embedding = method == NqmMethod::Proposed && cfg.embed_fraction > 0.0;
    let init = T::from_f(cfg.init);
    let mut free: Vec<Chain<T>> = (0..d).map(|_| Chain::new(init)).collect();
    let mut reference: Vec<Chain<T>> = if with_embedding { (0..d).map(|_| Chain::new(init)).collect() } else { vec![] };
    let gamma_a: Vec<T> = cfg.a.iter().map(|&a| T::from_f(cfg.gamma * a)).collect();
    let gamma_a_sigma: Vec<T> = cfg.a.iter().zip(&cfg.sigma2).map(|(&a, &s2)| T::from_f(cfg.gamma * a * s2.sqrt())).collect();
    let alpha = T::from_f(cfg.alpha);
    let k2 = cfg.mean_k2();
    let burn = (cfg.burn_in * cfg.steps as f64).floor() as usize;
    let mut stats = SeedStats { free: Moments::new(d), embedded: Moments::new(d) };

    for t in 0..cfg.steps {
        let sample_point = averaging && (t + 1) % cfg.interval as usize == 0;
        let sync = sample_point.then_some(alpha);
        let measure = t >= burn && (!averaging || sample_point);
        for i in 0..d {
            let n: f64 = StandardNormal.sample(&mut rng);
            free[i].step(gamma_a[i], gamma_a_sigma[i], T::from_f(n), sync);
            if with_embedding {
                let n: f64 = StandardNormal.sample(&mut rng);
                reference[i].step(gamma_a[i], gamma_a_sigma[i], T::from_f(n), sync);
            }
            if !free[i].theta.is_finite() || (with_embedding && !reference[i].theta.is_finite()) {
                return Err(Error::Divergence { coordinate: i, step: t });
            }
            if measure {
                stats.free.add(i, free[i].theta.to_f(), 1.0);
                if with_embedding {
                    // Followers k_j·φ_ref (d_j = 0): the population second
                    // moment is E[k²]·φ_ref².
                    stats.embedded.add(i, reference[i].theta.to_f(), k2);
                }
            }
        }
    }
    Ok(stats)
}

/// Monte-Carlo steady state. Seeds run in parallel and are aggregated in
/// seed order.
pub fn simulate<T: Real>(cfg: &NqmConfig, method: NqmMethod) -> Result<NqmResult<T>> {
    cfg.validate()?;
    let d = cfg.dim();
    let per_seed = (0..cfg.num_seeds).into_par_iter().map(|s| simulate_seed::<T>(cfg, method, s)).collect::<Result<Vec<_>>>()?;
    let (mut free, mut emb) = (Moments::new(d), Moments::new(d));
    for st in &per_seed {
        free = free.merge(&st.free);
        emb = emb.merge(&st.embedded);
    }
    let p = if method == NqmMethod::Proposed { cfg.embed_fraction } else { 0.0 };
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..d {
        let fm = free.sum[i] / free.count[i].max(1.0);
        let fv = free.sum_sq[i] / free.count[i].max(1.0) - fm * fm;
        if p > 0.0 {
            let em = emb.sum[i] / emb.count[i].max(1.0);
            let ev = emb.sum_sq[i] / emb.count[i].max(1.0) - cfg.mean_k2() * em * em;
            let mean_k = cfg.k_values.iter().sum::<f64>() / cfg.k_values.len() as f64;
            mean[i] = (1.0 - p) * fm + p * mean_k * em;
            var[i] = (1.0 - p) * fv + p * ev;
        } else {
            mean[i] = fm;
            var[i] = fv;
        }
        var[i] = var[i].max(0.0);
    }
    let closed = match method {
        NqmMethod::Sgd => closed_form_sgd_variance(cfg),
        NqmMethod::Sma => closed_form_sma_variance(cfg),
        NqmMethod::Proposed => closed_form_proposed_variance(cfg),
    };
    let to_t = |v: &[f64]| v.iter().map(|&x| T::from_f(x)).collect::<Vec<T>>();
    Ok(NqmResult {
        method,
        empirical_loss: T::from_f(expected_loss(&cfg.a, &var, &cfg.sigma2, Some(&mean))),
        closedform_loss: T::from_f(expected_loss(&cfg.a, &closed, &cfg.sigma2, None)),
        empirical_mean: to_t(&mean),
        empirical_variance: to_t(&var),
        closedform_variance: to_t(&closed),
    })
}
