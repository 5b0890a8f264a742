//! Sampling-then-moving-average: every `l` optimizer steps the live
//! parameters are folded into a moving average, which is then written back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmaConfig {
    pub alpha: f64,
    pub interval: u32,
}

impl Default for SmaConfig {
    fn default() -> Self {
        Self { alpha: 0.8, interval: 5 }
    }
}

impl SmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.interval == 0 {
            return Err(Error::Config("interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmaState<T> {
    pub w_sma: Vec<T>,
    pub alpha: T,
    pub interval: u32,
    pub step_counter: u64,
}

pub fn sma_init<T: Real>(params: &[T], cfg: SmaConfig) -> Result<SmaState<T>> {
    cfg.validate()?;
    Ok(SmaState { w_sma: params.to_vec(), alpha: c(cfg.alpha), interval: cfg.interval, step_counter: 0 })
}

/// Call once after every optimizer step. Returns `true` when this step was a
/// sample point and `params` were overwritten with the averaged state.
pub fn sma_maybe_update<T: Real>(state: &mut SmaState<T>, params: &mut [T]) -> bool {
    debug_assert_eq!(state.w_sma.len(), params.len());
    state.step_counter += 1;
    if state.step_counter % state.interval as u64 != 0 {
        return false;
    }
    let a = state.alpha;
    let keep = T::one() - a;
    for (s, w) in state.w_sma.iter_mut().zip(params.iter_mut()) {
        *s = keep * *s + a * *w;
        *w = *s;
    }
    true
}

/// Plain exponential moving average updated every step and used only for
/// evaluation; the live parameters are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub w_ema: Vec<T>,
    pub decay: T,
}

impl<T: Real> EmaState<T> {
    /// `decay` is the weight kept on the previous average.
    pub fn new(params: &[T], decay: f64) -> Self {
        Self { w_ema: params.to_vec(), decay: c(decay) }
    }

    pub fn update(&mut self, params: &[T]) {
        let a = T::one() - self.decay;
        for (e, w) in self.w_ema.iter_mut().zip(params) {
            *e = self.decay * *e + a * *w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn init_copies() {
        let mut p = vec![1.0, 2.0];
        let s = sma_init(&p, SmaConfig::default()).unwrap();
        p[0] = 9.0;
        assert_eq!(s.w_sma, vec![1.0, 2.0]);
        let s2 = sma_init(&[1.0, 2.0], SmaConfig { alpha: 0.1, interval: 7 }).unwrap();
        assert_eq!(s.w_sma, s2.w_sma);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(sma_init(&[0.0f64], SmaConfig { alpha: 0.0, interval: 1 }).is_err());
        assert!(sma_init(&[0.0f64], SmaConfig { alpha: 1.5, interval: 1 }).is_err());
        assert!(sma_init(&[0.0f64], SmaConfig { alpha: 0.5, interval: 0 }).is_err());
    }

    #[test]
    fn alpha_one_is_identity() {
        let mut s = sma_init(&[0.0, 0.0], SmaConfig { alpha: 1.0, interval: 2 }).unwrap();
        let mut p = vec![3.0, -4.0];
        assert!(!sma_maybe_update(&mut s, &mut p));
        assert!(sma_maybe_update(&mut s, &mut p));
        assert_eq!(p, vec![3.0, -4.0]);
    }

    #[test]
    fn inert_off_cycle() {
        let mut s = sma_init(&[0.0], SmaConfig { alpha: 0.5, interval: 5 }).unwrap();
        let mut p = vec![1.0];
        for _ in 0..4 {
            p[0] += 1.0;
            assert!(!sma_maybe_update(&mut s, &mut p));
        }
        assert_eq!(p[0], 5.0);
        assert!(sma_maybe_update(&mut s, &mut p));
        assert_eq!(p[0], 2.5);
    }

    #[test]
    fn half_recurrence() {
        let mut s = sma_init(&[0.0], SmaConfig { alpha: 0.5, interval: 1 }).unwrap();
        let mut prev = 0.0;
        for w in [1.0, 3.0, -2.0, 0.5] {
            let mut p = vec![w];
            sma_maybe_update(&mut s, &mut p);
            let expect = 0.5 * prev + 0.5 * w;
            assert_eq!(s.w_sma[0], expect);
            assert_eq!(p[0], expect);
            prev = expect;
        }
    }

    #[test]
    fn ema_tracks_without_touching() {
        let mut e = EmaState::<f64>::new(&[0.0], 0.9);
        let p = [1.0];
        e.update(&p);
        assert!((e.w_ema[0] - 0.1).abs() < 1e-15);
        assert_eq!(p, [1.0]);
    }

    fn unrolled(alpha: f64, w0: f64, samples: &[f64]) -> f64 {
        let t = samples.len() - 1;
        let mut acc = 0.0;
        for j in 0..=t {
            acc += (1.0 - alpha).powi(j as i32) * samples[t - j];
        }
        alpha * acc + (1.0 - alpha).powi(t as i32 + 1) * w0
    }

    proptest! {
        #[test]
        fn matches_unrolled_sum(alpha in 0.01f64..=1.0, l in 1u32..6, seed in any::<u64>()) {
            let mut rng = crate::seed::rng(seed);
            let w0: f64 = rng.random_range(-1.0..1.0);
            let mut s = sma_init(&[w0], SmaConfig { alpha, interval: l }).unwrap();
            let mut sampled = Vec::new();
            let mut p = vec![w0];
            while sampled.len() < 20 {
                p[0] += rng.random_range(-1.0..1.0);
                let at_sample = p[0];
                if sma_maybe_update(&mut s, &mut p) {
                    sampled.push(at_sample);
                    let oracle = unrolled(alpha, w0, &sampled);
                    prop_assert!((s.w_sma[0] - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
                }
            }
        }
    }
}
