//! Baseline training loop: clipped SGD or Adam, reduce-on-plateau learning
//! rate, per-epoch metrics, and hook points for the averaging and embedding
//! machinery.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramstore::FlatParams;
use crate::scalar::{c, l2_norm, Real};
use crate::seed;
use crate::toymodel::{generate_batch, Batch, LossBreakdown, Quantizer, ToyCodec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rule: UpdateRule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            steps_per_epoch: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            rule: UpdateRule::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 5,
            grad_clip: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("steps_per_epoch and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Optimizer state. Moments of masked (frozen) parameters are left untouched.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    rule: UpdateRule,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(rule: UpdateRule, n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { rule, beta1: c(beta1), beta2: c(beta2), eps: c(eps), m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn from_config(cfg: &TrainConfig, n: usize) -> Self {
        Self::new(cfg.rule, n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }
}

/// One clipped update. `trainable`, when given, masks out frozen parameters;
/// the clipping norm is taken over the trainable entries only.
pub fn sgd_step<T: Real>(
    params: &mut [T],
    grad: &[T],
    lr: T,
    grad_clip: T,
    trainable: Option<&[bool]>,
    opt: &mut Optimizer<T>,
) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Layout { expected: params.len(), got: grad.len() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let live = |i: usize| trainable.map_or(true, |m| m[i]);
    let norm = grad
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, g)| *g * *g)
        .sum::<T>()
        .sqrt();
    let scale = if norm > grad_clip { grad_clip / norm } else { T::one() };

    match opt.rule {
        UpdateRule::Sgd => {
            for (i, (w, g)) in params.iter_mut().zip(grad).enumerate() {
                if live(i) {
                    *w -= lr * scale * *g;
                }
            }
        }
        UpdateRule::Adam => {
            opt.t += 1;
            let bc1 = T::one() - opt.beta1.powi(opt.t);
            let bc2 = T::one() - opt.beta2.powi(opt.t);
            for (i, (w, g)) in params.iter_mut().zip(grad).enumerate() {
                if !live(i) {
                    continue;
                }
                let g = scale * *g;
                opt.m[i] = opt.beta1 * opt.m[i] + (T::one() - opt.beta1) * g;
                opt.v[i] = opt.beta2 * opt.v[i] + (T::one() - opt.beta2) * g * g;
                let m_hat = opt.m[i] / bc1;
                let v_hat = opt.v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
    }
    Ok(())
}

/// Reduce-on-plateau with zero tolerance: an epoch improves only if its loss
/// is strictly below the best seen so far.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    factor: f64,
    patience: u32,
    best: Option<f64>,
    bad_epochs: u32,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: u32) -> Self {
        Self { factor, patience, best: None, bad_epochs: 0 }
    }

    /// Feeds one epoch's evaluation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, eval_loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if eval_loss >= best => self.bad_epochs += 1,
            _ => {
                self.best = Some(eval_loss);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: u32,
    pub train_loss: T,
    pub eval_loss: T,
    pub eval_rate: T,
    pub eval_distortion: T,
    /// Parameters that were trainable during this epoch.
    pub trainable: usize,
    /// Fraction of parameters embedded after this epoch's end-of-epoch work.
    pub embedded_frac: T,
    /// Learning rate used during this epoch.
    pub lr: T,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_loss,eval_rate,eval_distortion,trainable,embedded_frac,lr";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog<T> {
    pub records: Vec<EpochRecord<T>>,
}

impl<T: Real> MetricsLog<T> {
    pub fn last(&self) -> Option<&EpochRecord<T>> {
        self.records.last()
    }

    pub fn at_epoch(&self, epoch: u32) -> Option<&EpochRecord<T>> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    /// Σ trainable parameters over all epochs (parameter·epochs).
    pub fn trainable_total(&self) -> u64 {
        self.records.iter().map(|r| r.trainable as u64).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss.to_f(),
                r.eval_loss.to_f(),
                r.eval_rate.to_f(),
                r.eval_distortion.to_f(),
                r.trainable,
                r.embedded_frac.to_f(),
                r.lr.to_f()
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err("unexpected header".into());
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 fields", n + 2));
            }
            let num = |i: usize| f[i].parse::<f64>().map(T::from_f).map_err(|e| format!("line {}: {e}", n + 2));
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|e| format!("line {}: {e}", n + 2))?,
                train_loss: num(1)?,
                eval_loss: num(2)?,
                eval_rate: num(3)?,
                eval_distortion: num(4)?,
                trainable: f[5].parse().map_err(|e| format!("line {}: {e}", n + 2))?,
                embedded_frac: num(6)?,
                lr: num(7)?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics<T> {
    pub loss: T,
    pub rate: T,
    pub distortion: T,
}

impl<T: Real> From<LossBreakdown<T>> for EvalMetrics<T> {
    fn from(l: LossBreakdown<T>) -> Self {
        Self { loss: l.total, rate: l.rate(), distortion: l.distortion }
    }
}

/// What the training loop needs from a model and its data.
pub trait Objective<T: Real> {
    fn num_params(&self) -> usize;

    /// Loss and gradient on the training batch for global step `step`.
    fn train_step(&self, params: &[T], step: u64) -> Result<(T, Vec<T>)>;

    fn evaluate(&self, params: &[T]) -> Result<EvalMetrics<T>>;
}

/// The toy codec on a stream of fresh synthetic batches, evaluated on a
/// frozen held-out batch with rounding quantization.
#[derive(Clone, Debug)]
pub struct CodecTask<T> {
    pub codec: ToyCodec<T>,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_batch: Batch<T>,
}

pub const EVAL_BATCH_SIZE: usize = 256;

impl<T: Real> CodecTask<T> {
    pub fn new(codec: ToyCodec<T>, batch_size: usize, seed: u64) -> Self {
        let dim = codec.config().input_dim;
        let eval_batch = generate_batch(EVAL_BATCH_SIZE, dim, seed::derive(seed, "eval", 0));
        Self { codec, batch_size, seed, eval_batch }
    }

    pub fn train_batch(&self, step: u64) -> Batch<T> {
        generate_batch(self.batch_size, self.codec.config().input_dim, seed::derive(self.seed, "train.batch", step))
    }

    /// A sample of the training distribution, used for instant decomposition
    /// losses and sensitivity estimates.
    pub fn sample_set(&self, n: usize, index: u64) -> Batch<T> {
        generate_batch(n, self.codec.config().input_dim, seed::derive(self.seed, "sample", index))
    }
}

impl<T: Real> Objective<T> for CodecTask<T> {
    fn num_params(&self) -> usize {
        self.codec.num_params()
    }

    fn train_step(&self, params: &[T], step: u64) -> Result<(T, Vec<T>)> {
        let batch = self.train_batch(step);
        let quant = Quantizer::Noise(seed::derive(self.seed, "train.noise", step));
        let (loss, grad) = self.codec.backward(params, &batch, quant)?;
        Ok((loss.total, grad))
    }

    fn evaluate(&self, params: &[T]) -> Result<EvalMetrics<T>> {
        Ok(self.codec.forward_loss(params, &self.eval_batch, Quantizer::Round)?.into())
    }
}

/// Callbacks invoked by [`train`]. Every method has a no-op default.
pub trait TrainHooks<T: Real> {
    /// `false` entries are frozen for the optimizer.
    fn trainable_mask(&self) -> Option<&[bool]> {
        None
    }

    fn after_step(&mut self, _params: &mut FlatParams<T>, _step: u64) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, _epoch: u32, _params: &mut FlatParams<T>) -> Result<()> {
        Ok(())
    }

    fn embedded_count(&self) -> usize {
        0
    }

    /// Parameters to evaluate instead of the live ones (test-time averaging).
    fn eval_params(&self) -> Option<&[T]> {
        None
    }
}

pub struct NoHooks;

impl<T: Real> TrainHooks<T> for NoHooks {}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub metrics: MetricsLog<T>,
    pub params: FlatParams<T>,
}

pub fn train<T: Real, O: Objective<T>, H: TrainHooks<T>>(
    objective: &O,
    init: FlatParams<T>,
    cfg: &TrainConfig,
    hooks: &mut H,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = objective.num_params();
    if init.len() != n {
        return Err(Error::Layout { expected: n, got: init.len() });
    }
    let mut params = init;
    let mut opt = Optimizer::from_config(cfg, n);
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut lr = cfg.learning_rate;
    let mut metrics = MetricsLog { records: Vec::with_capacity(cfg.epochs as usize) };
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let trainable = n - hooks.embedded_count();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let (loss, grad) = objective.train_step(&params.values, step)?;
            loss_sum += loss.to_f();
            let mask = hooks.trainable_mask();
            #[cfg(debug_assertions)]
            let frozen_before: Vec<T> = mask
                .map(|m| params.values.iter().zip(m).filter(|(_, &t)| !t).map(|(v, _)| *v).collect())
                .unwrap_or_default();
            sgd_step(&mut params.values, &grad, c(lr), c(cfg.grad_clip), mask, &mut opt)?;
            #[cfg(debug_assertions)]
            if let Some(m) = mask {
                let after = params.values.iter().zip(m).filter(|(_, &t)| !t).map(|(v, _)| *v);
                debug_assert!(after.eq(frozen_before.into_iter()), "optimizer touched a frozen parameter");
            }
            hooks.after_step(&mut params, step)?;
            if let Some(span) = params.first_non_finite_layer() {
                return Err(Error::NonFinite(span.name.clone()));
            }
            step += 1;
        }
        hooks.after_epoch(epoch, &mut params)?;
        let eval = objective.evaluate(hooks.eval_params().unwrap_or(&params.values))?;
        metrics.records.push(EpochRecord {
            epoch,
            train_loss: c(loss_sum / cfg.steps_per_epoch as f64),
            eval_loss: eval.loss,
            eval_rate: eval.rate,
            eval_distortion: eval.distortion,
            trainable,
            embedded_frac: c(hooks.embedded_count() as f64 / n as f64),
            lr: c(lr),
        });
        lr = plateau.step(eval.loss.to_f(), lr);
    }
    Ok(TrainOutcome { metrics, params })
}

/// Euclidean norm helper re-exported for callers that clip manually.
pub fn grad_norm<T: Real>(grad: &[T]) -> T {
    l2_norm(grad)
}
