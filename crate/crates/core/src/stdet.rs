//! Embedding schedule. After the head stage, every `L` epochs the free
//! parameters whose affine coefficients moved least are frozen onto their
//! reference ("true" embedding), and a further batch is snapped onto its
//! reconstruction but left trainable ("dummy" embedding).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cmd::ModeDecomposition;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PSchedule {
    Constant,
    /// Ramps linearly up, keeping the total embedded count of `Constant`.
    Increasing,
    Decreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StdetConfig {
    /// Head-stage epochs before the decomposition (F).
    pub predefined_epochs: u32,
    /// Epochs between embedding events (L).
    pub period: u32,
    /// Fraction of N truly embedded per event (P).
    pub percentage: f64,
    pub dummy_cap: f64,
    pub dummy: bool,
    pub p_schedule: PSchedule,
}

impl Default for StdetConfig {
    fn default() -> Self {
        Self {
            predefined_epochs: 20,
            period: 1,
            percentage: 0.01,
            dummy_cap: 0.25,
            dummy: true,
            p_schedule: PSchedule::Constant,
        }
    }
}

impl StdetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("embedding period must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.percentage) || !(0.0..=1.0).contains(&self.dummy_cap) {
            return Err(Error::Config("embedding percentages must lie in [0, 1]".into()));
        }
        if self.predefined_epochs < 2 {
            return Err(Error::Config("at least two head-stage epochs are needed".into()));
        }
        Ok(())
    }

    /// Whether epoch `t` closes with an embedding event.
    pub fn is_event(&self, t: u32) -> bool {
        t > self.predefined_epochs && (t - self.predefined_epochs) % self.period == 0
    }

    /// Number of events in a run of `epochs` epochs.
    pub fn event_count(&self, epochs: u32) -> u32 {
        epochs.saturating_sub(self.predefined_epochs) / self.period
    }

    /// True-embedding fraction for event `e` (1-based) out of `n`.
    pub fn p_schedule(&self, e: u32, n: u32) -> f64 {
        let (e, n, p) = (e as f64, n as f64, self.percentage);
        match self.p_schedule {
            PSchedule::Constant => p,
            PSchedule::Increasing => 2.0 * p * e / (n + 1.0),
            PSchedule::Decreasing => 2.0 * p * (n + 1.0 - e) / (n + 1.0),
        }
    }

    /// Dummy-embedding fraction at epoch `t`: `min(t·P/2, cap)`.
    pub fn dummy_fraction(&self, t: u32) -> f64 {
        (t as f64 * self.percentage / 2.0).min(self.dummy_cap)
    }
}

/// `⌊fraction · n⌋`, robust to rounding just below an integer.
pub fn count_of(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Free,
    Reference,
    NonEmbeddable,
    TrueEmbedded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingState<T> {
    pub status: Vec<Status>,
    pub frozen_k: Vec<T>,
    pub frozen_d: Vec<T>,
    /// Coefficients captured at the previous change measurement.
    pub change_prev: (Vec<T>, Vec<T>),
    /// Reference parameter of each parameter's mode.
    pub ref_of: Vec<usize>,
    /// Truly embedded parameters in embedding order.
    pub embedded: Vec<usize>,
    /// `false` exactly for truly embedded parameters.
    pub trainable: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmbedEvent {
    pub requested: usize,
    pub selected: Vec<usize>,
}

impl EmbedEvent {
    pub fn shortfall(&self) -> usize {
        self.requested - self.selected.len()
    }
}

impl<T: Real> EmbeddingState<T> {
    pub fn new(decomp: &ModeDecomposition<T>, embeddable: &[bool]) -> Result<Self> {
        let n = decomp.len();
        if embeddable.len() != n {
            return Err(Error::Layout { expected: n, got: embeddable.len() });
        }
        let status = (0..n)
            .map(|i| {
                if decomp.is_reference[i] {
                    Status::Reference
                } else if !embeddable[i] {
                    Status::NonEmbeddable
                } else {
                    Status::Free
                }
            })
            .collect();
        Ok(Self {
            status,
            frozen_k: vec![T::zero(); n],
            frozen_d: vec![T::zero(); n],
            change_prev: (decomp.k.clone(), decomp.d.clone()),
            ref_of: decomp.mode_of.iter().map(|&m| decomp.ref_index[m]).collect(),
            embedded: Vec::new(),
            trainable: vec![true; n],
        })
    }

    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }

    pub fn embedded_fraction(&self) -> f64 {
        self.embedded.len() as f64 / self.len().max(1) as f64
    }

    pub fn trainable_count(&self) -> usize {
        self.len() - self.embedded.len()
    }

    /// `c_i = ‖(Δk_i, Δd_i)‖` since the previous call, which it replaces.
    pub fn long_term_change(&mut self, k: &[T], d: &[T]) -> Vec<T> {
        let c = k
            .iter()
            .zip(d)
            .zip(self.change_prev.0.iter().zip(&self.change_prev.1))
            .map(|((&k1, &d1), (&k0, &d0))| ((k1 - k0) * (k1 - k0) + (d1 - d0) * (d1 - d0)).sqrt())
            .collect();
        self.change_prev = (k.to_vec(), d.to_vec());
        c
    }

    /// Free parameters ordered by ascending change; NaN counts as largest
    /// and ties go to the lowest index.
    fn least_changed(&self, c: &[T], count: usize) -> Vec<usize> {
        let mut free: Vec<usize> = (0..self.len()).filter(|&i| self.status[i] == Status::Free).collect();
        let key = |i: usize| if c[i].is_nan() { f64::INFINITY } else { c[i].to_f() };
        free.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        free.truncate(count);
        free
    }

    /// Freezes the `count` least-changed free parameters on their current
    /// coefficients and snaps them onto their reconstruction.
    pub fn true_embed_step(&mut self, c: &[T], count: usize, decomp: &ModeDecomposition<T>, params: &mut [T]) -> EmbedEvent {
        let selected = self.least_changed(c, count);
        for &i in &selected {
            self.status[i] = Status::TrueEmbedded;
            self.trainable[i] = false;
            self.frozen_k[i] = decomp.k[i];
            self.frozen_d[i] = decomp.d[i];
            params[i] = self.frozen_k[i] * params[self.ref_of[i]] + self.frozen_d[i];
        }
        self.embedded.extend_from_slice(&selected);
        EmbedEvent { requested: count, selected }
    }

    /// Overwrites the `count` least-changed free parameters with their
    /// current reconstruction. They stay trainable.
    pub fn dummy_embed_step(&self, c: &[T], count: usize, decomp: &ModeDecomposition<T>, params: &mut [T]) -> EmbedEvent {
        let selected = self.least_changed(c, count);
        for &i in &selected {
            params[i] = decomp.k[i] * params[self.ref_of[i]] + decomp.d[i];
        }
        EmbedEvent { requested: count, selected }
    }

    /// Re-derives every truly embedded parameter from its reference.
    pub fn apply_embedded(&self, params: &mut [T]) {
        for &i in &self.embedded {
            params[i] = self.frozen_k[i] * params[self.ref_of[i]] + self.frozen_d[i];
        }
    }

    /// Checksum of the frozen coefficients of embedded parameters.
    pub fn frozen_checksum(&self) -> u64 {
        self.embedded.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &i| {
            let h = (h ^ self.frozen_k[i].to_f().to_bits()).wrapping_mul(0x100_0000_01b3);
            (h ^ self.frozen_d[i].to_f().to_bits()).wrapping_mul(0x100_0000_01b3)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingLogRow {
    pub epoch: u32,
    pub newly_true_embedded: usize,
    pub newly_dummy_embedded: usize,
    pub trainable_count: usize,
}

pub const EMBEDDING_LOG_HEADER: &str = "epoch,newly_true_embedded,newly_dummy_embedded,trainable_count";

pub fn embedding_log_csv(rows: &[EmbeddingLogRow]) -> String {
    let mut out = String::from(EMBEDDING_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.newly_true_embedded, r.newly_dummy_embedded, r.trainable_count);
    }
    out
}
