//! Correlation mode decomposition: parameter trajectories are grouped into
//! modes of highly correlated trajectories, and every parameter is modelled
//! as an affine function of its mode's reference parameter.

mod affine;
mod cluster;
pub mod diagnostics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use affine::{fit_affine, recursive_update, Gram2, RIDGE};
pub use cluster::{abs_corr, cluster_modes, correlation_matrix, select_references, unit_centered, CorrMatrix};

use crate::error::{Error, Result};
use crate::paramstore::{sample_indices, TrajectoryLog};
use crate::scalar::Real;

/// Sampled trajectories per mode.
pub const SAMPLES_PER_MODE: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct ModeDecomposition<T> {
    pub mode_of: Vec<usize>,
    pub ref_index: Vec<usize>,
    pub k: Vec<T>,
    pub d: Vec<T>,
    pub gram: Vec<Gram2<T>>,
    /// Reference trajectory per mode, one value per fitted epoch.
    pub ref_history: Vec<Vec<T>>,
    pub members: Vec<Vec<usize>>,
    /// Parameters whose head-stage trajectory had zero variance.
    pub constant: Vec<usize>,
    pub is_reference: Vec<bool>,
    /// Sampled parameter indices (ascending) and their cluster labels.
    pub sample: Vec<usize>,
    pub sample_labels: Vec<usize>,
}

impl<T: Real> ModeDecomposition<T> {
    pub fn num_modes(&self) -> usize {
        self.ref_index.len()
    }

    pub fn len(&self) -> usize {
        self.mode_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mode_of.is_empty()
    }

    /// `k_i · w_ref(i) + d_i` evaluated at the given parameter vector.
    #[inline]
    pub fn reconstruct(&self, i: usize, params: &[T]) -> T {
        self.k[i] * params[self.ref_index[self.mode_of[i]]] + self.d[i]
    }

    /// Every parameter replaced by its affine reconstruction; references keep
    /// their values.
    pub fn reconstruct_all(&self, params: &[T]) -> Vec<T> {
        (0..params.len())
            .map(|i| if self.is_reference[i] { params[i] } else { self.reconstruct(i, params) })
            .collect()
    }

    /// Absorbs one more epoch of parameter values into every mode's fit.
    pub fn update(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.len() {
            return Err(Error::Layout { expected: self.len(), got: params.len() });
        }
        let updated: Vec<Result<(Vec<[T; 2]>, Gram2<T>)>> = (0..self.num_modes())
            .into_par_iter()
            .map(|m| {
                let w = params[self.ref_index[m]];
                let mut coefs: Vec<[T; 2]> = self.members[m].iter().map(|&i| [self.k[i], self.d[i]]).collect();
                let values: Vec<T> = self.members[m].iter().map(|&i| params[i]).collect();
                let mut g = self.gram[m];
                recursive_update(&mut coefs, &mut g, &values, w)?;
                Ok((coefs, g))
            })
            .collect();
        for (m, res) in updated.into_iter().enumerate() {
            let (coefs, g) = res?;
            for (&i, kd) in self.members[m].iter().zip(coefs) {
                if self.is_reference[i] {
                    continue;
                }
                self.k[i] = kd[0];
                self.d[i] = kd[1];
            }
            self.gram[m] = g;
            self.ref_history[m].push(params[self.ref_index[m]]);
        }
        Ok(())
    }
}

/// Per-parameter mode by maximum |corr| to the references (lowest mode on
/// ties). Sampled parameters keep their cluster labels.
pub fn assign_modes<T: Real>(
    trajectories: &[Vec<T>],
    refs: &[usize],
    sampled: &[(usize, usize)],
) -> (Vec<usize>, Vec<usize>) {
    let prepared_refs: Vec<Option<Vec<T>>> = refs.iter().map(|&r| unit_centered(&trajectories[r])).collect();
    let assigned: Vec<(usize, bool)> = trajectories
        .par_iter()
        .map(|traj| {
            let u = unit_centered(traj);
            let mut best = (T::neg_infinity(), 0);
            for (m, r) in prepared_refs.iter().enumerate() {
                let v = abs_corr(u.as_deref(), r.as_deref());
                if v > best.0 {
                    best = (v, m);
                }
            }
            (best.1, u.is_none())
        })
        .collect();
    let mut labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    for &(param, label) in sampled {
        labels[param] = label;
    }
    for (m, &r) in refs.iter().enumerate() {
        labels[r] = m;
    }
    let constant = assigned.iter().enumerate().filter(|(_, a)| a.1).map(|(i, _)| i).collect();
    (labels, constant)
}

/// Full decomposition with `m` modes from `SAMPLES_PER_MODE · m` sampled
/// trajectories of the log.
pub fn decompose<T: Real>(log: &TrajectoryLog<T>, m: usize, seed: u64) -> Result<ModeDecomposition<T>> {
    let n = log.n_params();
    if log.len() < 2 {
        return Err(Error::TooFewEpochs { need: 2, got: log.len() });
    }
    let mut sample = sample_indices(n, SAMPLES_PER_MODE * m, seed)?;
    sample.sort_unstable();
    let trajectories = log.transpose();
    decompose_sampled(&trajectories, &sample, m)
}

/// Decomposition from explicit per-parameter trajectories and sample set.
pub fn decompose_sampled<T: Real>(trajectories: &[Vec<T>], sample: &[usize], m: usize) -> Result<ModeDecomposition<T>> {
    let n = trajectories.len();
    let rows: Vec<Vec<T>> = sample.iter().map(|&i| trajectories[i].clone()).collect();
    let corr = correlation_matrix(&rows)?;
    let labels = cluster_modes(&corr, m)?;
    let ref_pos = select_references(&corr, &labels, m)?;
    let refs: Vec<usize> = ref_pos.iter().map(|&p| sample[p]).collect();
    let sampled: Vec<(usize, usize)> = sample.iter().copied().zip(labels.iter().copied()).collect();
    let (mode_of, constant) = assign_modes(trajectories, &refs, &sampled);

    let mut members = vec![Vec::new(); m];
    for (i, &l) in mode_of.iter().enumerate() {
        members[l].push(i);
    }
    let mut is_reference = vec![false; n];
    for &r in &refs {
        is_reference[r] = true;
    }
    let mut k = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    let fits: Vec<Result<(Vec<[T; 2]>, Gram2<T>)>> = (0..m)
        .into_par_iter()
        .map(|mode| {
            let rows: Vec<&[T]> = members[mode].iter().map(|&i| trajectories[i].as_slice()).collect();
            fit_affine(&rows, &trajectories[refs[mode]])
        })
        .collect();
    let mut gram = Vec::with_capacity(m);
    for (mode, fit) in fits.into_iter().enumerate() {
        let (coefs, g) = fit?;
        for (&i, kd) in members[mode].iter().zip(coefs) {
            (k[i], d[i]) = if is_reference[i] { (T::one(), T::zero()) } else { (kd[0], kd[1]) };
        }
        gram.push(g);
    }
    Ok(ModeDecomposition {
        mode_of,
        ref_history: refs.iter().map(|&r| trajectories[r].clone()).collect(),
        ref_index: refs,
        k,
        d,
        gram,
        members,
        constant,
        is_reference,
        sample: sample.to_vec(),
        sample_labels: labels,
    })
}

/// Loss of the model with every parameter replaced by its reconstruction at
/// `params`. The caller's parameters are untouched.
pub fn instant_rd_loss<T: Real, F>(decomp: &ModeDecomposition<T>, params: &[T], eval: F) -> Result<T>
where
    F: Fn(&[T]) -> Result<T>,
{
    eval(&decomp.reconstruct_all(params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Saturated,
    Exhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmdSearchResult {
    pub chosen_m: usize,
    pub chosen_s: usize,
    /// `(M, S, instant loss)` per evaluated candidate, in order.
    pub losses: Vec<(usize, usize, f64)>,
    pub stop_reason: StopReason,
}

impl CmdSearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modes,samples,instant_loss,chosen\n");
        for &(m, s, l) in &self.losses {
            let _ = writeln!(out, "{m},{s},{l},{}", u8::from(m == self.chosen_m));
        }
        out
    }
}

/// Initial "previous loss" of the saturation search.
pub const SEARCH_PREV_INIT: f64 = 10_000.0;
/// Relative improvement below which the search stops.
pub const SEARCH_THRESHOLD: f64 = 1e-3;

/// A relative change at or below the threshold counts as saturated; the
/// slack absorbs rounding when the change is exactly on the boundary.
pub fn is_saturated(cur: f64, prev: f64) -> bool {
    ((cur - prev) / prev).abs() <= SEARCH_THRESHOLD * (1.0 + 1e-9)
}

/// Walks the ascending candidate list and stops at the first candidate
/// whose loss differs from its predecessor's by less than the threshold;
/// that candidate is chosen. Without saturation the last one is chosen.
pub fn saturation_pick(losses: &[f64]) -> (usize, StopReason) {
    let mut prev = SEARCH_PREV_INIT;
    for (i, &cur) in losses.iter().enumerate() {
        if is_saturated(cur, prev) {
            return (i, StopReason::Saturated);
        }
        prev = cur;
    }
    (losses.len().saturating_sub(1), StopReason::Exhausted)
}

/// Evaluates candidates lazily in ascending order and keeps the
/// decomposition of the chosen one.
pub fn select_hyperparams<T: Real, F>(
    candidates: &[usize],
    log: &TrajectoryLog<T>,
    eval: F,
    seed: u64,
) -> Result<(CmdSearchResult, ModeDecomposition<T>)>
where
    F: Fn(&[T]) -> Result<T>,
{
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("mode candidates must be strictly ascending".into()));
    }
    let params = log.last_row().ok_or(Error::EmptyLog)?.to_vec();
    let trajectories = log.transpose();
    let n = log.n_params();
    let mut losses = Vec::new();
    let mut prev = SEARCH_PREV_INIT;
    for (ci, &m) in candidates.iter().enumerate() {
        let s = SAMPLES_PER_MODE * m;
        let mut sample = sample_indices(n, s, crate::seed::derive(seed, "cmd.sample", m as u64))?;
        sample.sort_unstable();
        let decomp = decompose_sampled(&trajectories, &sample, m)?;
        let cur = instant_rd_loss(&decomp, &params, &eval)?.to_f();
        losses.push((m, s, cur));
        let saturated = is_saturated(cur, prev);
        if saturated || ci + 1 == candidates.len() {
            let stop_reason = if saturated { StopReason::Saturated } else { StopReason::Exhausted };
            let result = CmdSearchResult { chosen_m: m, chosen_s: s, losses, stop_reason };
            return Ok((result, decomp));
        }
        prev = cur;
    }
    unreachable!("loop returns at the last candidate")
}

#[cfg(test)]
mod tests;
