//! Flat parameter storage, per-epoch trajectory snapshots and their on-disk
//! format.
//!
//! Snapshot files are little-endian:
//!
//! ```text
//! "TRJ1" | n_params: u32 | n_rows: u32 | epochs: [u32; n_rows] | rows: [f64; n_rows * n_params]
//! ```
//!
//! Rows are stored row-major, one row per recorded epoch.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"TRJ1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Analysis,
    Synthesis,
    HyperAnalysis,
    HyperSynthesis,
    EntropyParams,
}

impl LayerRole {
    /// Transform layers shape the reconstruction; everything else only feeds
    /// the rate term.
    pub fn is_transform(self) -> bool {
        matches!(self, LayerRole::Analysis | LayerRole::Synthesis)
    }

    pub fn is_entropy_side(self) -> bool {
        !self.is_transform()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerRole::Analysis => "analysis",
            LayerRole::Synthesis => "synthesis",
            LayerRole::HyperAnalysis => "hyper_analysis",
            LayerRole::HyperSynthesis => "hyper_synthesis",
            LayerRole::EntropyParams => "entropy_params",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    pub role: LayerRole,
    pub start: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Checks that the spans tile `[0, n)` exactly, in order.
pub fn validate_layers(layers: &[LayerSpan], n: usize) -> Result<()> {
    let mut next = 0;
    for span in layers {
        if span.len == 0 {
            return Err(Error::Config(format!("layer {} is empty", span.name)));
        }
        if span.start != next {
            return Err(Error::Config(format!(
                "layer {} starts at {} but the previous layer ends at {}",
                span.name, span.start, next
            )));
        }
        next += span.len;
    }
    if next != n {
        return Err(Error::Layout { expected: next, got: n });
    }
    Ok(())
}

/// The model's trainable parameters as one contiguous vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams<T> {
    pub values: Vec<T>,
    pub layers: Vec<LayerSpan>,
}

impl<T: Real> FlatParams<T> {
    pub fn new(values: Vec<T>, layers: Vec<LayerSpan>) -> Result<Self> {
        validate_layers(&layers, values.len())?;
        Ok(Self { values, layers })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, idx: usize) -> &[T] {
        &self.values[self.layers[idx].range()]
    }

    /// Index of the layer containing parameter `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        self.layers
            .partition_point(|span| span.start + span.len <= i)
    }

    /// Returns the first layer holding a non-finite value, if any.
    pub fn first_non_finite_layer(&self) -> Option<&LayerSpan> {
        self.layers
            .iter()
            .find(|span| self.values[span.range()].iter().any(|v| !v.is_finite()))
    }
}

/// Per-epoch parameter snapshots: the `N × E` trajectory matrix, stored with
/// one row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog<T> {
    n_params: usize,
    epochs: Vec<u32>,
    data: Vec<T>,
}

impl<T: Real> TrajectoryLog<T> {
    pub fn new(n_params: usize) -> Self {
        Self { n_params, epochs: Vec::new(), data: Vec::new() }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn epochs(&self) -> &[u32] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.n_params..(r + 1) * self.n_params]
    }

    pub fn last_row(&self) -> Option<&[T]> {
        (!self.is_empty()).then(|| self.row(self.len() - 1))
    }

    /// Appends a copy of `values` as the snapshot for `epoch`.
    pub fn record(&mut self, values: &[T], epoch: u32) -> Result<()> {
        if values.len() != self.n_params {
            return Err(Error::RowLength { expected: self.n_params, got: values.len() });
        }
        if let Some(&last) = self.epochs.last() {
            if epoch <= last {
                return Err(Error::NonMonotoneEpoch { epoch, last });
            }
        }
        self.epochs.push(epoch);
        self.data.extend_from_slice(values);
        Ok(())
    }

    /// Trajectory of parameter `i` across all recorded epochs.
    pub fn trajectory(&self, i: usize) -> Vec<T> {
        (0..self.len()).map(|r| self.data[r * self.n_params + i]).collect()
    }

    /// Trajectories of the given parameters, one row each.
    pub fn trajectories(&self, indices: &[usize]) -> Vec<Vec<T>> {
        indices.iter().map(|&i| self.trajectory(i)).collect()
    }

    /// Column-major copy (`N × E`), one trajectory per parameter.
    pub fn transpose(&self) -> Vec<Vec<T>> {
        let e = self.len();
        let mut out = vec![Vec::with_capacity(e); self.n_params];
        for r in 0..e {
            for (i, v) in self.row(r).iter().enumerate() {
                out[i].push(*v);
            }
        }
        out
    }
}

pub fn record_snapshot<T: Real>(
    log: &mut TrajectoryLog<T>,
    params: &FlatParams<T>,
    epoch: u32,
) -> Result<()> {
    log.record(&params.values, epoch)
}

pub fn encode_snapshot<T: Real>(log: &TrajectoryLog<T>) -> Result<Vec<u8>> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let n = u32::try_from(log.n_params)
        .map_err(|_| Error::SizeMismatch("parameter count exceeds u32".into()))?;
    let rows = u32::try_from(log.len())
        .map_err(|_| Error::SizeMismatch("row count exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * log.len() + 8 * log.data.len());
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    for e in &log.epochs {
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for v in &log.data {
        buf.extend_from_slice(&v.to_f().to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_snapshot<T: Real>(bytes: &[u8]) -> Result<TrajectoryLog<T>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing header".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let n = u32_at(4) as usize;
    let rows = u32_at(8) as usize;
    let epochs_end = 12 + 4 * rows;
    if bytes.len() < epochs_end {
        return Err(Error::Truncated(format!("header declares {rows} epochs")));
    }
    let payload = bytes.len() - epochs_end;
    let expected = 8 * n * rows;
    if payload != expected {
        // A payload that is a whole number of rows of some other width is a
        // header/body disagreement; anything else was cut short.
        let whole_rows = rows > 0 && payload % (8 * rows) == 0;
        if payload > expected || whole_rows {
            return Err(Error::SizeMismatch(format!(
                "header declares {n} parameters x {rows} rows, body holds {payload} bytes"
            )));
        }
        return Err(Error::Truncated(format!("expected {expected} payload bytes, found {payload}")));
    }
    let mut log = TrajectoryLog::new(n);
    let mut data = Vec::with_capacity(n * rows);
    for chunk in bytes[epochs_end..].chunks_exact(8) {
        data.push(T::from_f(f64::from_le_bytes(chunk.try_into().unwrap())));
    }
    for r in 0..rows {
        log.record(&data[r * n..(r + 1) * n], u32_at(12 + 4 * r))?;
    }
    Ok(log)
}

pub fn write_snapshot_file<T: Real>(log: &TrajectoryLog<T>, path: &Path) -> Result<()> {
    let bytes = encode_snapshot(log)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_snapshot_file<T: Real>(path: &Path) -> Result<TrajectoryLog<T>> {
    decode_snapshot(&fs::read(path)?)
}

/// `s` distinct indices drawn uniformly without replacement from `[0, n)`.
pub fn sample_indices(n: usize, s: usize, seed: u64) -> Result<Vec<usize>> {
    if s > n {
        return Err(Error::SampleTooLarge { requested: s, available: n });
    }
    let mut rng = seed::rng(seed);
    Ok(rand::seq::index::sample(&mut rng, n, s).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(n: usize) -> FlatParams<f64> {
        let layers = vec![LayerSpan {
            name: "all".into(),
            role: LayerRole::Analysis,
            start: 0,
            len: n,
        }];
        FlatParams::new((0..n).map(|i| i as f64 * 0.5).collect(), layers).unwrap()
    }

    #[test]
    fn record_base_case() {
        let mut log = TrajectoryLog::new(4);
        record_snapshot(&mut log, &params(4), 1).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.epochs(), &[1]);
    }

    #[test]
    fn record_counts_rows() {
        let p = params(4);
        let mut log = TrajectoryLog::new(4);
        for e in 1..=3 {
            record_snapshot(&mut log, &p, e).unwrap();
        }
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn repeated_epoch_is_rejected() {
        let p = params(4);
        let mut log = TrajectoryLog::new(4);
        record_snapshot(&mut log, &p, 2).unwrap();
        let err = record_snapshot(&mut log, &p, 2).unwrap_err();
        assert!(err.to_string().contains("non-monotone epoch"), "{err}");
    }

    #[test]
    fn recording_copies_values() {
        let mut p = params(3);
        let mut log = TrajectoryLog::new(3);
        record_snapshot(&mut log, &p, 1).unwrap();
        p.values[0] = 99.0;
        assert_eq!(log.row(0)[0], 0.0);
    }

    #[test]
    fn layers_must_tile() {
        let gap = vec![
            LayerSpan { name: "a".into(), role: LayerRole::Analysis, start: 0, len: 2 },
            LayerSpan { name: "b".into(), role: LayerRole::Synthesis, start: 3, len: 1 },
        ];
        assert!(FlatParams::new(vec![0.0; 4], gap).is_err());
        let short = vec![LayerSpan { name: "a".into(), role: LayerRole::Analysis, start: 0, len: 3 }];
        assert!(FlatParams::new(vec![0.0; 4], short).is_err());
    }

    #[test]
    fn layer_of_finds_span() {
        let layers = vec![
            LayerSpan { name: "a".into(), role: LayerRole::Analysis, start: 0, len: 2 },
            LayerSpan { name: "b".into(), role: LayerRole::Synthesis, start: 2, len: 3 },
        ];
        let p = FlatParams::new(vec![0.0f64; 5], layers).unwrap();
        assert_eq!(p.layer_of(0), 0);
        assert_eq!(p.layer_of(1), 0);
        assert_eq!(p.layer_of(2), 1);
        assert_eq!(p.layer_of(4), 1);
    }

    fn log_3x10() -> TrajectoryLog<f64> {
        let mut log = TrajectoryLog::new(10);
        for e in 1..=3u32 {
            let row: Vec<f64> = (0..10).map(|i| (i as f64).sin() * e as f64 + 1e-300).collect();
            log.record(&row, e).unwrap();
        }
        log
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.trj");
        let log = log_3x10();
        write_snapshot_file(&log, &path).unwrap();
        let back: TrajectoryLog<f64> = read_snapshot_file(&path).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_snapshot(&log_3x10()).unwrap();
        bytes[0] = b'X';
        let err = decode_snapshot::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn header_body_disagreement() {
        // Nine columns of data under a header that claims ten.
        let mut log = TrajectoryLog::new(9);
        for e in 1..=3u32 {
            log.record(&[e as f64; 9], e).unwrap();
        }
        let mut bytes = encode_snapshot(&log).unwrap();
        bytes[4..8].copy_from_slice(&10u32.to_le_bytes());
        let err = decode_snapshot::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_snapshot(&log_3x10()).unwrap();
        let err = decode_snapshot::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
        let err = decode_snapshot::<f64>(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
    }

    #[test]
    fn empty_log_is_not_written() {
        assert!(matches!(encode_snapshot(&TrajectoryLog::<f64>::new(3)), Err(Error::EmptyLog)));
    }

    #[test]
    fn exhaustive_sample_is_permutation() {
        let mut idx = sample_indices(5, 5, 11).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_indices(10_000, 100, 7).unwrap();
        let b = sample_indices(10_000, 100, 7).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
    }

    #[test]
    fn oversampling_fails() {
        assert!(sample_indices(3, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn persistence_is_lossless(
            n in 1usize..12,
            rows in 1usize..6,
            vals in proptest::collection::vec(proptest::num::f64::ANY, 72),
            start in 0u32..1000,
        ) {
            let mut log = TrajectoryLog::new(n);
            for r in 0..rows {
                let row: Vec<f64> = (0..n).map(|i| vals[(r * n + i) % vals.len()]).collect();
                log.record(&row, start + 3 * r as u32).unwrap();
            }
            let back: TrajectoryLog<f64> = decode_snapshot(&encode_snapshot(&log).unwrap()).unwrap();
            prop_assert_eq!(back.epochs(), log.epochs());
            for r in 0..rows {
                let a: Vec<u64> = back.row(r).iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = log.row(r).iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
