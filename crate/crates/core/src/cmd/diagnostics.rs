//! Emitted views of a decomposition: the correlation matrix reordered by
//! mode, and a histogram of relative coefficient changes.

use std::fmt::Write as _;

use super::CorrMatrix;
use crate::scalar::Real;

/// Upper bucket edges, in percent, of the coefficient-change histogram.
pub const CHANGE_BUCKETS: [(f64, &str); 7] = [
    (1.0, "0-1%"),
    (2.0, "1-2%"),
    (5.0, "2-5%"),
    (10.0, "5-10%"),
    (20.0, "10-20%"),
    (50.0, "20-50%"),
    (100.0, "50-100%"),
];
pub const OVERFLOW_BUCKET: &str = ">100%";

/// Sample positions sorted by (label, position), keeping at most `max_rows`
/// rows spread evenly over the sample.
pub fn mode_order(labels: &[usize], max_rows: usize) -> Vec<usize> {
    let n = labels.len();
    let keep: Vec<usize> = if n <= max_rows || max_rows == 0 {
        (0..n).collect()
    } else {
        (0..max_rows).map(|r| r * n / max_rows).collect()
    };
    let mut order = keep;
    order.sort_by_key(|&i| (labels[i], i));
    order
}

/// CSV of |corr| with rows and columns grouped by mode. The first column
/// holds each row's mode label.
pub fn reordered_correlation_csv<T: Real>(corr: &CorrMatrix<T>, labels: &[usize], max_rows: usize) -> String {
    let order = mode_order(labels, max_rows);
    let mut out = String::from("mode");
    for &j in &order {
        let _ = write!(out, ",{}", labels[j]);
    }
    out.push('\n');
    for &i in &order {
        let _ = write!(out, "{}", labels[i]);
        for &j in &order {
            let _ = write!(out, ",{:.4}", corr.get(i, j).to_f());
        }
        out.push('\n');
    }
    out
}

/// Mean off-diagonal |corr| within modes and across modes.
pub fn block_contrast<T: Real>(corr: &CorrMatrix<T>, labels: &[usize]) -> (f64, f64) {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..corr.n {
        for j in i + 1..corr.n {
            let v = corr.get(i, j).to_f();
            if labels[i] == labels[j] {
                within += v;
                nw += 1;
            } else {
                cross += v;
                nc += 1;
            }
        }
    }
    (within / nw.max(1) as f64, cross / nc.max(1) as f64)
}

/// Histogram of `|new − old| / |old|` in percent over the selected indices.
/// Zero `old` with a nonzero change counts as overflow.
pub fn coefficient_change_histogram<T: Real>(old: &[T], new: &[T], indices: &[usize]) -> Vec<(&'static str, usize)> {
    let mut counts = vec![0usize; CHANGE_BUCKETS.len() + 1];
    for &i in indices {
        let (a, b) = (old[i].to_f(), new[i].to_f());
        let pct = if a == b { 0.0 } else { 100.0 * (b - a).abs() / a.abs() };
        let slot = CHANGE_BUCKETS.iter().position(|&(hi, _)| pct < hi).unwrap_or(CHANGE_BUCKETS.len());
        counts[slot] += 1;
    }
    CHANGE_BUCKETS.iter().map(|b| b.1).chain([OVERFLOW_BUCKET]).zip(counts).collect()
}

pub fn histogram_csv(hist: &[(&str, usize)]) -> String {
    let total: usize = hist.iter().map(|h| h.1).sum();
    let mut out = String::from("bucket,count,fraction\n");
    for &(label, count) in hist {
        let _ = writeln!(out, "{label},{count},{}", count as f64 / total.max(1) as f64);
    }
    out
}
