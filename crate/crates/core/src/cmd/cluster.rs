//! Trajectory correlations and complete-linkage clustering.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense symmetric matrix of absolute Pearson correlations.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
    /// Rows whose trajectory has zero variance.
    pub zero_variance: Vec<bool>,
}

impl<T: Real> CorrMatrix<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Centers and normalizes a trajectory. Returns `None` for zero variance.
pub fn unit_centered<T: Real>(row: &[T]) -> Option<Vec<T>> {
    let n = T::from_f(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let centered: Vec<T> = row.iter().map(|&x| x - mean).collect();
    let norm = centered.iter().map(|&x| x * x).sum::<T>().sqrt();
    let scale = row.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    // A constant row centers to rounding noise, not to exact zero.
    let floor = T::epsilon() * T::from_f(16.0) * scale * n.sqrt();
    if !(norm > floor) || norm == T::zero() {
        return None;
    }
    Some(centered.into_iter().map(|x| x / norm).collect())
}

/// |corr| between two prepared rows; zero-variance rows correlate with nothing.
#[inline]
pub fn abs_corr<T: Real>(a: Option<&[T]>, b: Option<&[T]>) -> T {
    match (a, b) {
        (Some(a), Some(b)) => {
            let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            dot.abs().min(T::one())
        }
        _ => T::zero(),
    }
}

pub fn correlation_matrix<T: Real>(rows: &[Vec<T>]) -> Result<CorrMatrix<T>> {
    let e = rows.first().map_or(0, Vec::len);
    if e < 2 {
        return Err(Error::TooFewEpochs { need: 2, got: e });
    }
    if rows.iter().any(|r| r.len() != e) {
        return Err(Error::Config("trajectories have unequal lengths".into()));
    }
    let prepared: Vec<Option<Vec<T>>> = rows.par_iter().map(|r| unit_centered(r)).collect();
    let n = rows.len();
    let mut data = vec![T::zero(); n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for (j, v) in out.iter_mut().enumerate() {
            *v = if i == j { T::one() } else { abs_corr(prepared[i].as_deref(), prepared[j].as_deref()) };
        }
    });
    Ok(CorrMatrix { n, data, zero_variance: prepared.iter().map(Option::is_none).collect() })
}

/// Complete-linkage agglomerative clustering on `1 − C`, stopped at `m`
/// clusters. Among equally distant pairs the lexicographically smallest
/// `(i, j)` merges first; a merged cluster keeps the lower index. Labels are
/// numbered by each cluster's smallest member.
pub fn cluster_modes<T: Real>(corr: &CorrMatrix<T>, m: usize) -> Result<Vec<usize>> {
    let n = corr.n;
    if m == 0 || m > n {
        return Err(Error::TooManyClusters { clusters: m, points: n });
    }
    let mut dist: Vec<f64> = corr.data.iter().map(|c| 1.0 - c.to_f()).collect();
    let mut active = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    // Nearest active neighbour above each row: (distance, index).
    let nearest = |dist: &[f64], active: &[bool], i: usize| -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in i + 1..n {
            if active[j] && dist[i * n + j] < best.0 {
                best = (dist[i * n + j], j);
            }
        }
        best
    };
    let mut nn: Vec<(f64, usize)> = (0..n).into_par_iter().map(|i| nearest(&dist, &active, i)).collect();

    for _ in 0..n - m {
        let mut pick = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..n {
            if active[i] && nn[i].1 != usize::MAX && (nn[i].0 < pick.0 || pick.1 == usize::MAX) {
                pick = (nn[i].0, i, nn[i].1);
            }
        }
        let (_, a, b) = pick;
        active[b] = false;
        parent[b] = a;
        for k in 0..n {
            if active[k] && k != a {
                let d = dist[a * n + k].max(dist[b * n + k]);
                dist[a * n + k] = d;
                dist[k * n + a] = d;
            }
        }
        nn[a] = nearest(&dist, &active, a);
        for k in 0..a {
            if active[k] && (nn[k].1 == a || nn[k].1 == b) {
                nn[k] = nearest(&dist, &active, k);
            }
        }
        for k in a + 1..b {
            if active[k] && nn[k].1 == b {
                nn[k] = nearest(&dist, &active, k);
            }
        }
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = root(i);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        labels.push(label_of_root[r]);
    }
    Ok(labels)
}

/// Per mode, the member with the highest mean |corr| to the other members.
/// Returns positions into the clustered set.
pub fn select_references<T: Real>(corr: &CorrMatrix<T>, labels: &[usize], m: usize) -> Result<Vec<usize>> {
    let mut members = vec![Vec::new(); m];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(mode, mem)| {
            if mem.is_empty() {
                return Err(Error::EmptyMode(mode));
            }
            if mem.len() == 1 {
                return Ok(mem[0]);
            }
            let mut best = (f64::NEG_INFINITY, mem[0]);
            for &i in mem {
                let s: f64 = mem.iter().filter(|&&j| j != i).map(|&j| corr.get(i, j).to_f()).sum();
                let mean = s / (mem.len() - 1) as f64;
                if mean > best.0 {
                    best = (mean, i);
                }
            }
            Ok(best.1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr_of(rows: &[Vec<f64>]) -> CorrMatrix<f64> {
        correlation_matrix(rows).unwrap()
    }

    #[test]
    fn pearson_hand_value() {
        let c = corr_of(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 7.0]]);
        assert!((c.get(0, 1) - 0.99339927).abs() < 1e-6);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn negation_and_identity() {
        let c = corr_of(&[vec![0.3, -1.0, 2.0, 0.1], vec![-0.3, 1.0, -2.0, -0.1]]);
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(c.get(1, 1), 1.0);
    }

    #[test]
    fn constant_rows_flagged() {
        let c = corr_of(&[vec![0.1, 0.1, 0.1], vec![1.0, 2.0, 3.0]]);
        assert!(c.zero_variance[0] && !c.zero_variance[1]);
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn too_short() {
        assert!(matches!(correlation_matrix(&[vec![1.0f64]]), Err(Error::TooFewEpochs { .. })));
    }

    #[test]
    fn duplicate_groups() {
        let a = vec![1.0, 3.0, 2.0, 5.0];
        let b = vec![4.0, -1.0, 0.5, 0.0];
        let c = corr_of(&[a.clone(), b.clone(), a.clone(), b.clone(), a]);
        assert_eq!(cluster_modes(&c, 2).unwrap(), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn m_equals_s() {
        let c = corr_of(&[vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0], vec![1.0, 1.0, 5.0]]);
        assert_eq!(cluster_modes(&c, 3).unwrap(), vec![0, 1, 2]);
        assert!(cluster_modes(&c, 4).is_err());
        assert_eq!(cluster_modes(&c, 1).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn ties_merge_smallest_pair() {
        // All off-diagonal distances equal: (0,1) merges first, then (0,2).
        let c = CorrMatrix { n: 4, data: vec![
            1.0, 0.5, 0.5, 0.5,
            0.5, 1.0, 0.5, 0.5,
            0.5, 0.5, 1.0, 0.5,
            0.5, 0.5, 0.5, 1.0,
        ], zero_variance: vec![false; 4] };
        assert_eq!(cluster_modes(&c, 3).unwrap(), vec![0, 0, 1, 2]);
        assert_eq!(cluster_modes(&c, 2).unwrap(), vec![0, 0, 0, 1]);
    }

    /// Textbook complete linkage: recompute every cluster distance from the
    /// member lists at each merge.
    fn naive_complete(c: &CorrMatrix<f64>, m: usize) -> Vec<usize> {
        let mut clusters: Vec<Vec<usize>> = (0..c.n).map(|i| vec![i]).collect();
        while clusters.len() > m {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let d = clusters[a]
                        .iter()
                        .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                        .map(|(i, j)| 1.0 - c.get(i, j))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
            let moved = clusters.remove(best.2);
            clusters[best.1].extend(moved);
        }
        let mut labels = vec![0; c.n];
        let mut order: Vec<_> = clusters.iter().map(|cl| *cl.iter().min().unwrap()).enumerate().collect();
        order.sort_by_key(|&(_, lo)| lo);
        for (label, (ci, _)) in order.into_iter().enumerate() {
            for &i in &clusters[ci] {
                labels[i] = label;
            }
        }
        labels
    }

    #[test]
    fn agrees_with_naive_linkage() {
        use rand::Rng;
        let mut rng = crate::seed::rng(5);
        for trial in 0..20 {
            let rows: Vec<Vec<f64>> = (0..25).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let c = corr_of(&rows);
            for m in [1, 3, 7, 25] {
                assert_eq!(cluster_modes(&c, m).unwrap(), naive_complete(&c, m), "trial {trial} m {m}");
            }
        }
    }

    #[test]
    fn reference_is_best_connected() {
        let c = CorrMatrix { n: 3, data: vec![
            1.0, 0.9, 0.8,
            0.9, 1.0, 0.1,
            0.8, 0.1, 1.0,
        ], zero_variance: vec![false; 3] };
        assert_eq!(select_references(&c, &[0, 0, 0], 1).unwrap(), vec![0]);
        assert_eq!(select_references(&c, &[0, 1, 0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(select_references(&c, &[0, 0, 0], 2), Err(Error::EmptyMode(1))));
    }
}
