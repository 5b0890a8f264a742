use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

struct Planted {
    trajectories: Vec<Vec<f64>>,
    family: Vec<usize>,
    /// `x_i = a_i·base_f + b_i + noise`
    a: Vec<f64>,
    b: Vec<f64>,
}

fn planted(families: usize, per_family: usize, epochs: usize, noise: f64, seed: u64) -> Planted {
    let mut rng = crate::seed::rng(seed);
    let bases: Vec<Vec<f64>> = (0..families)
        .map(|_| {
            let mut x = 0.0;
            (0..epochs)
                .map(|_| {
                    x += rng.random_range(-1.0..1.0);
                    x
                })
                .collect()
        })
        .collect();
    let mut p = Planted { trajectories: vec![], family: vec![], a: vec![], b: vec![] };
    for i in 0..families * per_family {
        let f = i % families;
        let a = rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let b = rng.random_range(-1.0..1.0);
        let row = bases[f]
            .iter()
            .map(|&x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                a * x + b + noise * e
            })
            .collect();
        p.trajectories.push(row);
        p.family.push(f);
        p.a.push(a);
        p.b.push(b);
    }
    p
}

/// Fraction of parameters whose mode's majority family matches their own.
fn membership_accuracy(labels: &[usize], family: &[usize], m: usize, families: usize) -> f64 {
    let mut counts = vec![vec![0usize; families]; m];
    for (&l, &f) in labels.iter().zip(family) {
        counts[l][f] += 1;
    }
    let correct: usize = counts.iter().map(|c| *c.iter().max().unwrap()).sum();
    correct as f64 / labels.len() as f64
}

#[test]
fn planted_families_cluster_exactly() {
    let p = planted(3, 10, 12, 1e-3, 1);
    let corr = correlation_matrix(&p.trajectories).unwrap();
    let labels = cluster_modes(&corr, 3).unwrap();
    assert_eq!(membership_accuracy(&labels, &p.family, 3, 3), 1.0);
    let refs = select_references(&corr, &labels, 3).unwrap();
    for (m, &r) in refs.iter().enumerate() {
        assert_eq!(labels[r], m);
    }
    let (within, cross) = diagnostics::block_contrast(&corr, &labels);
    assert!(within > cross);
}

#[test]
fn planted_pipeline_recovers_coefficients() {
    let p = planted(3, 400, 15, 1e-3, 2);
    let sample: Vec<usize> = (0..p.trajectories.len()).step_by(4).collect();
    let dec = decompose_sampled(&p.trajectories, &sample, 3).unwrap();
    assert!(membership_accuracy(&dec.mode_of, &p.family, 3, 3) >= 0.99);
    for i in 0..p.trajectories.len() {
        let r = dec.ref_index[dec.mode_of[i]];
        assert_eq!(p.family[r], p.family[i]);
        let k = p.a[i] / p.a[r];
        let d = p.b[i] - k * p.b[r];
        assert!((dec.k[i] - k).abs() <= 1e-2, "k {} vs {}", dec.k[i], k);
        assert!((dec.d[i] - d).abs() <= 1e-2, "d {} vs {}", dec.d[i], d);
    }
}

#[test]
fn proportional_parameter_joins_its_reference() {
    let traj = vec![
        vec![1.0, 2.0, 0.0, 3.0],
        vec![0.0, 1.0, 1.0, -1.0],
        vec![5.0, 5.0, 1.0, 0.0],
        vec![2.0, 4.0, 0.0, 6.0],
        vec![0.7, 0.7, 0.7, 0.7],
    ];
    let (labels, constant) = assign_modes(&traj, &[1, 2, 0], &[]);
    assert_eq!(labels[3], 2);
    assert_eq!(labels[4], 0);
    assert_eq!(constant, vec![4]);
}

#[test]
fn references_have_identity_coefficients() {
    let p = planted(2, 300, 10, 1e-3, 3);
    let sample: Vec<usize> = (0..600).step_by(3).collect();
    let dec = decompose_sampled(&p.trajectories, &sample, 2).unwrap();
    for (m, &r) in dec.ref_index.iter().enumerate() {
        assert_eq!(dec.mode_of[r], m);
        assert_eq!((dec.k[r], dec.d[r]), (1.0, 0.0));
        assert!(dec.gram[m].is_psd());
    }
}

fn batch_fit(rows: &[Vec<f64>], reference: &[f64]) -> Vec<[f64; 2]> {
    // Plain normal equations without ridge.
    let (mut sww, mut sw, n) = (0.0, 0.0, reference.len() as f64);
    for &w in reference {
        sww += w * w;
        sw += w;
    }
    let det = sww * n - sw * sw;
    rows.iter()
        .map(|row| {
            let (mut sxw, mut sx) = (0.0, 0.0);
            for (&x, &w) in row.iter().zip(reference) {
                sxw += x * w;
                sx += x;
            }
            [(n * sxw - sw * sx) / det, (sww * sx - sw * sxw) / det]
        })
        .collect()
}

#[test]
fn recursive_tracks_batch_refit() {
    let mut rng = crate::seed::rng(9);
    let epochs = 50;
    let reference: Vec<f64> = (0..epochs).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..epochs).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let start = 5;
    let heads: Vec<&[f64]> = rows.iter().map(|r| &r[..start]).collect();
    let (mut coefs, mut g) = fit_affine(&heads, &reference[..start]).unwrap();
    for t in start..epochs {
        let col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
        recursive_update(&mut coefs, &mut g, &col, reference[t]).unwrap();
        let prefix: Vec<Vec<f64>> = rows.iter().map(|r| r[..=t].to_vec()).collect();
        let oracle = batch_fit(&prefix, &reference[..=t]);
        for (a, b) in coefs.iter().zip(&oracle) {
            for j in 0..2 {
                let rel = (a[j] - b[j]).abs() / a[j].abs().max(b[j].abs()).max(1e-12);
                assert!(rel <= 1e-6, "epoch {t}: {} vs {}", a[j], b[j]);
            }
        }
    }
}

#[test]
fn decomposition_update_matches_refit() {
    let p = planted(2, 100, 30, 1e-2, 4);
    let head: Vec<Vec<f64>> = p.trajectories.iter().map(|r| r[..10].to_vec()).collect();
    let sample: Vec<usize> = (0..200).step_by(2).collect();
    let mut dec = decompose_sampled(&head, &sample, 2).unwrap();
    for t in 10..30 {
        let col: Vec<f64> = p.trajectories.iter().map(|r| r[t]).collect();
        dec.update(&col).unwrap();
    }
    for m in 0..2 {
        let r = dec.ref_index[m];
        let rows: Vec<Vec<f64>> = dec.members[m].iter().map(|&i| p.trajectories[i].clone()).collect();
        let oracle = batch_fit(&rows, &p.trajectories[r]);
        for (&i, o) in dec.members[m].iter().zip(&oracle) {
            if i == r {
                continue;
            }
            assert!((dec.k[i] - o[0]).abs() < 1e-6 * o[0].abs().max(1.0));
            assert!((dec.d[i] - o[1]).abs() < 1e-6 * o[1].abs().max(1.0));
        }
        assert_eq!(dec.ref_history[m], p.trajectories[r]);
    }
}

#[test]
fn identity_decomposition_reconstructs_exactly() {
    let mut rng = crate::seed::rng(6);
    let traj: Vec<Vec<f64>> = (0..8).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let sample: Vec<usize> = (0..8).collect();
    let dec = decompose_sampled(&traj, &sample, 8).unwrap();
    let params: Vec<f64> = traj.iter().map(|r| r[4]).collect();
    let loss = |w: &[f64]| Ok(w.iter().map(|x| x * x).sum::<f64>());
    assert_eq!(instant_rd_loss(&dec, &params, loss).unwrap(), loss(&params).unwrap());
}

#[test]
fn instant_loss_leaves_params() {
    let p = planted(2, 50, 8, 1e-3, 7);
    let sample: Vec<usize> = (0..100).collect();
    let dec = decompose_sampled(&p.trajectories, &sample, 2).unwrap();
    let params: Vec<f64> = p.trajectories.iter().map(|r| r[7]).collect();
    let copy = params.clone();
    let target = params.clone();
    let loss = move |w: &[f64]| Ok(w.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
    let l = instant_rd_loss(&dec, &params, &loss).unwrap();
    assert_eq!(params, copy);
    assert!(l < 1e-3);
}

#[test]
fn saturation_examples() {
    assert_eq!(saturation_pick(&[0.50, 0.40, 0.3996, 0.39]), (2, StopReason::Saturated));
    assert_eq!(saturation_pick(&[0.7]), (0, StopReason::Exhausted));
    assert_eq!(saturation_pick(&[0.5, 0.4999]), (1, StopReason::Saturated));
    assert_eq!(saturation_pick(&[0.5, 0.4, 0.3]), (2, StopReason::Exhausted));
}

fn log_from(traj: &[Vec<f64>]) -> TrajectoryLog<f64> {
    let mut log = TrajectoryLog::new(traj.len());
    for t in 0..traj[0].len() {
        let row: Vec<f64> = traj.iter().map(|r| r[t]).collect();
        log.record(&row, t as u32 + 1).unwrap();
    }
    log
}

#[test]
fn search_stops_and_keeps_decomposition() {
    let p = planted(2, 500, 10, 1e-3, 8);
    let log = log_from(&p.trajectories);
    let target: Vec<f64> = log.last_row().unwrap().to_vec();
    let loss = move |w: &[f64]| Ok(1.0 + w.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
    let (res, dec) = select_hyperparams(&[1, 2, 3], &log, loss, 0).unwrap();
    assert_eq!(res.losses[0].1, 200);
    assert!(res.losses.iter().all(|&(m, s, _)| s == 200 * m));
    assert_eq!(dec.num_modes(), res.chosen_m);
    assert_eq!(res.chosen_s, 200 * res.chosen_m);
    assert!(res.to_csv().starts_with("modes,samples,instant_loss,chosen\n"));
}

#[test]
fn search_rejects_bad_candidates() {
    let log = log_from(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    let loss = |_: &[f64]| Ok(1.0);
    assert!(matches!(select_hyperparams(&[], &log, loss, 0), Err(Error::NoCandidates)));
    assert!(matches!(select_hyperparams(&[1], &log, loss, 0), Err(Error::SampleTooLarge { .. })));
}

#[test]
fn single_mode_reference_in_mode() {
    let p = planted(1, 250, 6, 1e-3, 10);
    let log = log_from(&p.trajectories);
    let dec = decompose(&log, 1, 3).unwrap();
    assert_eq!(dec.members[0].len(), 250);
    assert_eq!(dec.sample.len(), 200);
}
