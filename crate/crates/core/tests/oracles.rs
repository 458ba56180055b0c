//! Library routines checked against the brute-force references in `common`.

mod common;

use common::*;
use gsf_core::eval::{auprc, auroc, bootstrap_ci, permutation_test};
use gsf_core::features::{heat_trace, near_one_mass, spectral_moments};
use gsf_core::pipeline::with_jobs;
use gsf_core::spectral::{eigenspectrum, normalized_laplacian, Spectrum, SpectrumKind};
use gsf_core::transport::{
    energy_distance, ks_statistic, median_heuristic, mmd2_gaussian, tail_wasserstein, wasserstein1,
    Bandwidth,
};
use rand::Rng;

fn sample(rng: &mut rand_chacha::ChaCha8Rng, n: usize, shift: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 + shift).collect()
}

#[test]
fn raw_spectrum_matches_jacobi() {
    let mut r = rng(1);
    for n in [2, 3, 7, 16, 33] {
        let m = random_symmetric(&mut r, n);
        let got = eigenspectrum(&m, SpectrumKind::Raw).unwrap();
        let want = jacobi_eigenvalues(&m);
        for (g, w) in got.eigenvalues().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "n={n}: {g} vs {w}");
        }
    }
}

#[test]
fn laplacian_spectrum_matches_jacobi() {
    let mut r = rng(2);
    for n in [4, 10, 24, 40] {
        let a = random_graph(&mut r, n, 0.2);
        let l = normalized_laplacian(&a).unwrap();
        let by_hand = laplacian_by_hand(&a);
        assert!((&l - &by_hand).abs().max() < 1e-12);
        let got = eigenspectrum(&l, SpectrumKind::Laplacian).unwrap();
        let want = jacobi_eigenvalues(&by_hand);
        for (g, w) in got.eigenvalues().iter().zip(&want) {
            assert!((g - w.clamp(0.0, 2.0)).abs() < 1e-9, "n={n}: {g} vs {w}");
        }
    }
}

#[test]
fn w1_matches_replication_oracle() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (n, m) = (r.random_range(1..40), r.random_range(1..40));
        let a = sample(&mut r, n, 0.0);
        let shift = r.random_range(-0.5..0.5);
        let b = sample(&mut r, m, shift);
        let got = wasserstein1(&a, &b).unwrap();
        assert!((got - w1_lcm(&a, &b)).abs() < 1e-12, "{n} vs {m}");
    }
}

#[test]
fn tail_w1_is_w1_of_top_slices() {
    let mut r = rng(4);
    for _ in 0..100 {
        let (n, m) = (r.random_range(2..60), r.random_range(2..60));
        let q = r.random_range(0.05..0.95);
        let mut a = sample(&mut r, n, 0.0);
        let mut b = sample(&mut r, m, 0.3);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let top = |v: &[f64]| v[v.len() - ((q * v.len() as f64).ceil() as usize)..].to_vec();
        let want = w1_lcm(&top(&a), &top(&b));
        assert!((tail_wasserstein(&a, &b, q).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn energy_mmd_ks_match_brute_force() {
    let mut r = rng(5);
    for _ in 0..100 {
        let (n, m) = (r.random_range(1..50), r.random_range(1..50));
        let a = sample(&mut r, n, 0.0);
        let shift = r.random_range(-1.0..1.0);
        let b = sample(&mut r, m, shift);
        let e = energy_distance(&a, &b).unwrap();
        assert!((e - energy_brute(&a, &b).max(0.0)).abs() < 1e-10);
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        if n + m >= 2 {
            let h = median_pairwise(&pooled);
            assert!((median_heuristic(&pooled) - h).abs() < 1e-15);
            let mmd = mmd2_gaussian(&a, &b, Bandwidth::Median).unwrap();
            assert!((mmd - mmd_brute(&a, &b, h)).abs() < 1e-12);
        }
        assert!((ks_statistic(&a, &b).unwrap() - ks_brute(&a, &b)).abs() < 1e-15);
    }
}

#[test]
fn spectral_features_match_direct_sums() {
    let mut r = rng(6);
    for _ in 0..50 {
        let n = r.random_range(2..80);
        let vals: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
        let s = Spectrum::new(SpectrumKind::Laplacian, vals.clone()).unwrap();
        for t in [0.1, 1.0, 5.0] {
            let want: f64 = vals.iter().map(|l| (-t * l).exp()).sum();
            assert!((heat_trace(&s, t).unwrap() - want).abs() < 1e-12);
        }
        let eps = r.random_range(0.01..0.5);
        let count = vals.iter().filter(|l| (*l - 1.0).abs() <= eps).count() as f64;
        assert!((near_one_mass(&s, eps).unwrap() - count / n as f64).abs() < 1e-15);
        let mean = vals.iter().sum::<f64>() / n as f64;
        assert!((spectral_moments(&s).mean - mean).abs() < 1e-12);
    }
}

#[test]
fn auroc_and_auprc_match_pairwise_definitions() {
    let mut r = rng(7);
    for _ in 0..200 {
        let n = r.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 8.0).floor()).collect();
        assert!((auroc(&scores, &labels).unwrap() - auroc_pairs(&scores, &labels)).abs() < 1e-12);

        // Average precision from distinct thresholds, computed naively.
        let mut thresholds = scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let (mut ap, mut prev) = (0.0, 0.0);
        for t in thresholds {
            let tp = scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| **s >= t && **l)
                .count() as f64;
            let k = scores.iter().filter(|s| **s >= t).count() as f64;
            ap += (tp / pos - prev) * tp / k;
            prev = tp / pos;
        }
        assert!((auprc(&scores, &labels).unwrap() - ap).abs() < 1e-12);
    }
}

#[test]
fn resampling_ignores_worker_count() {
    let mut r = rng(8);
    let labels: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| r.random::<f64>() + if l { 0.4 } else { 0.0 })
        .collect();
    let run = |jobs| {
        with_jobs(jobs, || {
            (
                bootstrap_ci(&scores, &labels, auroc, 300, 42).unwrap(),
                permutation_test(&scores, &labels, 300, 42).unwrap(),
            )
        })
        .unwrap()
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0.lo.to_bits(), b.0.lo.to_bits());
    assert_eq!(a.0.hi.to_bits(), b.0.hi.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
}
