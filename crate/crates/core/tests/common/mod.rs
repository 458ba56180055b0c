//! Independent reference implementations used by the integration tests.
//! None of these call into the library's numerical code.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| m[(i, j)]).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `I − D^{-1/2} A D^{-1/2}` built entry by entry; isolated rows are zero.
pub fn laplacian_by_hand(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let d: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if d[i] < 1e-12 || d[j] < 1e-12 {
            0.0
        } else {
            let delta = if i == j { 1.0 } else { 0.0 };
            delta - a[(i, j)] / (d[i] * d[j]).sqrt()
        }
    })
}

/// Connected components of the non-isolated part, by union-find.
pub fn components(a: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut x = x;
        while p[x] != r {
            let next = p[x];
            p[x] = r;
            x = next;
        }
        r
    }
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] > 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let isolated: Vec<bool> = (0..n).map(|i| (0..n).all(|j| a[(i, j)] == 0.0)).collect();
    let mut roots: Vec<usize> = (0..n)
        .filter(|&i| !isolated[i])
        .map(|i| find(&mut parent, i))
        .collect();
    roots.sort();
    roots.dedup();
    roots.len()
}

/// Random symmetric nonnegative sparse graph; a few vertices may be isolated.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < density {
                let w = rng.random_range(0.1..2.0);
                a[(i, j)] = w;
                a[(j, i)] = w;
            }
        }
    }
    a
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&m + m.transpose()) * 0.5
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// W₁ by replicating both samples to their common multiple size and
/// pairing sorted values.
pub fn w1_lcm(a: &[f64], b: &[f64]) -> f64 {
    let l = a.len() / gcd(a.len(), b.len()) * b.len();
    let expand = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let r = l / v.len();
        s.iter()
            .flat_map(|&x| std::iter::repeat_n(x, r))
            .collect::<Vec<f64>>()
    };
    let (x, y) = (expand(a), expand(b));
    x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / l as f64
}

/// Energy distance by the O(nm) definition.
pub fn energy_brute(a: &[f64], b: &[f64]) -> f64 {
    let mean = |x: &[f64], y: &[f64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).abs()).sum::<f64>())
            .sum::<f64>()
            / (x.len() * y.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

/// Biased Gaussian MMD² with a given bandwidth.
pub fn mmd_brute(a: &[f64], b: &[f64], h: f64) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (-(p - q) * (p - q) / (2.0 * h * h)).exp())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (x.len() * y.len()) as f64
    };
    k(a, a) + k(b, b) - 2.0 * k(a, b)
}

/// Median pairwise distance over i < j of the pooled sample.
pub fn median_pairwise(pooled: &[f64]) -> f64 {
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            d.push((pooled[i] - pooled[j]).abs());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// sup |F_a − F_b| evaluated at every sample point.
pub fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
        .fold(0.0, f64::max)
}

/// AUROC as the fraction of (forged, authentic) pairs ranked correctly,
/// ties counting one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}
