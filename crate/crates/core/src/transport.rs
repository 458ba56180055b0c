//! Distances between one-dimensional empirical measures.
//!
//! Every measure here is a list of equally weighted atoms: a [`Spectrum`]
//! (mass `1/n` on each eigenvalue), an [`EsdSketch`] (1024 quantiles of a
//! pooled reference), or a plain slice. All functions accept anything that
//! is `AsRef<[f64]>` and do not assume the input is sorted.
//!
//! [`Spectrum`]: crate::spectral::Spectrum

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectrumKind;

/// Number of mid-quantiles stored in a reference sketch.
pub const SKETCH_SIZE: usize = 1024;

/// Default tail fraction for [`tail_wasserstein`].
pub const DEFAULT_TAIL_Q: f64 = 0.10;

/// A fixed-size quantile summary of a pooled eigenvalue distribution.
///
/// Entry `q` is the `(q + 0.5) / 1024` quantile of the pooled measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdSketch {
    pub quantiles: Vec<f64>,
    pub support_kind: SpectrumKind,
    pub source_count: usize,
}

impl EsdSketch {
    /// Sketch of the equal-weight measure on `values`.
    pub fn from_values(values: &[f64], kind: SpectrumKind) -> Result<Self> {
        let sorted = sorted_finite(values)?;
        let n = sorted.len() as u64;
        let quantiles = (0..SKETCH_SIZE as u64)
            .map(|q| {
                // Left-continuous inverse CDF at u = (2q + 1) / 2048:
                // smallest index i with (i + 1) / n >= u.
                let rank = ((2 * q + 1) * n).div_ceil(2 * SKETCH_SIZE as u64);
                sorted[(rank.max(1) - 1) as usize]
            })
            .collect();
        Self::finish(quantiles, kind, values.len())
    }

    /// Sketch of a measure given as `(value, weight)` atoms with positive
    /// weights (they need not sum to one).
    pub fn from_weighted(atoms: &[(f64, f64)], kind: SpectrumKind) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::param("cannot sketch an empty measure"));
        }
        if atoms
            .iter()
            .any(|&(v, w)| !v.is_finite() || !w.is_finite() || w <= 0.0)
        {
            return Err(Error::InvalidData(
                "weighted atoms need finite values and positive weights".into(),
            ));
        }
        let mut sorted = atoms.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = sorted.iter().map(|a| a.1).sum();
        let mut quantiles = Vec::with_capacity(SKETCH_SIZE);
        let mut idx = 0;
        let mut cum = sorted[0].1;
        for q in 0..SKETCH_SIZE {
            let target = (q as f64 + 0.5) / SKETCH_SIZE as f64 * total;
            while cum < target && idx + 1 < sorted.len() {
                idx += 1;
                cum += sorted[idx].1;
            }
            quantiles.push(sorted[idx].0);
        }
        Self::finish(quantiles, kind, atoms.len())
    }

    fn finish(quantiles: Vec<f64>, kind: SpectrumKind, source_count: usize) -> Result<Self> {
        let sketch = Self {
            quantiles,
            support_kind: kind,
            source_count,
        };
        sketch.validate()?;
        Ok(sketch)
    }

    /// Checks the stored invariants (used after deserialization too).
    pub fn validate(&self) -> Result<()> {
        if self.quantiles.len() != SKETCH_SIZE {
            return Err(Error::InvalidData(format!(
                "sketch must hold {SKETCH_SIZE} quantiles, found {}",
                self.quantiles.len()
            )));
        }
        if self.quantiles.iter().any(|v| !v.is_finite())
            || self.quantiles.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::InvalidData(
                "sketch quantiles must be finite and nondecreasing".into(),
            ));
        }
        if self.support_kind == SpectrumKind::Laplacian
            && self.quantiles.iter().any(|&v| !(0.0..=2.0).contains(&v))
        {
            return Err(Error::InvalidData(
                "laplacian sketch values must lie in [0, 2]".into(),
            ));
        }
        Ok(())
    }
}

impl AsRef<[f64]> for EsdSketch {
    fn as_ref(&self) -> &[f64] {
        &self.quantiles
    }
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::param("empirical measure must be nonempty"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite sample value".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `∫₀¹ |F_a⁻¹(u) − F_b⁻¹(u)| du` for two sorted equal-weight atom lists.
fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // Walk the merged quantile breakpoints i/n and j/m, in units of 1/(n·m).
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        acc += (a[i] - b[j]).abs() * (next - pos) as f64;
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    acc / (n * m) as f64
}

/// Wasserstein-1 distance between two empirical measures.
///
/// Equal-size inputs use exact sorted pairing; otherwise the quantile
/// functions are integrated exactly over their merged breakpoints.
pub fn wasserstein1(p: impl AsRef<[f64]>, q: impl AsRef<[f64]>) -> Result<f64> {
    let a = sorted_finite(p.as_ref())?;
    let b = sorted_finite(q.as_ref())?;
    Ok(w1_sorted(&a, &b))
}

/// Top `ceil(q·n)` values of a sorted list.
fn upper_tail(sorted: &[f64], q: f64) -> &[f64] {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    &sorted[sorted.len() - k..]
}

/// Wasserstein-1 between the top-`q` fractions of each measure, each slice
/// renormalized to a probability measure.
pub fn tail_wasserstein(p: impl AsRef<[f64]>, q: impl AsRef<[f64]>, tail: f64) -> Result<f64> {
    if !(tail > 0.0 && tail < 1.0) {
        return Err(Error::param(format!(
            "tail fraction must be in (0, 1), got {tail}"
        )));
    }
    let a = sorted_finite(p.as_ref())?;
    let b = sorted_finite(q.as_ref())?;
    Ok(w1_sorted(upper_tail(&a, tail), upper_tail(&b, tail)))
}

/// `Σ_i Σ_j |x_i − x_j|` over ordered pairs of a sorted list.
fn within_abs_sum(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    2.0 * sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| x * (2.0 * k as f64 - n + 1.0))
        .sum::<f64>()
}

/// `Σ_i Σ_j |x_i − y_j|` for sorted inputs, via prefix sums of `y`.
fn cross_abs_sum(x: &[f64], y: &[f64]) -> f64 {
    let mut prefix = Vec::with_capacity(y.len() + 1);
    prefix.push(0.0);
    for &v in y {
        prefix.push(prefix.last().unwrap() + v);
    }
    let total = prefix[y.len()];
    let m = y.len() as f64;
    let mut k = 0usize;
    let mut acc = 0.0;
    for &xi in x {
        while k < y.len() && y[k] < xi {
            k += 1;
        }
        let below = k as f64;
        acc += xi * below - prefix[k] + (total - prefix[k]) - xi * (m - below);
    }
    acc
}

/// Energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` (V-statistic, all pairs).
pub fn energy_distance(p: impl AsRef<[f64]>, q: impl AsRef<[f64]>) -> Result<f64> {
    let a = sorted_finite(p.as_ref())?;
    let b = sorted_finite(q.as_ref())?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let exy = cross_abs_sum(&a, &b) / (n * m);
    let exx = within_abs_sum(&a) / (n * n);
    let eyy = within_abs_sum(&b) / (m * m);
    // Rounding can push an exact zero slightly negative.
    Ok((2.0 * exy - exx - eyy).max(0.0))
}

/// Gaussian-kernel bandwidth selection for [`mmd2_gaussian`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of pairwise distances over the pooled sample.
    Median,
}

/// Median of `|x_i − x_j|` over unordered pairs `i < j` of the pooled sample.
///
/// Falls back to the mean pairwise distance when the median is zero, and to
/// 1 when every value is identical.
pub fn median_heuristic(pooled: &[f64]) -> f64 {
    let n = pooled.len();
    if n < 2 {
        return 1.0;
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push((pooled[i] - pooled[j]).abs());
        }
    }
    let len = d.len();
    let mid = len / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if len % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 {
        return median;
    }
    let mean = d.iter().sum::<f64>() / len as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

fn gaussian_kernel_mean(x: &[f64], y: &[f64], inv_two_h2: f64) -> f64 {
    let mut acc = 0.0;
    for &a in x {
        for &b in y {
            let d = a - b;
            acc += (-d * d * inv_two_h2).exp();
        }
    }
    acc / (x.len() * y.len()) as f64
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel
/// `k(x, y) = exp(−(x−y)² / (2h²))`.
pub fn mmd2_gaussian(
    p: impl AsRef<[f64]>,
    q: impl AsRef<[f64]>,
    bandwidth: Bandwidth,
) -> Result<f64> {
    let a = sorted_finite(p.as_ref())?;
    let b = sorted_finite(q.as_ref())?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::param(format!(
                "MMD bandwidth must be positive, got {h}"
            )))
        }
        Bandwidth::Median => {
            let mut pooled = a.clone();
            pooled.extend_from_slice(&b);
            median_heuristic(&pooled)
        }
    };
    let g = 1.0 / (2.0 * h * h);
    let kxx = gaussian_kernel_mean(&a, &a, g);
    let kyy = gaussian_kernel_mean(&b, &b, g);
    let kxy = gaussian_kernel_mean(&a, &b, g);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_p − F_q|`.
pub fn ks_statistic(p: impl AsRef<[f64]>, q: impl AsRef<[f64]>) -> Result<f64> {
    let a = sorted_finite(p.as_ref())?;
    let b = sorted_finite(q.as_ref())?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(sup)
}
