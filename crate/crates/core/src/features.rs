//! Per-(image, layer, spectrum) feature vectors.
//!
//! Features come in four families, selected by a [`Bundle`]:
//!
//! * transport distances from the test spectrum to the pooled authentic
//!   reference sketch (`w1_full`, `w1_tail`, `energy`, `mmd2`, `ks`);
//! * spectral filter-bank summaries (heat traces, Gaussian band masses,
//!   spectral entropy / effective rank, moments, α-Hill);
//! * duplication-sensitive statistics around λ = 1;
//! * non-spectral graph controls computed from the affinity matrix itself.
//!
//! Degenerate spectra map to fixed conventions rather than NaN, so every
//! defined feature is finite. The only undefined feature is α-Hill on
//! spectra without a usable positive tail; it is stored as `None` and
//! skipped by z-scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{eigenspectrum, DegreeVector, Spectrum, SpectrumKind};
use crate::transport::{self, Bandwidth, EsdSketch};

pub const DEFAULT_HEAT_SCALES: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];
pub const DEFAULT_NEAR_ONE_EPS: f64 = 0.05;
pub const DEFAULT_HILL_FRACTION: f64 = 0.10;

/// Centres of the low/mid/high Gaussian bumps on `[0, 2]`.
pub const BAND_CENTRES: [f64; 3] = [1.0 / 3.0, 1.0, 5.0 / 3.0];
pub const BAND_SIGMA: f64 = 1.0 / 3.0;

/// Window around λ = 1 used by the spacing, JS and eigengap statistics.
pub const DUP_WINDOW: (f64, f64) = (0.9, 1.1);
const DUP_BINS: usize = 20;
const JS_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bundle {
    W1Only,
    Transport,
    TransportDup,
    All,
    AllControls,
}

impl Bundle {
    pub const ALL: [Bundle; 5] = [
        Bundle::W1Only,
        Bundle::Transport,
        Bundle::TransportDup,
        Bundle::All,
        Bundle::AllControls,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Bundle::W1Only => "w1_only",
            Bundle::Transport => "transport",
            Bundle::TransportDup => "transport_dup",
            Bundle::All => "all",
            Bundle::AllControls => "all_controls",
        }
    }

    fn level(self) -> u8 {
        self as u8
    }

    pub fn includes(self, group: Bundle) -> bool {
        self.level() >= group.level()
    }

    /// Feature names produced for this bundle, in a fixed order.
    pub fn feature_names(self, params: &FeatureParams) -> Vec<String> {
        let mut names: Vec<String> = vec!["w1_full".into(), "w1_tail".into()];
        if self.includes(Bundle::Transport) {
            names.extend(["energy".into(), "mmd2".into()]);
        }
        if self.includes(Bundle::TransportDup) {
            names.extend(
                [
                    "near_one_mass",
                    "gaussian_mass_1",
                    "spacing_compression",
                    "band_js",
                    "eigengap_concentration",
                ]
                .map(String::from),
            );
        }
        if self.includes(Bundle::All) {
            names.extend(params.heat_scales.iter().map(|t| heat_name(*t)));
            names.extend(
                [
                    "band_low",
                    "band_mid",
                    "band_high",
                    "spectral_entropy",
                    "effective_rank",
                    "moment_mean",
                    "moment_var",
                    "moment_skew",
                    "moment_kurt",
                    "ks",
                    "alpha_hill",
                ]
                .map(String::from),
            );
        }
        if self.includes(Bundle::AllControls) {
            names.extend(GraphControls::NAMES.map(String::from));
        }
        names
    }
}

impl fmt::Display for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bundle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Bundle::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown feature bundle `{s}`")))
    }
}

fn heat_name(t: f64) -> String {
    format!("heat_t{t}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub tail_q: f64,
    pub near_one_eps: f64,
    pub heat_scales: Vec<f64>,
    pub hill_fraction: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            tail_q: transport::DEFAULT_TAIL_Q,
            near_one_eps: DEFAULT_NEAR_ONE_EPS,
            heat_scales: DEFAULT_HEAT_SCALES.to_vec(),
            hill_fraction: DEFAULT_HILL_FRACTION,
        }
    }
}

/// Named scalar features for one (image, layer, spectrum kind).
///
/// `None` marks an undefined feature (see [`alpha_hill`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub layer_id: String,
    pub spectrum_kind: SpectrumKind,
    pub values: BTreeMap<String, Option<f64>>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<Option<f64>> {
        self.values.get(name).copied()
    }
}

pub fn heat_trace(s: &Spectrum, t: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::param(format!(
            "heat-trace scale must be positive, got {t}"
        )));
    }
    Ok(s.eigenvalues().iter().map(|&l| (-t * l).exp()).sum())
}

fn bump(x: f64, centre: f64, sigma: f64) -> f64 {
    let d = x - centre;
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Masses of the low/mid/high Gaussian bumps (peak value 1 each).
pub fn band_masses(s: &Spectrum) -> [f64; 3] {
    BAND_CENTRES.map(|c| {
        s.eigenvalues()
            .iter()
            .map(|&l| bump(l, c, BAND_SIGMA))
            .sum()
    })
}

/// Shannon entropy of the normalized positive eigenvalues and its exponential.
///
/// Spectra without a positive eigenvalue report `(0, 1)`.
pub fn spectral_entropy_and_effective_rank(s: &Spectrum) -> (f64, f64) {
    let total: f64 = s.eigenvalues().iter().filter(|&&l| l > 0.0).sum();
    if total <= 0.0 {
        return (0.0, 1.0);
    }
    let h = -s
        .eigenvalues()
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let p = l / total;
            p * p.ln()
        })
        .sum::<f64>();
    let h = h.max(0.0);
    (h, h.exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
}

/// Population moments; skewness and kurtosis are 0 when the variance is.
pub fn spectral_moments(s: &Spectrum) -> Moments {
    let v = s.eigenvalues();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in v {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    // Relative floor: a constant spectrum can leave rounding residue in m2.
    let scale = mean.abs().max(1.0);
    if m2 <= (1e-14 * scale).powi(2) {
        return Moments {
            mean,
            variance: m2,
            skewness: 0.0,
            kurtosis: 0.0,
        };
    }
    Moments {
        mean,
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2) - 3.0,
    }
}

/// Fraction of eigenvalues with `|λ − 1| ≤ eps`.
pub fn near_one_mass(s: &Spectrum, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::param(format!(
            "near-one epsilon must be positive, got {eps}"
        )));
    }
    let count = s
        .eigenvalues()
        .iter()
        .filter(|&&l| (l - 1.0).abs() <= eps)
        .count();
    Ok(count as f64 / s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuplicationFeatures {
    pub gaussian_mass_1: f64,
    pub spacing_compression: f64,
    pub band_js: f64,
    pub eigengap_concentration: f64,
}

fn in_window(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .copied()
        .filter(|&l| l >= DUP_WINDOW.0 && l <= DUP_WINDOW.1)
        .collect()
}

fn window_histogram(values: &[f64]) -> Option<[f64; DUP_BINS]> {
    let inside = in_window(values);
    if inside.is_empty() {
        return None;
    }
    let width = (DUP_WINDOW.1 - DUP_WINDOW.0) / DUP_BINS as f64;
    let mut h = [0.0; DUP_BINS];
    for l in &inside {
        let bin = (((l - DUP_WINDOW.0) / width) as usize).min(DUP_BINS - 1);
        h[bin] += 1.0;
    }
    let total = inside.len() as f64;
    Some(h.map(|c| c / total))
}

fn js_divergence(p: &[f64; DUP_BINS], q: &[f64; DUP_BINS]) -> f64 {
    let smooth = |h: &[f64; DUP_BINS]| {
        let s: f64 = h.iter().map(|v| v + JS_SMOOTHING).sum();
        h.map(|v| (v + JS_SMOOTHING) / s)
    };
    let (p, q) = (smooth(p), smooth(q));
    let kl = |a: &[f64; DUP_BINS], m: &[f64; DUP_BINS]| {
        a.iter().zip(m).map(|(x, y)| x * (x / y).ln()).sum::<f64>()
    };
    let m: [f64; DUP_BINS] = std::array::from_fn(|i| 0.5 * (p[i] + q[i]));
    (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).max(0.0)
}

/// Statistics of the spectrum near λ = 1, where duplicated subgraphs
/// concentrate eigenvalue mass.
///
/// * `gaussian_mass_1`: mean of `exp(−(λ−1)² / (2·eps²))`;
/// * `spacing_compression`: mean consecutive gap inside `[0.9, 1.1]` over the
///   global mean gap (1 when fewer than 3 values fall in the window);
/// * `band_js`: Jensen–Shannon divergence between 20-bin in-window
///   histograms of the test spectrum and the reference (0 if either is empty);
/// * `eigengap_concentration`: largest in-window gap over the window width
///   (0 with fewer than 2 values in the window).
pub fn duplication_features(s: &Spectrum, reference: &EsdSketch, eps: f64) -> DuplicationFeatures {
    let v = s.eigenvalues();
    let n = v.len();
    let gaussian_mass_1 = v.iter().map(|&l| bump(l, 1.0, eps)).sum::<f64>() / n as f64;

    let inside = in_window(v);
    let gaps: Vec<f64> = inside.windows(2).map(|w| w[1] - w[0]).collect();
    let global_gap = if n > 1 {
        (v[n - 1] - v[0]) / (n - 1) as f64
    } else {
        0.0
    };
    let spacing_compression = if inside.len() < 3 || global_gap <= 0.0 {
        1.0
    } else {
        (gaps.iter().sum::<f64>() / gaps.len() as f64) / global_gap
    };

    let band_js = match (window_histogram(v), window_histogram(&reference.quantiles)) {
        (Some(p), Some(q)) => js_divergence(&p, &q),
        _ => 0.0,
    };

    let eigengap_concentration = if inside.len() < 2 {
        0.0
    } else {
        gaps.iter().copied().fold(0.0, f64::max) / (DUP_WINDOW.1 - DUP_WINDOW.0)
    };

    DuplicationFeatures {
        gaussian_mass_1,
        spacing_compression,
        band_js,
        eigengap_concentration,
    }
}

/// Hill estimator of the upper-tail exponent over the positive eigenvalues.
///
/// With `p` positive values sorted descending `x_1 ≥ … ≥ x_p`,
/// `k = max(3, ⌊fraction·p⌋)` capped at `p − 1`, the estimate is
/// `k / Σ_{i≤k} ln(x_i / x_{k+1})`. Returns `None` when fewer than three
/// positive values exist or the log-sum vanishes.
pub fn alpha_hill(s: &Spectrum, fraction: f64) -> Option<f64> {
    let mut pos: Vec<f64> = s
        .eigenvalues()
        .iter()
        .copied()
        .filter(|&l| l > 0.0)
        .collect();
    if pos.len() < 3 {
        return None;
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * pos.len() as f64).floor() as usize)
        .max(3)
        .min(pos.len() - 1);
    let threshold = pos[k];
    let sum: f64 = pos[..k].iter().map(|&x| (x / threshold).ln()).sum();
    (sum > 0.0 && sum.is_finite()).then(|| k as f64 / sum)
}

/// Non-spectral summaries of a symmetrized affinity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphControls {
    pub degree_mean: f64,
    pub degree_var: f64,
    pub degree_entropy: f64,
    pub trace: f64,
    pub spectral_radius: f64,
    pub frobenius: f64,
    pub attention_entropy: f64,
    pub top_singular_value: f64,
}

impl GraphControls {
    pub const NAMES: [&'static str; 8] = [
        "degree_mean",
        "degree_var",
        "degree_entropy",
        "trace",
        "spectral_radius",
        "frobenius",
        "attention_entropy",
        "top_singular_value",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.degree_mean,
            self.degree_var,
            self.degree_entropy,
            self.trace,
            self.spectral_radius,
            self.frobenius,
            self.attention_entropy,
            self.top_singular_value,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            degree_mean: v[0],
            degree_var: v[1],
            degree_entropy: v[2],
            trace: v[3],
            spectral_radius: v[4],
            frobenius: v[5],
            attention_entropy: v[6],
            top_singular_value: v[7],
        }
    }
}

fn shannon(weights: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = weights.clone().filter(|&w| w > 0.0).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h = -weights
        .filter(|&w| w > 0.0)
        .map(|w| {
            let p = w / total;
            p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Graph controls of a symmetrized affinity matrix.
pub fn graph_controls(a: &DMatrix<f64>) -> Result<GraphControls> {
    let raw = eigenspectrum(a, SpectrumKind::Raw)?;
    Ok(graph_controls_with_spectrum(a, &raw))
}

/// Same as [`graph_controls`], reusing an already computed raw spectrum.
pub fn graph_controls_with_spectrum(a: &DMatrix<f64>, raw: &Spectrum) -> GraphControls {
    let degrees = DegreeVector::of(a).0;
    let n = degrees.len() as f64;
    let degree_mean = degrees.iter().sum::<f64>() / n;
    let degree_var = degrees
        .iter()
        .map(|d| (d - degree_mean) * (d - degree_mean))
        .sum::<f64>()
        / n;
    let radius = raw.min().abs().max(raw.max().abs());
    GraphControls {
        degree_mean,
        degree_var,
        degree_entropy: shannon(degrees.iter().copied()),
        trace: a.trace(),
        spectral_radius: radius,
        frobenius: a.norm(),
        attention_entropy: shannon(a.iter().copied()),
        // Singular values of a symmetric matrix are |eigenvalues|.
        top_singular_value: radius,
    }
}

/// Computes the features of `bundle` for one spectrum against the pooled
/// reference sketch of the same layer and spectrum kind.
///
/// `controls` is required for [`Bundle::AllControls`].
pub fn extract_features(
    image_id: &str,
    layer_id: &str,
    spectrum: &Spectrum,
    reference: &EsdSketch,
    controls: Option<&GraphControls>,
    bundle: Bundle,
    params: &FeatureParams,
) -> Result<FeatureVector> {
    if reference.support_kind != spectrum.kind {
        return Err(Error::param(format!(
            "reference sketch is {} but spectrum is {}",
            reference.support_kind, spectrum.kind
        )));
    }
    let mut values: BTreeMap<String, Option<f64>> = BTreeMap::new();
    let mut put = |name: &str, v: f64| {
        values.insert(name.to_string(), Some(v));
    };

    put("w1_full", transport::wasserstein1(spectrum, reference)?);
    put(
        "w1_tail",
        transport::tail_wasserstein(spectrum, reference, params.tail_q)?,
    );

    if bundle.includes(Bundle::Transport) {
        put("energy", transport::energy_distance(spectrum, reference)?);
        put(
            "mmd2",
            transport::mmd2_gaussian(spectrum, reference, Bandwidth::Median)?,
        );
    }

    if bundle.includes(Bundle::TransportDup) {
        put(
            "near_one_mass",
            near_one_mass(spectrum, params.near_one_eps)?,
        );
        let dup = duplication_features(spectrum, reference, params.near_one_eps);
        put("gaussian_mass_1", dup.gaussian_mass_1);
        put("spacing_compression", dup.spacing_compression);
        put("band_js", dup.band_js);
        put("eigengap_concentration", dup.eigengap_concentration);
    }

    if bundle.includes(Bundle::All) {
        for &t in &params.heat_scales {
            put(&heat_name(t), heat_trace(spectrum, t)?);
        }
        let [low, mid, high] = band_masses(spectrum);
        put("band_low", low);
        put("band_mid", mid);
        put("band_high", high);
        let (h, rank) = spectral_entropy_and_effective_rank(spectrum);
        put("spectral_entropy", h);
        put("effective_rank", rank);
        let m = spectral_moments(spectrum);
        put("moment_mean", m.mean);
        put("moment_var", m.variance);
        put("moment_skew", m.skewness);
        put("moment_kurt", m.kurtosis);
        put("ks", transport::ks_statistic(spectrum, reference)?);
        values.insert(
            "alpha_hill".into(),
            alpha_hill(spectrum, params.hill_fraction),
        );
    }

    if bundle.includes(Bundle::AllControls) {
        let c = controls.ok_or_else(|| {
            Error::param("bundle all_controls needs graph controls for every layer")
        })?;
        for (name, v) in GraphControls::NAMES.iter().zip(c.values()) {
            values.insert((*name).to_string(), Some(v));
        }
    }

    if values.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite feature value").with_ids(image_id, layer_id));
    }

    Ok(FeatureVector {
        image_id: image_id.to_string(),
        layer_id: layer_id.to_string(),
        spectrum_kind: spectrum.kind,
        values,
    })
}
