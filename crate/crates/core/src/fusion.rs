//! Per-layer anomaly scores, top-k layer fusion and threshold calibration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fpr_threshold;
use crate::features::{Bundle, FeatureParams, FeatureVector};
use crate::reference::{plain_z, robust_z, ReferenceModel};

/// Target false-positive rates for the reported thresholds.
pub const FPR_TARGETS: [f64; 2] = [0.01, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZMode {
    Robust,
    Plain,
}

impl ZMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ZMode::Robust => "robust",
            ZMode::Plain => "plain",
        }
    }
}

impl fmt::Display for ZMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ZMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" => Ok(ZMode::Robust),
            "plain" => Ok(ZMode::Plain),
            other => Err(Error::param(format!("unknown z mode `{other}`"))),
        }
    }
}

/// How the selected layers are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Unweighted,
    Softmax,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Unweighted => "unweighted",
            Fusion::Softmax => "softmax",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" | "uniform" | "mean" => Ok(Fusion::Unweighted),
            "softmax" => Ok(Fusion::Softmax),
            other => Err(Error::param(format!("unknown fusion `{other}`"))),
        }
    }
}

/// Which per-layer quantity orders layers for top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingSource {
    Auroc,
    Fsel,
}

impl fmt::Display for RankingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingSource::Auroc => "auroc",
            RankingSource::Fsel => "fsel",
        })
    }
}

impl FromStr for RankingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auroc" => Ok(RankingSource::Auroc),
            "fsel" => Ok(RankingSource::Fsel),
            other => Err(Error::param(format!("unknown ranking source `{other}`"))),
        }
    }
}

/// Sum of z-scores of the bundle's features for one layer.
///
/// Undefined feature values, and features without any defined reference
/// value, contribute nothing.
pub fn layer_score(
    fv: &FeatureVector,
    reference: &ReferenceModel,
    z_mode: ZMode,
    bundle: Bundle,
    params: &FeatureParams,
) -> Result<f64> {
    let eps = reference.meta.eps;
    let mut total = 0.0;
    for name in bundle.feature_names(params) {
        let missing = || Error::MissingFeature {
            feature: name.clone(),
            image_id: fv.image_id.clone(),
            layer_id: fv.layer_id.clone(),
        };
        let value = fv.get(&name).ok_or_else(missing)?;
        let stats = reference
            .stats(&fv.layer_id, fv.spectrum_kind, &name)
            .ok_or_else(missing)?;
        let (Some(v), true) = (value, stats.count > 0) else {
            continue;
        };
        total += match z_mode {
            ZMode::Robust => robust_z(v, stats.median, stats.mad, eps),
            ZMode::Plain => plain_z(v, stats.mean, stats.std, eps),
        };
    }
    Ok(total)
}

/// `exp(s/τ) / Σ exp(s_j/τ)`, computed after subtracting the maximum.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::param("softmax needs at least one score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite fusion score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// A layer's entry in the top-k selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub layer_id: String,
    /// Ranking key (validation AUROC or FSEL).
    pub key: f64,
    /// Tie-break after `key`.
    pub w1_pool: f64,
    /// Score fed to the softmax when fusing with weights.
    pub reliability: f64,
}

/// The `k` best layers: higher key first, then higher `w1_pool`, then
/// lexicographic layer id.
pub fn select_top_k(ranking: &[LayerRanking], k: usize) -> Result<Vec<LayerRanking>> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if k > ranking.len() {
        return Err(Error::param(format!(
            "k = {k} exceeds the {} available layers",
            ranking.len()
        )));
    }
    let mut sorted = ranking.to_vec();
    sorted.sort_by(|a, b| {
        b.key
            .total_cmp(&a.key)
            .then(b.w1_pool.total_cmp(&a.w1_pool))
            .then_with(|| a.layer_id.cmp(&b.layer_id))
    });
    sorted.truncate(k);
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedScores {
    pub selected: Vec<String>,
    pub weights: Vec<f64>,
    /// One fused score per image, in input order.
    pub scores: Vec<f64>,
}

/// Fuses per-layer scores of the top-k layers.
///
/// `layer_scores` maps layer id to one score per image (all the same length).
pub fn fuse_topk(
    layer_scores: &BTreeMap<String, Vec<f64>>,
    ranking: &[LayerRanking],
    k: usize,
    fusion: Fusion,
    temperature: f64,
) -> Result<FusedScores> {
    let top = select_top_k(ranking, k)?;
    let weights = match fusion {
        Fusion::Unweighted => vec![1.0 / k as f64; k],
        Fusion::Softmax => {
            let r: Vec<f64> = top.iter().map(|l| l.reliability).collect();
            softmax_weights(&r, temperature)?
        }
    };
    let mut columns = Vec::with_capacity(k);
    for l in &top {
        let col = layer_scores.get(&l.layer_id).ok_or_else(|| {
            Error::param(format!("no scores for selected layer `{}`", l.layer_id))
        })?;
        columns.push(col);
    }
    let n = columns[0].len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Dimension(
            "layer score columns differ in length".into(),
        ));
    }
    let scores = (0..n)
        .map(|i| columns.iter().zip(&weights).map(|(c, w)| w * c[i]).sum())
        .collect();
    Ok(FusedScores {
        selected: top.into_iter().map(|l| l.layer_id).collect(),
        weights,
        scores,
    })
}

/// Threshold at target FPR `alpha` from authentic validation scores.
///
/// Returns the smallest authentic score `t` with `#{score ≥ t} ≤ ⌊alpha·N⌋`,
/// or a value just above the maximum when none qualifies. Scores `≥ t` are
/// flagged as forged.
pub fn calibrate_threshold(authentic: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if !authentic.is_empty() && (authentic.len() as f64) < 1.0 / alpha {
        log::warn!(
            "calibrating at alpha = {alpha} with only {} authentic scores",
            authentic.len()
        );
    }
    fpr_threshold(authentic, alpha)
}

/// Thresholds at every [`FPR_TARGETS`] level from labeled validation
/// scores (`true` = forged). Only the authentic entries are consulted.
pub fn calibrate_thresholds(scores: &[f64], forged: &[bool]) -> Result<BTreeMap<String, f64>> {
    if scores.len() != forged.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            forged.len()
        )));
    }
    let authentic: Vec<f64> = scores
        .iter()
        .zip(forged)
        .filter(|(_, &f)| !f)
        .map(|(s, _)| *s)
        .collect();
    FPR_TARGETS
        .iter()
        .map(|&a| Ok((a.to_string(), calibrate_threshold(&authentic, a)?)))
        .collect()
}

/// Settings that identify a detector configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub spectrum: String,
    pub bundle: Bundle,
    pub k: usize,
    pub fusion: Fusion,
    pub ranking: RankingSource,
    pub weighting: String,
    pub z_mode: ZMode,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub label: String,
    pub split: String,
    pub fused_score: f64,
    pub layer_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: ConfigFingerprint,
    pub selected_layers: Vec<String>,
    pub weights: Vec<f64>,
    /// Keyed by the FPR target formatted as in `FPR_TARGETS`.
    pub thresholds: BTreeMap<String, f64>,
    pub input_hashes: BTreeMap<String, String>,
    pub images: Vec<ImageScore>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{Label, Manifest, ManifestRow, SketchBank, SketchWeighting, Split};
    use crate::spectral::{Spectrum, SpectrumKind};
    use std::path::PathBuf;

    #[test]
    fn softmax_examples() {
        let w = softmax_weights(&[2.776, 2.642, 2.567], 1.0).unwrap();
        for (got, want) in w.iter().zip([0.373, 0.325, 0.302]) {
            assert!((got - want).abs() <= 0.002, "{got} vs {want}");
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let eq = softmax_weights(&[0.7; 4], 1.0).unwrap();
        assert!(eq.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let hot = softmax_weights(&[5.0, -3.0, 1.0], 1e6).unwrap();
        assert!(hot.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-4));
        assert!(softmax_weights(&[1.0], 0.0).is_err());
        let shifted = softmax_weights(&[2.776 + 100.0, 2.642 + 100.0, 2.567 + 100.0], 1.0).unwrap();
        for (a, b) in w.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn ranking() -> Vec<LayerRanking> {
        ["a", "b", "c"]
            .iter()
            .zip([0.6, 0.9, 0.6])
            .zip([1.0, 0.5, 2.0])
            .map(|((l, key), w1)| LayerRanking {
                layer_id: l.to_string(),
                key,
                w1_pool: w1,
                reliability: key,
            })
            .collect()
    }

    fn scores() -> BTreeMap<String, Vec<f64>> {
        [
            ("a", vec![1.0, 2.0]),
            ("b", vec![3.0, 5.0]),
            ("c", vec![-1.0, 0.0]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    #[test]
    fn top_k_order_and_ties() {
        let top = select_top_k(&ranking(), 3).unwrap();
        let ids: Vec<_> = top.iter().map(|l| l.layer_id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
        assert!(select_top_k(&ranking(), 4).is_err());
        assert!(select_top_k(&ranking(), 0).is_err());
    }

    #[test]
    fn fuse_examples() {
        let one = fuse_topk(&scores(), &ranking(), 1, Fusion::Softmax, 1.0).unwrap();
        assert_eq!(one.scores, vec![3.0, 5.0]);
        let two = fuse_topk(&scores(), &ranking(), 2, Fusion::Unweighted, 1.0).unwrap();
        assert_eq!(two.scores, vec![1.0, 2.5]);
        let mut reversed = ranking();
        reversed.reverse();
        let again = fuse_topk(&scores(), &reversed, 2, Fusion::Softmax, 1.0).unwrap();
        assert_eq!(
            again,
            fuse_topk(&scores(), &ranking(), 2, Fusion::Softmax, 1.0).unwrap()
        );
        assert!(fuse_topk(&scores(), &ranking(), 5, Fusion::Softmax, 1.0).is_err());
    }

    #[test]
    fn calibration_examples() {
        let a: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&a, 0.05).unwrap(), 96.0);
        assert!(calibrate_threshold(&a, 1.0).is_err());
        assert!(calibrate_threshold(&a, 0.0).is_err());
        assert!(matches!(
            calibrate_threshold(&[], 0.05),
            Err(Error::Calibration(_))
        ));
        let t = calibrate_threshold(&[4.0; 50], 0.01).unwrap();
        assert_eq!(t, 4.0 + 4.0 * 2f64.powi(-32));
    }

    fn toy_reference() -> ReferenceModel {
        let rows: Vec<ManifestRow> = (0..5)
            .map(|i| ManifestRow {
                image_id: format!("a{i}"),
                label: Label::Authentic,
                split: Some(Split::Train),
                path: PathBuf::new(),
            })
            .collect();
        let m = Manifest::new(rows).unwrap();
        let spectra: Vec<Spectrum> = (0..5)
            .map(|_| Spectrum::new(SpectrumKind::Laplacian, vec![0.0, 1.0]).unwrap())
            .collect();
        let bank = SketchBank::build(
            m.rows
                .iter()
                .zip(&spectra)
                .map(|(r, s)| (r.image_id.as_str(), "L", s)),
            &m,
            SketchWeighting::Eigenvalue,
        )
        .unwrap();
        // Skewed toy column {1, 2, 3, 4, 100}: median 3, MAD 1, mean 22, std √1522.
        let feats: Vec<FeatureVector> = [1.0, 2.0, 3.0, 4.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| fv(&format!("a{i}"), v, 0.0))
            .collect();
        ReferenceModel::build(
            bank,
            &feats,
            &m,
            Bundle::W1Only,
            0,
            1e-8,
            SketchWeighting::Eigenvalue,
        )
        .unwrap()
    }

    fn fv(image: &str, w1: f64, tail: f64) -> FeatureVector {
        FeatureVector {
            image_id: image.into(),
            layer_id: "L".into(),
            spectrum_kind: SpectrumKind::Laplacian,
            values: [("w1_full".into(), Some(w1)), ("w1_tail".into(), Some(tail))]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn layer_score_modes() {
        let r = toy_reference();
        let p = FeatureParams::default();
        let at_median = fv("x", 3.0, 0.0);
        assert_eq!(
            layer_score(&at_median, &r, ZMode::Robust, Bundle::W1Only, &p).unwrap(),
            0.0
        );

        let probe = fv("x", 5.0, 0.0);
        let robust = layer_score(&probe, &r, ZMode::Robust, Bundle::W1Only, &p).unwrap();
        // w1_tail is constant 0 in the reference: MAD 0 → z = 0/eps = 0.
        assert!((robust - 2.0 / (1.4826 + 1e-8)).abs() < 1e-12);
        let plain = layer_score(&probe, &r, ZMode::Plain, Bundle::W1Only, &p).unwrap();
        assert!((plain - (5.0 - 22.0) / (1522f64.sqrt() + 1e-8)).abs() < 1e-12);

        let mut partial = probe.clone();
        partial.values.remove("w1_tail");
        match layer_score(&partial, &r, ZMode::Robust, Bundle::W1Only, &p) {
            Err(Error::MissingFeature { feature, .. }) => assert_eq!(feature, "w1_tail"),
            other => panic!("expected missing feature, got {other:?}"),
        }
    }
}
