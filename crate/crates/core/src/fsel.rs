//! Layer ranking by the composite FSEL score.
//!
//! Each layer gets four raw measurements: the pooled authentic-vs-forged
//! W₁ distance, the drop of that distance after removing the leading
//! eigencomponents, the bootstrap width of the W₁ estimate, and a
//! localization term that is always zero here (no masks). Every component
//! is z-scored across layers and combined with fixed weights.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{percentile, task_rng, ConfidenceInterval};
use crate::spectral::{
    ablate_top_eigencomponents, eigenspectrum, normalized_laplacian, Spectrum, SpectrumKind,
};
use crate::transport::wasserstein1;

pub const DEFAULT_ABLATION_RANK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FselWeights {
    pub dist: f64,
    pub loc: f64,
    pub causal: f64,
    pub instab: f64,
}

impl Default for FselWeights {
    fn default() -> Self {
        Self {
            dist: 0.45,
            loc: 0.25,
            causal: 0.20,
            instab: 0.10,
        }
    }
}

/// `1 − after / before`; `None` when `before` is not a positive number.
pub fn causal_drop(w_before: f64, w_after: f64) -> Option<f64> {
    (w_before > 0.0 && w_before.is_finite() && w_after.is_finite())
        .then(|| 1.0 - w_after / w_before)
}

/// Distance implied after ablation, `(1 − δ) · W_pool`.
pub fn ablated_distance(w_pool: f64, drop: f64) -> f64 {
    (1.0 - drop) * w_pool
}

fn pool<'a>(spectra: impl IntoIterator<Item = &'a Spectrum>) -> Vec<f64> {
    spectra
        .into_iter()
        .flat_map(|s| s.eigenvalues().iter().copied())
        .collect()
}

/// W₁ between the pooled eigenvalues of the two groups.
pub fn pooled_w1(authentic: &[&Spectrum], forged: &[&Spectrum]) -> Result<f64> {
    if authentic.is_empty() || forged.is_empty() {
        return Err(Error::param("pooled W1 needs spectra in both groups"));
    }
    wasserstein1(
        pool(authentic.iter().copied()),
        pool(forged.iter().copied()),
    )
}

/// Mixes a layer id into a seed so per-layer streams do not depend on
/// which other layers are present.
pub(crate) fn layer_seed(seed: u64, layer_id: &str) -> u64 {
    let digest = Sha256::digest(layer_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(b)
}

/// Percentile 95% interval of the pooled W₁ over `b` image-level resamples,
/// drawn with replacement within each group.
pub fn w1_bootstrap_ci(
    authentic: &[&Spectrum],
    forged: &[&Spectrum],
    b: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if b < 2 {
        return Err(Error::param(format!("bootstrap needs B >= 2, got {b}")));
    }
    if authentic.is_empty() || forged.is_empty() {
        return Err(Error::param("pooled W1 needs spectra in both groups"));
    }
    let draws: Vec<f64> = (0..b as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = task_rng(seed, k);
            let mut pick = |group: &[&Spectrum]| {
                let idx: Vec<usize> = (0..group.len())
                    .map(|_| rng.random_range(0..group.len()))
                    .collect();
                pool(idx.into_iter().map(|i| group[i]))
            };
            let a = pick(authentic);
            let f = pick(forged);
            wasserstein1(a, f)
        })
        .collect::<Result<_>>()?;
    let mut sorted = draws;
    sorted.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lo: percentile(&sorted, 2.5),
        hi: percentile(&sorted, 97.5),
        failed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalResult {
    pub w_before: f64,
    pub w_after: f64,
    pub drop: Option<f64>,
}

/// The matrix whose spectrum is compared for `kind`.
fn target_matrix(a: &DMatrix<f64>, kind: SpectrumKind) -> Result<DMatrix<f64>> {
    match kind {
        SpectrumKind::Raw => Ok(a.clone()),
        SpectrumKind::Laplacian => normalized_laplacian(a),
    }
}

/// Pooled W₁ before and after removing the top-`r` eigencomponents (by
/// magnitude) from every matrix. Inputs are symmetrized affinity matrices.
pub fn causal_perturbation(
    authentic: &[DMatrix<f64>],
    forged: &[DMatrix<f64>],
    kind: SpectrumKind,
    r: usize,
) -> Result<CausalResult> {
    let spectra = |group: &[DMatrix<f64>], ablate: bool| -> Result<Vec<Spectrum>> {
        group
            .iter()
            .map(|a| {
                let m = target_matrix(a, kind)?;
                let m = if ablate {
                    ablate_top_eigencomponents(&m, r)?
                } else {
                    m
                };
                // Ablation can push values off the Laplacian support, so the
                // ablated spectra are not re-validated as Laplacian.
                eigenspectrum(&m, if ablate { SpectrumKind::Raw } else { kind })
            })
            .collect()
    };
    let before_a = spectra(authentic, false)?;
    let before_f = spectra(forged, false)?;
    let w_before = pooled_w1(
        &before_a.iter().collect::<Vec<_>>(),
        &before_f.iter().collect::<Vec<_>>(),
    )?;
    let w_after = if r == 0 {
        w_before
    } else {
        let after_a = spectra(authentic, true)?;
        let after_f = spectra(forged, true)?;
        pooled_w1(
            &after_a.iter().collect::<Vec<_>>(),
            &after_f.iter().collect::<Vec<_>>(),
        )?
    };
    Ok(CausalResult {
        w_before,
        w_after,
        drop: causal_drop(w_before, w_after),
    })
}

/// Authentic and forged matrices of one layer.
pub type LayerGroups = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

/// [`causal_perturbation`] for every layer, in parallel.
pub fn causal_perturbation_sweep(
    layers: &BTreeMap<String, LayerGroups>,
    kind: SpectrumKind,
    r: usize,
) -> Result<BTreeMap<String, CausalResult>> {
    layers
        .par_iter()
        .map(|(id, (a, f))| {
            causal_perturbation(a, f, kind, r)
                .map(|c| (id.clone(), c))
                .map_err(|e| e.with_ids("", id))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScorecard {
    pub layer_id: String,
    pub w1_pool: f64,
    pub auroc_val: f64,
    pub causal_drop: Option<f64>,
    pub ci_width: f64,
    pub s_dist: f64,
    pub s_loc: f64,
    pub s_causal: f64,
    pub s_instab: f64,
    pub fsel: f64,
}

impl LayerScorecard {
    pub fn new(
        layer_id: impl Into<String>,
        w1_pool: f64,
        auroc_val: f64,
        causal_drop: Option<f64>,
        ci_width: f64,
    ) -> Self {
        Self {
            layer_id: layer_id.into(),
            w1_pool,
            auroc_val,
            causal_drop,
            ci_width,
            s_dist: 0.0,
            s_loc: 0.0,
            s_causal: 0.0,
            s_instab: 0.0,
            fsel: 0.0,
        }
    }

    pub fn composite(&self, w: &FselWeights) -> f64 {
        w.dist * self.s_dist + w.loc * self.s_loc + w.causal * self.s_causal
            - w.instab * self.s_instab
    }
}

/// Population z-scores across the defined entries; undefined entries and
/// zero-spread columns map to 0.
pub fn across_layer_z(values: &[Option<f64>]) -> Vec<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return vec![0.0; values.len()];
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = (defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scale = mean.abs().max(1e-300);
    if std <= 1e-12 * scale || std == 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|v| v.map_or(0.0, |x| (x - mean) / std))
        .collect()
}

/// Fills the z components and composite score, and sorts descending by
/// FSEL with ties broken by layer id.
pub fn fsel_score(
    mut cards: Vec<LayerScorecard>,
    weights: &FselWeights,
) -> Result<Vec<LayerScorecard>> {
    if cards.len() < 2 {
        return Err(Error::param("FSEL ranking needs at least two layers"));
    }
    let col = |f: &dyn Fn(&LayerScorecard) -> Option<f64>| cards.iter().map(f).collect::<Vec<_>>();
    let s_dist = across_layer_z(&col(&|c| Some(c.w1_pool)));
    let s_causal = across_layer_z(&col(&|c| c.causal_drop));
    let s_instab = across_layer_z(&col(&|c| Some(c.ci_width)));
    for (i, c) in cards.iter_mut().enumerate() {
        c.s_dist = s_dist[i];
        c.s_loc = 0.0;
        c.s_causal = s_causal[i];
        c.s_instab = s_instab[i];
        c.fsel = c.composite(weights);
    }
    cards.sort_by(|a, b| {
        b.fsel
            .total_cmp(&a.fsel)
            .then_with(|| a.layer_id.cmp(&b.layer_id))
    });
    Ok(cards)
}

/// Alternative softmax input: z(AUROC) + z(separation) per layer.
pub fn reliability(cards: &[LayerScorecard]) -> BTreeMap<String, f64> {
    let z_a = across_layer_z(&cards.iter().map(|c| Some(c.auroc_val)).collect::<Vec<_>>());
    let z_s = across_layer_z(&cards.iter().map(|c| Some(c.w1_pool)).collect::<Vec<_>>());
    cards
        .iter()
        .enumerate()
        .map(|(i, c)| (c.layer_id.clone(), z_a[i] + z_s[i]))
        .collect()
}

const SCORECARD_HEADER: [&str; 10] = [
    "layer_id",
    "w1_pool",
    "auroc_val",
    "causal_drop",
    "ci_width",
    "s_dist",
    "s_loc",
    "s_causal",
    "s_instab",
    "fsel",
];

pub fn write_scorecards(path: &Path, cards: &[LayerScorecard]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORECARD_HEADER)?;
    for c in cards {
        w.write_record([
            c.layer_id.clone(),
            c.w1_pool.to_string(),
            c.auroc_val.to_string(),
            c.causal_drop
                .map_or_else(|| "NA".to_string(), |v| v.to_string()),
            c.ci_width.to_string(),
            c.s_dist.to_string(),
            c.s_loc.to_string(),
            c.s_causal.to_string(),
            c.s_instab.to_string(),
            c.fsel.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scorecards(path: &Path) -> Result<Vec<LayerScorecard>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != SCORECARD_HEADER {
        return Err(bad("unexpected scorecard header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| {
                bad(format!(
                    "bad number `{}` in column {}",
                    &rec[i], SCORECARD_HEADER[i]
                ))
            })
        };
        out.push(LayerScorecard {
            layer_id: rec[0].to_string(),
            w1_pool: num(1)?,
            auroc_val: num(2)?,
            causal_drop: if &rec[3] == "NA" { None } else { Some(num(3)?) },
            ci_width: num(4)?,
            s_dist: num(5)?,
            s_loc: num(6)?,
            s_causal: num(7)?,
            s_instab: num(8)?,
            fsel: num(9)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_drop_examples() {
        let d = causal_drop(5.335e-3, 2.769e-3).unwrap();
        assert!((d - 0.481).abs() < 5e-4);
        assert!((ablated_distance(5.335e-3, 0.481) - 2.769e-3).abs() < 1e-6);
        assert_eq!(causal_drop(2.0, 2.0), Some(0.0));
        assert_eq!(causal_drop(2.0, 0.0), Some(1.0));
        assert_eq!(causal_drop(0.0, 1.0), None);
        assert_eq!(causal_drop(-1.0, 1.0), None);
    }

    fn card(id: &str, w1: f64, drop: Option<f64>, ci: f64) -> LayerScorecard {
        LayerScorecard::new(id, w1, 0.5, drop, ci)
    }

    #[test]
    fn fsel_weight_arithmetic() {
        let mut c = card("x", 0.0, None, 0.0);
        c.s_dist = 1.0;
        c.s_causal = 1.0;
        assert!((c.composite(&FselWeights::default()) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn fsel_degenerate_cases() {
        let cards = vec![
            card("b", 1.0, Some(0.2), 0.1),
            card("a", 1.0, Some(0.2), 0.1),
        ];
        let ranked = fsel_score(cards, &FselWeights::default()).unwrap();
        assert!(ranked.iter().all(|c| c.fsel == 0.0));
        assert_eq!(ranked[0].layer_id, "a");
        assert!(fsel_score(vec![card("a", 1.0, None, 0.0)], &FselWeights::default()).is_err());
    }

    #[test]
    fn fsel_z_columns_sum_to_zero() {
        let cards = vec![
            card("a", 1.0, Some(0.5), 0.1),
            card("b", 3.0, Some(0.1), 0.3),
            card("c", 2.0, None, 0.2),
            card("d", 7.0, Some(0.3), 0.9),
        ];
        let ranked = fsel_score(cards, &FselWeights::default()).unwrap();
        for col in [
            ranked.iter().map(|c| c.s_dist).sum::<f64>(),
            ranked.iter().map(|c| c.s_causal).sum::<f64>(),
            ranked.iter().map(|c| c.s_instab).sum::<f64>(),
        ] {
            assert!(col.abs() < 1e-9);
        }
        let c = ranked.iter().find(|c| c.layer_id == "c").unwrap();
        assert_eq!(c.s_causal, 0.0);
        for c in &ranked {
            assert!((c.fsel - c.composite(&FselWeights::default())).abs() <= 1e-12);
        }
        assert!(ranked.windows(2).all(|w| w[0].fsel >= w[1].fsel));
    }

    #[test]
    fn causal_block_toy() {
        // Authentic: two equal 4-node cliques. Forged: the same with a heavier
        // second clique. On the raw spectrum the difference sits entirely in
        // the top eigenpairs, so ablating r = 2 removes it.
        let block = |w1: f64, w2: f64| {
            let mut m = DMatrix::zeros(8, 8);
            for i in 0..8 {
                for j in 0..8 {
                    if i != j && (i < 4) == (j < 4) {
                        m[(i, j)] = if i < 4 { w1 } else { w2 };
                    }
                }
            }
            m
        };
        let auth = vec![block(1.0, 1.0), block(1.0, 1.0)];
        let forged = vec![block(1.0, 2.0), block(1.0, 2.0)];
        let c0 = causal_perturbation(&auth, &forged, SpectrumKind::Raw, 0).unwrap();
        assert_eq!(c0.w_before, c0.w_after);
        assert_eq!(c0.drop, Some(0.0));
        let c = causal_perturbation(&auth, &forged, SpectrumKind::Raw, 2).unwrap();
        assert!(c.w_before > 0.1);
        // Remaining difference comes from the -w eigenvalues (−1 vs −2).
        let c_all = causal_perturbation(&auth, &forged, SpectrumKind::Raw, 7).unwrap();
        assert!(c_all.drop.unwrap() > c.drop.unwrap() - 1e-12);
        assert!((c_all.drop.unwrap() - 1.0).abs() < 1e-9);

        // Rank-one graphs: separation lives only in the leading eigenpair.
        let v = DMatrix::from_fn(6, 1, |i, _| 1.0 + i as f64 * 0.1);
        let outer = &v * v.transpose();
        let c1 =
            causal_perturbation(&[outer.clone()], &[outer * 2.0], SpectrumKind::Raw, 1).unwrap();
        assert!((c1.drop.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_ci_contains_point_and_is_deterministic() {
        let mk = |shift: f64, i: usize| {
            Spectrum::new(
                SpectrumKind::Laplacian,
                (0..20)
                    .map(|k| (k as f64 * 0.05 + shift + 0.001 * i as f64).min(2.0))
                    .collect(),
            )
            .unwrap()
        };
        let a: Vec<Spectrum> = (0..6).map(|i| mk(0.0, i)).collect();
        let f: Vec<Spectrum> = (0..6).map(|i| mk(0.05, i)).collect();
        let ar: Vec<&Spectrum> = a.iter().collect();
        let fr: Vec<&Spectrum> = f.iter().collect();
        let ci = w1_bootstrap_ci(&ar, &fr, 50, 9).unwrap();
        let point = pooled_w1(&ar, &fr).unwrap();
        assert!(ci.lo <= point + 1e-12 && point <= ci.hi + 0.02);
        assert_eq!(ci, w1_bootstrap_ci(&ar, &fr, 50, 9).unwrap());
    }

    #[test]
    fn scorecard_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cards.csv");
        let cards = fsel_score(
            vec![card("a", 0.1, Some(0.3), 0.01), card("b", 0.2, None, 0.02)],
            &FselWeights::default(),
        )
        .unwrap();
        write_scorecards(&path, &cards).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "layer_id,w1_pool,auroc_val,causal_drop,ci_width,s_dist,s_loc,s_causal,s_instab,fsel\n"
        ));
        assert_eq!(read_scorecards(&path).unwrap(), cards);
    }
}
