//! Property tests for the structural invariants of each module.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use common::*;
use gsf_core::eval::{auroc, permutation_test};
use gsf_core::features::{
    band_masses, extract_features, heat_trace, near_one_mass, Bundle, FeatureParams,
};
use gsf_core::fsel::{across_layer_z, fsel_score, FselWeights, LayerScorecard};
use gsf_core::fusion::{calibrate_threshold, fuse_topk, softmax_weights, Fusion, LayerRanking};
use gsf_core::reference::{
    median, robust_z, Label, Manifest, ManifestRow, ReferenceModel, SketchBank, SketchWeighting,
    Split,
};
use gsf_core::spectral::{eigenspectrum, normalized_laplacian, symmetrize, Spectrum, SpectrumKind};
use gsf_core::synth::{generate_field, generate_scene, SeverityConfig};
use gsf_core::transport::{
    energy_distance, ks_statistic, mmd2_gaussian, tail_wasserstein, wasserstein1, Bandwidth,
    EsdSketch,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..60)
}

fn laplacian_spectrum(seed: u64, n: usize) -> Spectrum {
    let mut r = rng(seed);
    let a = random_graph(&mut r, n, 0.3);
    eigenspectrum(&normalized_laplacian(&a).unwrap(), SpectrumKind::Laplacian).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetrize_is_idempotent(seed in any::<u64>(), n in 2usize..30) {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let s = symmetrize(&m).unwrap();
        prop_assert_eq!(symmetrize(&s).unwrap(), s.clone());
        for i in 0..n {
            for j in 0..n {
                prop_assert!(s[(i, j)] >= 0.0);
                prop_assert_eq!(s[(i, j)], s[(j, i)]);
            }
        }
    }

    #[test]
    fn laplacian_zero_modes_count_components(seed in any::<u64>(), n in 2usize..64, density in 0.0f64..0.15) {
        let mut r = rng(seed);
        let a = random_graph(&mut r, n, density);
        let l = normalized_laplacian(&a).unwrap();
        let isolated = (0..n).filter(|&i| (0..n).all(|j| a[(i, j)] == 0.0)).count();
        prop_assert!((l.trace() - (n - isolated) as f64).abs() < 1e-9);
        let s = eigenspectrum(&l, SpectrumKind::Laplacian).unwrap();
        prop_assert!(s.eigenvalues().iter().all(|&v| (0.0..=2.0).contains(&v)));
        prop_assert!(s.eigenvalues().windows(2).all(|w| w[0] <= w[1]));
        let zeros = s.eigenvalues().iter().filter(|&&v| v < 1e-8).count();
        prop_assert_eq!(zeros, components(&a) + isolated);
    }

    #[test]
    fn distances_are_symmetric(a in samples(), b in samples(), q in 0.05f64..0.95) {
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs());
        prop_assert!(close(wasserstein1(&a, &b).unwrap(), wasserstein1(&b, &a).unwrap()));
        prop_assert!(close(tail_wasserstein(&a, &b, q).unwrap(), tail_wasserstein(&b, &a, q).unwrap()));
        prop_assert!(close(energy_distance(&a, &b).unwrap(), energy_distance(&b, &a).unwrap()));
        prop_assert!(close(
            mmd2_gaussian(&a, &b, Bandwidth::Median).unwrap(),
            mmd2_gaussian(&b, &a, Bandwidth::Median).unwrap()
        ));
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&b, &a).unwrap());
    }

    #[test]
    fn w1_triangle_and_scaling(a in samples(), b in samples(), c in samples(), k in -5.0f64..5.0) {
        let ab = wasserstein1(&a, &b).unwrap();
        let bc = wasserstein1(&b, &c).unwrap();
        let ac = wasserstein1(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
        let ka: Vec<f64> = a.iter().map(|x| k * x).collect();
        let kb: Vec<f64> = b.iter().map(|x| k * x).collect();
        prop_assert!((wasserstein1(&ka, &kb).unwrap() - k.abs() * ab).abs() < 1e-9 * (1.0 + ab));
    }

    #[test]
    fn sketch_quantiles_are_sorted_and_stable(v in prop::collection::vec(0.0f64..2.0, 1..3000)) {
        let s = EsdSketch::from_values(&v, SpectrumKind::Laplacian).unwrap();
        prop_assert!(s.quantiles.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.quantiles.iter().all(|&x| (0.0..=2.0).contains(&x)));
        let again = EsdSketch::from_values(&s.quantiles, SpectrumKind::Laplacian).unwrap();
        let spread = s.quantiles[s.quantiles.len() - 1] - s.quantiles[0];
        prop_assert!(wasserstein1(&s, &again).unwrap() <= 0.01 * spread.max(1e-12));
    }

    #[test]
    fn spectral_feature_monotonicity(seed in any::<u64>(), n in 3usize..40, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5, t in 0.05f64..5.0) {
        let s = laplacian_spectrum(seed, n);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(near_one_mass(&s, lo.max(1e-6)).unwrap() <= near_one_mass(&s, hi.max(1e-6)).unwrap());
        if s.max() > 0.0 {
            prop_assert!(heat_trace(&s, t * 1.5).unwrap() < heat_trace(&s, t).unwrap());
        }
        prop_assert!(band_masses(&s).iter().all(|&m| m >= 0.0 && m <= n as f64));
    }

    #[test]
    fn fsel_rank_ignores_affine_rescaling(
        vals in prop::collection::vec((0.0f64..5.0, 0.3f64..1.0, -1.0f64..1.0, 0.0f64..1.0), 2..12),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let cards = |f: f64, c: f64| -> Vec<LayerScorecard> {
            vals.iter().enumerate().map(|(i, v)| {
                LayerScorecard::new(format!("l{i:02}"), f * v.0 + c, v.1, Some(v.2), v.3)
            }).collect()
        };
        let order = |cs: Vec<LayerScorecard>| -> Vec<String> {
            fsel_score(cs, &FselWeights::default()).unwrap().into_iter().map(|c| c.layer_id).collect()
        };
        let base = fsel_score(cards(1.0, 0.0), &FselWeights::default()).unwrap();
        let scaled = fsel_score(cards(scale, shift), &FselWeights::default()).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a.fsel - b.fsel).abs() < 1e-9);
        }
        prop_assert_eq!(order(cards(1.0, 0.0)), base.iter().map(|c| c.layer_id.clone()).collect::<Vec<_>>());
        for c in &base {
            prop_assert!((c.composite(&FselWeights::default()) - c.fsel).abs() < 1e-12);
        }
        {
            let z = across_layer_z(&vals.iter().map(|v| Some(v.0)).collect::<Vec<_>>());
            prop_assert!(z.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn raising_w1_pool_never_lowers_rank(
        vals in prop::collection::vec((0.0f64..5.0, 0.3f64..1.0, 0.0f64..1.0), 2..10),
        which in any::<prop::sample::Index>(),
        bump in 0.0f64..3.0,
    ) {
        let i = which.index(vals.len());
        let rank = |boost: f64| {
            let cs: Vec<LayerScorecard> = vals.iter().enumerate().map(|(j, v)| {
                let w = if j == i { v.0 + boost } else { v.0 };
                LayerScorecard::new(format!("l{j:02}"), w, v.1, None, v.2)
            }).collect();
            let id = format!("l{i:02}");
            fsel_score(cs, &FselWeights::default()).unwrap().iter().position(|c| c.layer_id == id).unwrap()
        };
        prop_assert!(rank(bump) <= rank(0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(r in prop::collection::vec(-20.0f64..20.0, 1..10), c in -100.0f64..100.0, tau in 0.1f64..5.0) {
        let w = softmax_weights(&r, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (a, b) in w.iter().zip(softmax_weights(&shifted, tau).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_fusion_ranking_survives_a_shift(
        cols in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 8), 1..6),
        c in -10.0f64..10.0,
    ) {
        let ranking: Vec<LayerRanking> = (0..cols.len()).map(|i| LayerRanking {
            layer_id: format!("l{i}"), key: i as f64, w1_pool: 0.0, reliability: 0.0,
        }).collect();
        let map = |shift: f64| -> BTreeMap<String, Vec<f64>> {
            cols.iter().enumerate().map(|(i, v)| (format!("l{i}"), v.iter().map(|x| x + shift).collect())).collect()
        };
        let k = cols.len();
        let a = fuse_topk(&map(0.0), &ranking, k, Fusion::Unweighted, 1.0).unwrap().scores;
        let b = fuse_topk(&map(c), &ranking, k, Fusion::Unweighted, 1.0).unwrap().scores;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if (a[i] - a[j]).abs() > 1e-9 {
                    prop_assert_eq!(a[i] > a[j], b[i] > b[j]);
                }
            }
        }
    }

    #[test]
    fn calibration_bounds_false_positives(v in prop::collection::vec(-5.0f64..5.0, 1..300), alpha in 0.005f64..0.5) {
        let t = calibrate_threshold(&v, alpha).unwrap();
        let flagged = v.iter().filter(|&&x| x >= t).count();
        prop_assert!(flagged as f64 <= (alpha * v.len() as f64).floor());
    }

    #[test]
    fn auroc_rank_invariance_and_symmetry(
        pairs in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..80),
    ) {
        let (mut s, mut l): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        l[0] = true;
        l[1] = false;
        s.iter_mut().for_each(|x| *x = (*x * 4.0).round() / 4.0);
        let a = auroc(&s, &l).unwrap();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert_eq!(a + auroc(&neg, &l).unwrap(), 1.0);
        let mono: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + x * x * x).collect();
        prop_assert_eq!(a, auroc(&mono, &l).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn permutation_p_is_in_range(
        pairs in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40),
        n_perm in 1usize..60,
        seed in any::<u64>(),
    ) {
        let (s, mut l): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        l[0] = true;
        l[1] = false;
        let p = permutation_test(&s, &l, n_perm, seed).unwrap();
        prop_assert!(p >= 1.0 / (n_perm + 1) as f64 && p <= 1.0);
    }

    #[test]
    fn robust_z_median_is_zero(v in prop::collection::vec(-100.0f64..100.0, 1..200)) {
        let m = median(&v).unwrap();
        let mad = gsf_core::reference::mad(&v).unwrap();
        let z: Vec<f64> = v.iter().map(|&x| robust_z(x, m, mad, 1e-8)).collect();
        prop_assert!(median(&z).unwrap().abs() < 1e-12);
    }

    #[test]
    fn synthetic_latents_are_unit_norm(seed in any::<u64>(), h in 4usize..12, w in 4usize..12) {
        let f = generate_field(h, w, 16, seed).unwrap();
        prop_assert_eq!(f.latents.nrows(), h * w);
        for row in f.latents.row_iter() {
            prop_assert!((row.norm() - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(generate_field(h, w, 16, seed).unwrap(), f);
    }

    #[test]
    fn severity_knobs_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (SeverityConfig::new(lo).unwrap(), SeverityConfig::new(hi).unwrap());
        prop_assert!(x.area_ratio() <= y.area_ratio());
        prop_assert!(x.noise() >= y.noise());
        prop_assert!(x.blur_sigma() >= y.blur_sigma());
        prop_assert!(x.block_side(16, 16) <= y.block_side(16, 16));
    }
}

fn row(id: &str, label: Label, split: Split) -> ManifestRow {
    ManifestRow {
        image_id: id.into(),
        label,
        split: Some(split),
        path: PathBuf::from(id),
    }
}

/// Builds a reference from `rows`, with spectra and features for every row.
fn reference_for(rows: Vec<ManifestRow>, spectra: &BTreeMap<String, Spectrum>) -> String {
    let manifest = Manifest::new(rows).unwrap();
    let items: Vec<(&str, &str, &Spectrum)> = manifest
        .rows
        .iter()
        .map(|r| (r.image_id.as_str(), "layer0", &spectra[&r.image_id]))
        .collect();
    let bank = SketchBank::build(items.clone(), &manifest, SketchWeighting::Eigenvalue).unwrap();
    let params = FeatureParams::default();
    let features: Vec<_> = items
        .iter()
        .map(|(i, l, s)| {
            extract_features(
                i,
                l,
                s,
                bank.get(l, SpectrumKind::Laplacian).unwrap(),
                None,
                Bundle::All,
                &params,
            )
            .unwrap()
        })
        .collect();
    ReferenceModel::build(
        bank,
        &features,
        &manifest,
        Bundle::All,
        1,
        1e-8,
        SketchWeighting::Eigenvalue,
    )
    .unwrap()
    .to_json()
    .unwrap()
}

#[test]
fn reference_ignores_forged_and_validation_rows() {
    let mut spectra = BTreeMap::new();
    let mut rows = Vec::new();
    for i in 0..6 {
        let id = format!("a{i}");
        spectra.insert(id.clone(), laplacian_spectrum(100 + i, 20));
        rows.push(row(
            &id,
            Label::Authentic,
            if i < 4 { Split::Train } else { Split::Val },
        ));
    }
    for i in 0..4 {
        let id = format!("f{i}");
        spectra.insert(id.clone(), laplacian_spectrum(200 + i, 20));
        rows.push(row(
            &id,
            Label::Forged,
            if i < 2 { Split::Train } else { Split::Val },
        ));
    }
    let full = reference_for(rows.clone(), &spectra);

    let mut reversed = rows.clone();
    reversed.reverse();
    assert_eq!(full, reference_for(reversed, &spectra));

    let only_reference: Vec<ManifestRow> = rows
        .iter()
        .filter(|r| r.label == Label::Authentic && r.split == Some(Split::Train))
        .cloned()
        .collect();
    assert_eq!(full, reference_for(only_reference, &spectra));

    // Replacing every forged and validation spectrum changes nothing.
    let mut other = spectra.clone();
    for (id, s) in other.iter_mut() {
        if id.starts_with('f') || id == "a4" || id == "a5" {
            *s = laplacian_spectrum(999, 30);
        }
    }
    assert_eq!(full, reference_for(rows, &other));
}

#[test]
fn reference_round_trips_through_json() {
    let mut spectra = BTreeMap::new();
    let mut rows = Vec::new();
    for i in 0..5 {
        let id = format!("a{i}");
        spectra.insert(id.clone(), laplacian_spectrum(300 + i, 16));
        rows.push(row(&id, Label::Authentic, Split::Train));
    }
    let json = reference_for(rows, &spectra);
    let back = ReferenceModel::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
}

#[test]
fn scene_generation_is_bit_deterministic() {
    let (f1, a1) = generate_scene(8, 8, 16, 77).unwrap();
    let (f2, a2) = generate_scene(8, 8, 16, 77).unwrap();
    assert_eq!(f1, f2);
    assert_eq!(a1, a2);
    assert_eq!((a1.nrows(), a1.ncols()), (64, 64));
}
