//! Synthetic attention-like graphs and graph-level forgeries.
//!
//! A scene is an `h × w` lattice of unit latent vectors. Its affinity is a
//! row softmax of `β⟨z_i, z_j⟩ − γ·dist²(i, j)`, symmetrized. A copy-move
//! forgery copies the latents of a square block onto another block of the
//! same scene, so the affinity graph gains an approximately duplicated
//! subgraph.
//!
//! The module also provides non-copy-move corruptions, null controls, the
//! severity sweep and a small multi-layer dataset for end-to-end runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auroc, task_rng};
use crate::features::{extract_features, Bundle, FeatureParams, FeatureVector};
use crate::fusion::{layer_score, ZMode};
use crate::reference::{
    split_manifest, Label, ManifestRow, ReferenceModel, SketchBank, SketchWeighting, Split,
    DEFAULT_EPS,
};
use crate::spectral::{eigenspectrum, normalized_laplacian, symmetrize, Spectrum, SpectrumKind};
use crate::transport::wasserstein1;

pub const DEFAULT_BETA: f64 = 4.0;
pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const DEFAULT_SEVERITIES: [f64; 7] = [0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0];

/// Paste offset as a fraction of the larger grid side.
const PASTE_FRACTION: f64 = 0.375;
/// Gaussian filter support in standard deviations.
const BLUR_TRUNCATE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityParams {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

/// Lattice of unit-norm latent vectors, stored row-major (`h·w × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneField {
    pub h: usize,
    pub w: usize,
    pub latents: DMatrix<f64>,
    pub seed: u64,
}

impl SceneField {
    pub fn feature_dim(&self) -> usize {
        self.latents.ncols()
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    fn normalize_rows(&mut self) {
        for mut row in self.latents.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
    }

    /// Average-pools `f × f` cells and renormalizes (coarser lattice).
    pub fn pooled(&self, f: usize) -> Result<SceneField> {
        if f == 0 || !self.h.is_multiple_of(f) || !self.w.is_multiple_of(f) {
            return Err(Error::param(format!(
                "pool factor {f} does not divide the {}x{} grid",
                self.h, self.w
            )));
        }
        let (h, w, d) = (self.h / f, self.w / f, self.feature_dim());
        let mut latents = DMatrix::zeros(h * w, d);
        for r in 0..self.h {
            for c in 0..self.w {
                let target = (r / f) * w + c / f;
                let src = self.latents.row(r * self.w + c).into_owned();
                let mut dst = latents.row_mut(target);
                dst += src;
            }
        }
        let mut out = SceneField {
            h,
            w,
            latents,
            seed: self.seed,
        };
        out.normalize_rows();
        Ok(out)
    }
}

fn gaussian_latents(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Row-major draw order so the stream maps to tokens one at a time.
    let mut m = DMatrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Seeded scene with i.i.d. Gaussian latents normalized to unit length.
pub fn generate_field(h: usize, w: usize, feature_dim: usize, seed: u64) -> Result<SceneField> {
    if h < 4 || w < 4 || feature_dim == 0 {
        return Err(Error::param(format!(
            "scene needs h, w >= 4 and a positive feature dimension (got {h}x{w}, dim {feature_dim})"
        )));
    }
    let mut rng = task_rng(seed, 0);
    let mut field = SceneField {
        h,
        w,
        latents: gaussian_latents(h * w, feature_dim, &mut rng),
        seed,
    };
    field.normalize_rows();
    Ok(field)
}

/// Symmetrized row-softmax affinity of a scene.
pub fn scene_affinity(field: &SceneField, params: AffinityParams) -> Result<DMatrix<f64>> {
    if !(params.beta.is_finite() && params.gamma >= 0.0 && params.gamma.is_finite()) {
        return Err(Error::param(
            "affinity needs finite beta and nonnegative gamma",
        ));
    }
    let n = field.tokens();
    let gram = &field.latents * field.latents.transpose();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let (ri, ci) = ((i / field.w) as f64, (i % field.w) as f64);
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let (rj, cj) = ((j / field.w) as f64, (j % field.w) as f64);
                let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
                params.beta * gram[(i, j)] - params.gamma * d2
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, v) in e.into_iter().enumerate() {
            a[(i, j)] = v / z;
        }
    }
    symmetrize(&a)
}

/// Scene and its affinity with default parameters.
pub fn generate_scene(
    h: usize,
    w: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<(SceneField, DMatrix<f64>)> {
    let field = generate_field(h, w, feature_dim, seed)?;
    let a = scene_affinity(&field, AffinityParams::default())?;
    Ok((field, a))
}

/// Composite copy-move severity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityConfig {
    pub severity: f64,
}

impl SeverityConfig {
    pub fn new(severity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::param(format!(
                "severity must lie in [0, 1], got {severity}"
            )));
        }
        Ok(Self { severity })
    }

    /// Copied block area as a fraction of the scene.
    pub fn area_ratio(&self) -> f64 {
        0.02 + 0.18 * self.severity
    }

    /// Scale of the noise added to copied latents.
    pub fn noise(&self) -> f64 {
        0.5 * (1.0 - self.severity)
    }

    pub fn blur_sigma(&self) -> f64 {
        if self.severity < 0.5 {
            0.5 - self.severity
        } else {
            0.0
        }
    }

    /// Source-to-target offset in lattice units.
    pub fn paste_distance(&self, h: usize, w: usize) -> usize {
        ((PASTE_FRACTION * h.max(w) as f64).round() as usize).max(1)
    }

    pub fn block_side(&self, h: usize, w: usize) -> usize {
        ((self.area_ratio() * (h * w) as f64).sqrt().round() as usize).max(1)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (BLUR_TRUNCATE * sigma + 0.5) as usize;
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing of a `rows × cols` patch of latent vectors
/// (row-major, one vector per token) with nearest-edge padding.
fn smooth_patch(patch: &DMatrix<f64>, rows: usize, cols: usize, sigma: f64) -> DMatrix<f64> {
    if sigma <= 0.0 {
        return patch.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &DMatrix<f64>, along_rows: bool| {
        let mut out = DMatrix::zeros(src.nrows(), src.ncols());
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = nalgebra::RowDVector::zeros(src.ncols());
                for (t, wgt) in k.iter().enumerate() {
                    let off = t as isize - r;
                    let (ii, jj) = if along_rows {
                        ((i as isize + off).clamp(0, rows as isize - 1) as usize, j)
                    } else {
                        (i, (j as isize + off).clamp(0, cols as isize - 1) as usize)
                    };
                    acc += src.row(ii * cols + jj) * *wgt;
                }
                out.row_mut(i * cols + j).copy_from(&acc);
            }
        }
        out
    };
    pass(&pass(patch, true), false)
}

/// Smooths the whole lattice; the blur analogue among the corruptions.
fn smooth_field(field: &SceneField, sigma: f64) -> SceneField {
    let mut out = field.clone();
    out.latents = smooth_patch(&field.latents, field.h, field.w, sigma);
    out.normalize_rows();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub field: SceneField,
    pub affinity: DMatrix<f64>,
    /// `‖A − Ã‖_F` between the clean and perturbed symmetrized affinities.
    pub frobenius_delta: f64,
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub side: usize,
}

/// Copies a block of latents onto a shifted block of the same scene.
///
/// The copy gets Gaussian noise of norm about `η(s)`, optional lattice
/// smoothing, and is renormalized. The paste is horizontal or vertical at
/// distance `d`; source and target may overlap (the copy is read from the
/// original lattice). Severity 0 returns the scene unchanged.
pub fn inject_copy_move(
    field: &SceneField,
    cfg: SeverityConfig,
    params: AffinityParams,
    seed: u64,
) -> Result<Injection> {
    let clean = scene_affinity(field, params)?;
    if cfg.severity == 0.0 {
        return Ok(Injection {
            field: field.clone(),
            affinity: clean,
            frobenius_delta: 0.0,
            source: (0, 0),
            target: (0, 0),
            side: 0,
        });
    }
    let (h, w) = (field.h, field.w);
    let side = cfg.block_side(h, w);
    let d = cfg.paste_distance(h, w);
    if side + d > h.min(w) {
        return Err(Error::param(format!(
            "a {side}x{side} block shifted by {d} does not fit a {h}x{w} grid"
        )));
    }
    let mut rng = task_rng(seed, 0);
    let (dr, dc) = if rng.random_bool(0.5) { (0, d) } else { (d, 0) };
    let r0 = rng.random_range(0..=h - side - dr);
    let c0 = rng.random_range(0..=w - side - dc);
    let dim = field.feature_dim();

    let mut patch = DMatrix::zeros(side * side, dim);
    for i in 0..side {
        for j in 0..side {
            patch
                .row_mut(i * side + j)
                .copy_from(&field.latents.row((r0 + i) * w + c0 + j));
        }
    }
    let scale = cfg.noise() / (dim as f64).sqrt();
    for i in 0..patch.nrows() {
        for j in 0..dim {
            let g: f64 = rng.sample(StandardNormal);
            patch[(i, j)] += scale * g;
        }
    }
    let patch = smooth_patch(&patch, side, side, cfg.blur_sigma());

    let mut out = field.clone();
    for i in 0..side {
        for j in 0..side {
            let mut row = patch.row(i * side + j).into_owned();
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
            out.latents
                .row_mut((r0 + dr + i) * w + c0 + dc + j)
                .copy_from(&row);
        }
    }
    let affinity = scene_affinity(&out, params)?;
    let frobenius_delta = (&affinity - &clean).norm();
    Ok(Injection {
        field: out,
        affinity,
        frobenius_delta,
        source: (r0, c0),
        target: (r0 + dr, c0 + dc),
        side,
    })
}

/// Block-diagonal `diag(host, block, block)`: a disjoint exact duplicate.
pub fn duplicate_disjoint_block(host: &DMatrix<f64>, block: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (host.nrows(), block.nrows());
    let mut out = DMatrix::zeros(n + 2 * m, n + 2 * m);
    out.view_mut((0, 0), (n, n)).copy_from(host);
    out.view_mut((n, n), (m, m)).copy_from(block);
    out.view_mut((n + m, n + m), (m, m)).copy_from(block);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GlobalSmooth,
    AdditiveNoise,
    ForeignPatch,
    RandomPatchDup,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GlobalSmooth,
        CorruptionKind::AdditiveNoise,
        CorruptionKind::ForeignPatch,
        CorruptionKind::RandomPatchDup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GlobalSmooth => "global_smooth",
            CorruptionKind::AdditiveNoise => "additive_noise",
            CorruptionKind::ForeignPatch => "foreign_patch",
            CorruptionKind::RandomPatchDup => "random_patch_dup",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown corruption `{s}`")))
    }
}

/// Graph-level analogues of blur, noise, splicing and scattered
/// duplication. `strength ∈ (0, 1]`; every kind tends to the identity as
/// strength goes to 0.
pub fn non_cmf_corruption(
    field: &SceneField,
    kind: CorruptionKind,
    strength: f64,
    params: AffinityParams,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::param(format!(
            "strength must lie in (0, 1], got {strength}"
        )));
    }
    let (h, w, dim) = (field.h, field.w, field.feature_dim());
    let mut rng = task_rng(seed, 1);
    let out = match kind {
        CorruptionKind::GlobalSmooth => smooth_field(field, 2.0 * strength),
        CorruptionKind::AdditiveNoise => {
            let mut out = field.clone();
            let scale = strength / (dim as f64).sqrt();
            for v in out.latents.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v += scale * g;
            }
            out.normalize_rows();
            out
        }
        CorruptionKind::ForeignPatch => {
            let foreign = generate_field(h, w, dim, rng.random())?;
            let side = ((0.1 * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
            let r0 = rng.random_range(0..=h - side);
            let c0 = rng.random_range(0..=w - side);
            let mut out = field.clone();
            for i in r0..r0 + side {
                for j in c0..c0 + side {
                    let t = i * w + j;
                    let mixed =
                        field.latents.row(t) * (1.0 - strength) + foreign.latents.row(t) * strength;
                    out.latents.row_mut(t).copy_from(&mixed);
                }
            }
            out.normalize_rows();
            out
        }
        CorruptionKind::RandomPatchDup => {
            let count = (strength * 0.1 * (h * w) as f64).round() as usize;
            let mut out = field.clone();
            for _ in 0..count {
                let src = rng.random_range(0..h * w);
                let dst = rng.random_range(0..h * w);
                let row = field.latents.row(src).into_owned();
                out.latents.row_mut(dst).copy_from(&row);
            }
            out
        }
    };
    scene_affinity(&out, params)
}

/// Labels permuted against their scores.
pub fn score_shuffle(labels: &[bool], seed: u64) -> Vec<bool> {
    let mut out = labels.to_vec();
    out.shuffle(&mut task_rng(seed, 2));
    out
}

/// Permutes `block × block` tiles of a symmetric matrix: diagonal tiles
/// among diagonal slots, upper off-diagonal tiles among upper slots, with
/// the lower triangle mirrored. Entries keep their multiset and the result
/// stays symmetric.
pub fn block_scramble(a: &DMatrix<f64>, block: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if block == 0 || a.ncols() != n || !n.is_multiple_of(block) {
        return Err(Error::param(format!(
            "block scramble needs a square matrix whose size is divisible by {block} (got {}x{})",
            n,
            a.ncols()
        )));
    }
    if (0..n).any(|i| (0..i).any(|j| a[(i, j)] != a[(j, i)])) {
        return Err(Error::InvalidData(
            "block scramble expects a symmetric matrix".into(),
        ));
    }
    let nb = n / block;
    let mut rng = task_rng(seed, 3);
    let mut diag: Vec<usize> = (0..nb).collect();
    diag.shuffle(&mut rng);
    let upper_slots: Vec<(usize, usize)> = (0..nb)
        .flat_map(|i| (i + 1..nb).map(move |j| (i, j)))
        .collect();
    let mut upper = upper_slots.clone();
    upper.shuffle(&mut rng);

    let mut out = DMatrix::zeros(n, n);
    let tile = |(si, sj): (usize, usize)| {
        a.view((si * block, sj * block), (block, block))
            .into_owned()
    };
    for (slot, src) in diag.iter().enumerate() {
        out.view_mut((slot * block, slot * block), (block, block))
            .copy_from(&tile((*src, *src)));
    }
    for (&(ti, tj), &src) in upper_slots.iter().zip(&upper) {
        let t = tile(src);
        out.view_mut((ti * block, tj * block), (block, block))
            .copy_from(&t);
        out.view_mut((tj * block, ti * block), (block, block))
            .copy_from(&t.transpose());
    }
    Ok(out)
}

/// Uniformly permutes the strict upper-triangle weights and mirrors them;
/// the diagonal is kept.
pub fn weight_shuffle(a: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(
            "weight shuffle needs a square matrix".into(),
        ));
    }
    let slots: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let mut values: Vec<f64> = slots.iter().map(|&(i, j)| a[(i, j)]).collect();
    values.shuffle(&mut task_rng(seed, 4));
    let mut out = a.clone();
    for (&(i, j), v) in slots.iter().zip(values) {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    Ok(out)
}

/// Frobenius norm summed over sorted squares, so equal entry multisets give
/// bit-identical norms.
pub fn multiset_frobenius(a: &DMatrix<f64>) -> f64 {
    let mut sq: Vec<f64> = a.iter().map(|v| v * v).collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum::<f64>().sqrt()
}

/// Matrix whose spectrum is compared for `kind`.
pub fn spectral_target(a: &DMatrix<f64>, kind: SpectrumKind) -> Result<DMatrix<f64>> {
    match kind {
        SpectrumKind::Raw => Ok(a.clone()),
        SpectrumKind::Laplacian => normalized_laplacian(a),
    }
}

/// Spearman rank correlation with midranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = mid;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub h: usize,
    pub w: usize,
    pub feature_dim: usize,
    pub affinity: AffinityParams,
    /// Scenes per class.
    pub n_scenes: usize,
    pub val_fraction: f64,
    pub severities: Vec<f64>,
    pub kinds: Vec<SpectrumKind>,
    pub bundle: Bundle,
    pub z_mode: ZMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            h: 16,
            w: 16,
            feature_dim: DEFAULT_FEATURE_DIM,
            affinity: AffinityParams::default(),
            n_scenes: 40,
            val_fraction: 0.25,
            severities: DEFAULT_SEVERITIES.to_vec(),
            kinds: vec![SpectrumKind::Laplacian, SpectrumKind::Raw],
            bundle: Bundle::W1Only,
            z_mode: ZMode::Robust,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SpectrumKind,
    pub severity: f64,
    pub seed: u64,
    pub auroc: f64,
    /// Mean forged minus mean authentic validation score.
    pub mean_shift: f64,
    /// Smallest `‖Δ‖_F/√n − W₁` over the forged validation scenes.
    pub w1_bound_margin: f64,
}

// Stream layout inside one sweep repetition.
const AUTH_STREAM: u64 = 0;
const BASE_STREAM: u64 = 1 << 20;
const INJECT_STREAM: u64 = 2 << 20;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    task_rng(seed, stream).random()
}

/// One repetition of the severity sweep: authentic scenes and independent
/// base scenes for forgeries, a stratified split, a reference built from
/// the authentic training scenes, and validation AUROC per severity. Each
/// forged scene uses the same injection seed at every severity.
pub fn severity_sweep(cfg: &SweepConfig, seed: u64) -> Result<Vec<SweepRow>> {
    let n = cfg.n_scenes;
    if n < 4 {
        return Err(Error::param(
            "severity sweep needs at least 4 scenes per class",
        ));
    }
    for &s in &cfg.severities {
        SeverityConfig::new(s)?;
    }
    let rows: Vec<ManifestRow> = (0..n)
        .map(|i| (format!("a{i:04}"), Label::Authentic))
        .chain((0..n).map(|i| (format!("f{i:04}"), Label::Forged)))
        .map(|(image_id, label)| ManifestRow {
            image_id,
            label,
            split: None,
            path: Default::default(),
        })
        .collect();
    let manifest = split_manifest(rows, cfg.val_fraction, seed)?;
    let index = |id: &str| id[1..].parse::<usize>().expect("generated id");
    let auth_val: Vec<usize> = manifest
        .rows_in(Label::Authentic, Split::Val)
        .map(|r| index(&r.image_id))
        .collect();
    let forged_val: Vec<usize> = manifest
        .rows_in(Label::Forged, Split::Val)
        .map(|r| index(&r.image_id))
        .collect();

    let auth_fields: Vec<SceneField> = (0..n)
        .into_par_iter()
        .map(|i| {
            generate_field(
                cfg.h,
                cfg.w,
                cfg.feature_dim,
                stream_seed(seed, AUTH_STREAM + i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let auth_affinity: Vec<DMatrix<f64>> = auth_fields
        .par_iter()
        .map(|f| scene_affinity(f, cfg.affinity))
        .collect::<Result<_>>()?;
    let base_fields: Vec<SceneField> = forged_val
        .par_iter()
        .map(|&i| {
            generate_field(
                cfg.h,
                cfg.w,
                cfg.feature_dim,
                stream_seed(seed, BASE_STREAM + i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let base_affinity: Vec<DMatrix<f64>> = base_fields
        .par_iter()
        .map(|f| scene_affinity(f, cfg.affinity))
        .collect::<Result<_>>()?;
    let forged_by_severity: Vec<Vec<Injection>> = cfg
        .severities
        .iter()
        .map(|&s| {
            forged_val
                .par_iter()
                .zip(&base_fields)
                .map(|(&i, f)| {
                    inject_copy_move(
                        f,
                        SeverityConfig { severity: s },
                        cfg.affinity,
                        stream_seed(seed, INJECT_STREAM + i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let params = FeatureParams::default();
    let mut out = Vec::new();
    for &kind in &cfg.kinds {
        let spectra = |mats: &[&DMatrix<f64>]| -> Result<Vec<Spectrum>> {
            mats.par_iter()
                .map(|a| eigenspectrum(&spectral_target(a, kind)?, kind))
                .collect()
        };
        let auth_spectra = spectra(&auth_affinity.iter().collect::<Vec<_>>())?;
        let ids: Vec<String> = (0..n).map(|i| format!("a{i:04}")).collect();
        let bank = SketchBank::build(
            ids.iter()
                .zip(&auth_spectra)
                .map(|(id, s)| (id.as_str(), "layer", s)),
            &manifest,
            SketchWeighting::Eigenvalue,
        )?;
        let sketch = bank.get("layer", kind)?.clone();
        let featurize = |id: &str, s: &Spectrum| {
            extract_features(id, "layer", s, &sketch, None, cfg.bundle, &params)
        };
        let auth_features: Vec<FeatureVector> = ids
            .iter()
            .zip(&auth_spectra)
            .map(|(id, s)| featurize(id, s))
            .collect::<Result<_>>()?;
        let model = ReferenceModel::build(
            bank,
            &auth_features,
            &manifest,
            cfg.bundle,
            seed,
            DEFAULT_EPS,
            SketchWeighting::Eigenvalue,
        )?;
        let score = |fv: &FeatureVector| layer_score(fv, &model, cfg.z_mode, cfg.bundle, &params);
        let auth_scores: Vec<f64> = auth_val
            .iter()
            .map(|&i| score(&auth_features[i]))
            .collect::<Result<_>>()?;
        let base_spectra = spectra(&base_affinity.iter().collect::<Vec<_>>())?;

        for (si, &sev) in cfg.severities.iter().enumerate() {
            let injections = &forged_by_severity[si];
            let forged_spectra =
                spectra(&injections.iter().map(|j| &j.affinity).collect::<Vec<_>>())?;
            let forged_scores: Vec<f64> = forged_spectra
                .iter()
                .map(|s| score(&featurize("f", s)?))
                .collect::<Result<_>>()?;
            let mut scores = auth_scores.clone();
            scores.extend(&forged_scores);
            let labels: Vec<bool> = std::iter::repeat_n(false, auth_scores.len())
                .chain(std::iter::repeat_n(true, forged_scores.len()))
                .collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let margin = injections
                .par_iter()
                .zip(&base_affinity)
                .zip(forged_spectra.par_iter().zip(&base_spectra))
                .map(|((inj, clean), (sf, sc))| {
                    let delta = (spectral_target(&inj.affinity, kind)?
                        - spectral_target(clean, kind)?)
                    .norm();
                    let bound = delta / (sc.len() as f64).sqrt();
                    Ok(bound - wasserstein1(sf, sc)?)
                })
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            out.push(SweepRow {
                kind,
                severity: sev,
                seed,
                auroc: auroc(&scores, &labels)?,
                mean_shift: mean(&forged_scores) - mean(&auth_scores),
                w1_bound_margin: margin,
            });
        }
    }
    Ok(out)
}

/// Spearman(AUROC, severity) per (kind, seed) over sweep rows.
pub fn sweep_spearman(rows: &[SweepRow]) -> BTreeMap<(SpectrumKind, u64), f64> {
    let mut groups: BTreeMap<(SpectrumKind, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.kind, r.seed)).or_default();
        g.0.push(r.severity);
        g.1.push(r.auroc);
    }
    groups
        .into_iter()
        .map(|(k, (s, a))| (k, spearman(&s, &a)))
        .collect()
}

/// One synthetic "attention layer": a lattice resolution and temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    /// Average-pooling factor applied to the scene lattice.
    pub pool: usize,
    pub beta: f64,
}

/// Six layers: full and half resolution, each at β ∈ {2, 4, 8}.
pub fn default_layers(h: usize, w: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for pool in [1, 2] {
        for beta in [2.0, 4.0, 8.0] {
            layers.push(LayerSpec {
                layer_id: format!("g{}x{}.b{}", h / pool, w / pool, beta),
                pool,
                beta,
            });
        }
    }
    layers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    pub h: usize,
    pub w: usize,
    pub feature_dim: usize,
    pub gamma: f64,
    pub severity: f64,
    pub layers: Vec<LayerSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_per_class: 40,
            h: 16,
            w: 16,
            feature_dim: DEFAULT_FEATURE_DIM,
            gamma: DEFAULT_GAMMA,
            severity: 0.7,
            layers: default_layers(16, 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub label: Label,
    /// Symmetrized affinity per layer id.
    pub layers: BTreeMap<String, DMatrix<f64>>,
}

fn layer_matrices(
    field: &SceneField,
    cfg: &DatasetConfig,
) -> Result<BTreeMap<String, DMatrix<f64>>> {
    cfg.layers
        .iter()
        .map(|l| {
            let f = if l.pool == 1 {
                field.clone()
            } else {
                field.pooled(l.pool)?
            };
            let a = scene_affinity(
                &f,
                AffinityParams {
                    beta: l.beta,
                    gamma: cfg.gamma,
                },
            )?;
            Ok((l.layer_id.clone(), a))
        })
        .collect()
}

/// Authentic scenes `a0000…` and copy-move forgeries `f0000…` of
/// independent scenes, every image rendered at each configured layer.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<SyntheticImage>> {
    if cfg.layers.is_empty() {
        return Err(Error::param("dataset needs at least one layer"));
    }
    let sev = SeverityConfig::new(cfg.severity)?;
    let n = cfg.n_per_class;
    (0..2 * n)
        .into_par_iter()
        .map(|i| {
            let forged = i >= n;
            let k = if forged { i - n } else { i };
            let stream = if forged { BASE_STREAM } else { AUTH_STREAM } + k as u64;
            let field = generate_field(cfg.h, cfg.w, cfg.feature_dim, stream_seed(seed, stream))?;
            let field = if forged {
                let params = AffinityParams {
                    beta: DEFAULT_BETA,
                    gamma: cfg.gamma,
                };
                inject_copy_move(
                    &field,
                    sev,
                    params,
                    stream_seed(seed, INJECT_STREAM + k as u64),
                )?
                .field
            } else {
                field
            };
            Ok(SyntheticImage {
                image_id: format!("{}{k:04}", if forged { 'f' } else { 'a' }),
                label: if forged {
                    Label::Forged
                } else {
                    Label::Authentic
                },
                layers: layer_matrices(&field, cfg)?,
            })
        })
        .collect()
}
