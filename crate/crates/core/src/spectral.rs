//! Affinity graphs, normalized Laplacians and their eigenvalue spectra.
//!
//! An attention map is an `n × n` matrix of token affinities. Before any
//! spectral analysis it is turned into an undirected weighted graph by
//! averaging with its transpose and clipping at zero. From that graph two
//! spectra are derived: the raw spectrum of the symmetrized matrix and the
//! spectrum of the normalized Laplacian `L = I - D^{-1/2} A D^{-1/2}`, which
//! always lies in `[0, 2]`.
//!
//! Vertices whose degree is below [`ISOLATED_DEGREE`] are treated as
//! isolated: their Laplacian row and column are zero, so each one adds a
//! zero eigenvalue. No epsilon is added to the degrees, since that would
//! shift the whole spectrum.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degrees below this are treated as zero.
pub const ISOLATED_DEGREE: f64 = 1e-12;

/// Allowed overshoot of Laplacian eigenvalues outside `[0, 2]` before clamping.
pub const LAPLACIAN_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumKind {
    Raw,
    Laplacian,
}

impl SpectrumKind {
    pub const ALL: [SpectrumKind; 2] = [SpectrumKind::Raw, SpectrumKind::Laplacian];

    pub fn as_str(self) -> &'static str {
        match self {
            SpectrumKind::Raw => "raw",
            SpectrumKind::Laplacian => "laplacian",
        }
    }

    /// Short tag used in eigenvalue file names (`*_lap_eigs.csv`).
    pub fn file_tag(self) -> &'static str {
        match self {
            SpectrumKind::Raw => "raw",
            SpectrumKind::Laplacian => "lap",
        }
    }
}

impl fmt::Display for SpectrumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpectrumKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(SpectrumKind::Raw),
            "laplacian" | "lap" => Ok(SpectrumKind::Laplacian),
            other => Err(Error::param(format!("unknown spectrum kind `{other}`"))),
        }
    }
}

/// A square token-affinity matrix for one (image, layer) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub image_id: String,
    pub layer_id: String,
    entries: DMatrix<f64>,
}

impl AffinityMatrix {
    /// Wraps a raw (possibly asymmetric) affinity matrix.
    ///
    /// The matrix must be square, at least 2×2, and finite.
    pub fn new(
        image_id: impl Into<String>,
        layer_id: impl Into<String>,
        entries: DMatrix<f64>,
    ) -> Result<Self> {
        validate_square_finite(&entries)?;
        if entries.nrows() < 2 {
            return Err(Error::Dimension(format!(
                "affinity matrix must be at least 2x2, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            layer_id: layer_id.into(),
            entries,
        })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// Returns the symmetrized, zero-clipped copy of this matrix.
    pub fn symmetrized(&self) -> AffinityMatrix {
        AffinityMatrix {
            image_id: self.image_id.clone(),
            layer_id: self.layer_id.clone(),
            // Already validated square and finite.
            entries: symmetrize_unchecked(&self.entries),
        }
    }

    pub fn degrees(&self) -> DegreeVector {
        DegreeVector::of(&self.entries)
    }

    /// Raw spectrum of the (already symmetrized) matrix.
    pub fn raw_spectrum(&self) -> Result<Spectrum> {
        eigenspectrum(&self.entries, SpectrumKind::Raw)
            .map_err(|e| e.with_ids(&self.image_id, &self.layer_id))
    }

    /// Normalized-Laplacian spectrum of the (already symmetrized) matrix.
    pub fn laplacian_spectrum(&self) -> Result<Spectrum> {
        let lap = normalized_laplacian(&self.entries)
            .map_err(|e| e.with_ids(&self.image_id, &self.layer_id))?;
        eigenspectrum(&lap, SpectrumKind::Laplacian)
            .map_err(|e| e.with_ids(&self.image_id, &self.layer_id))
    }

    pub fn spectrum(&self, kind: SpectrumKind) -> Result<Spectrum> {
        match kind {
            SpectrumKind::Raw => self.raw_spectrum(),
            SpectrumKind::Laplacian => self.laplacian_spectrum(),
        }
    }
}

/// Weighted vertex degrees `d_i = Σ_j A_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeVector(pub Vec<f64>);

impl DegreeVector {
    pub fn of(a: &DMatrix<f64>) -> Self {
        DegreeVector(a.row_iter().map(|r| r.sum()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn isolated_count(&self) -> usize {
        self.0.iter().filter(|&&d| d < ISOLATED_DEGREE).count()
    }
}

/// Sorted eigenvalues of a symmetric matrix, i.e. the atoms of its
/// empirical spectral density (mass `1/n` on each value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub kind: SpectrumKind,
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    /// Builds a spectrum from arbitrary-order finite values.
    pub fn new(kind: SpectrumKind, mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::param(
                "spectrum must contain at least one eigenvalue",
            ));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite eigenvalue".into()));
        }
        eigenvalues.sort_by(f64::total_cmp);
        Ok(Self { kind, eigenvalues })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

impl AsRef<[f64]> for Spectrum {
    fn as_ref(&self) -> &[f64] {
        &self.eigenvalues
    }
}

fn validate_square_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "matrix is not square: {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::Dimension("matrix is empty".into()));
    }
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let n = m.nrows();
        // nalgebra storage is column-major.
        return Err(Error::InvalidData(format!(
            "non-finite entry at ({}, {})",
            pos % n,
            pos / n
        )));
    }
    Ok(())
}

fn validate_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::InvalidData(format!(
                    "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    Ok(())
}

fn symmetrize_unchecked(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| (0.5 * (a[(i, j)] + a[(j, i)])).max(0.0))
}

/// `max((A + Aᵀ) / 2, 0)` elementwise.
pub fn symmetrize(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    validate_square_finite(a)?;
    Ok(symmetrize_unchecked(a))
}

/// Symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}` of a symmetric
/// nonnegative affinity matrix. Isolated vertices get all-zero rows/columns.
pub fn normalized_laplacian(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    validate_square_finite(a)?;
    validate_symmetric(a)?;
    if a.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidData(
            "normalized Laplacian needs a nonnegative matrix; symmetrize first".into(),
        ));
    }
    let n = a.nrows();
    let inv_sqrt: Vec<Option<f64>> = DegreeVector::of(a)
        .0
        .into_iter()
        .map(|d| (d >= ISOLATED_DEGREE).then(|| 1.0 / d.sqrt()))
        .collect();
    let mut lap = DMatrix::zeros(n, n);
    for j in 0..n {
        let Some(sj) = inv_sqrt[j] else { continue };
        for i in 0..n {
            let Some(si) = inv_sqrt[i] else { continue };
            let delta = if i == j { 1.0 } else { 0.0 };
            lap[(i, j)] = delta - si * a[(i, j)] * sj;
        }
    }
    // Exact symmetry regardless of rounding order.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (lap[(i, j)] + lap[(j, i)]);
            lap[(i, j)] = v;
            lap[(j, i)] = v;
        }
    }
    Ok(lap)
}

/// All eigenvalues of a symmetric matrix, sorted ascending.
///
/// For `SpectrumKind::Laplacian` the values are checked to lie in
/// `[-1e-8, 2 + 1e-8]` and then clamped into `[0, 2]`; a larger overshoot
/// is a numeric error rather than silently absorbed drift.
pub fn eigenspectrum(m: &DMatrix<f64>, kind: SpectrumKind) -> Result<Spectrum> {
    validate_square_finite(m)?;
    validate_symmetric(m)?;
    let mut values: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "eigensolver produced non-finite eigenvalues",
        ));
    }
    values.sort_by(f64::total_cmp);
    if kind == SpectrumKind::Laplacian {
        let (lo, hi) = (values[0], values[values.len() - 1]);
        if lo < -LAPLACIAN_TOL || hi > 2.0 + LAPLACIAN_TOL {
            return Err(Error::numeric(format!(
                "Laplacian eigenvalues [{lo:e}, {hi:e}] exceed [0, 2] by more than {LAPLACIAN_TOL:e}"
            )));
        }
        for v in &mut values {
            *v = v.clamp(0.0, 2.0);
        }
    }
    Ok(Spectrum {
        kind,
        eigenvalues: values,
    })
}

/// Removes the `r` eigencomponents of largest |eigenvalue|:
/// `M' = M - Σ_{k≤r} μ_k v_k v_kᵀ`.
pub fn ablate_top_eigencomponents(m: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    validate_square_finite(m)?;
    validate_symmetric(m)?;
    let n = m.nrows();
    if r >= n {
        return Err(Error::param(format!(
            "cannot ablate {r} eigencomponents of a {n}x{n} matrix"
        )));
    }
    if r == 0 {
        return Ok(m.clone());
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100 * n.max(10))
        .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let mut out = m.clone();
    for &k in order.iter().take(r) {
        let v = eig.eigenvectors.column(k);
        out -= eig.eigenvalues[k] * v * v.transpose();
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Ok(out)
}
