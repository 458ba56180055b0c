//! Authentic-only calibration.
//!
//! The reference model is built from the authentic images of the training
//! split and nothing else. It holds, for every (layer, spectrum kind), a
//! pooled eigenvalue sketch and per-feature location/scale statistics used
//! for z-scoring.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Bundle, FeatureVector};
use crate::spectral::{Spectrum, SpectrumKind};
use crate::transport::EsdSketch;

/// Default guard added to the scale in z-scores.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Consistency factor turning a MAD into a normal-theory standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic,
    Forged,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Authentic => "authentic",
            Label::Forged => "forged",
        }
    }

    pub fn is_forged(self) -> bool {
        self == Label::Forged
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "authentic" => Ok(Label::Authentic),
            "forged" => Ok(Label::Forged),
            other => Err(Error::InvalidData(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidData(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image_id: String,
    pub label: Label,
    /// `None` until the manifest has been split.
    pub split: Option<Split>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRow {
    image_id: String,
    label: String,
    split: String,
    path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.image_id.is_empty() {
                return Err(Error::InvalidData("empty image_id in manifest".into()));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::InvalidData(format!(
                    "duplicate image_id `{}` in manifest",
                    r.image_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.image_id == image_id)
    }

    pub fn is_split(&self) -> bool {
        self.rows.iter().all(|r| r.split.is_some())
    }

    pub fn rows_in(&self, label: Label, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows
            .iter()
            .filter(move |r| r.label == label && r.split == Some(split))
    }

    pub fn authentic_train_ids(&self) -> BTreeSet<&str> {
        self.rows_in(Label::Authentic, Split::Train)
            .map(|r| r.image_id.as_str())
            .collect()
    }

    /// Checks what an evaluation run needs: a complete split, two or more
    /// authentic training images and both labels in validation.
    pub fn validate_for_evaluation(&self) -> Result<()> {
        if !self.is_split() {
            return Err(Error::Split("manifest has rows without a split".into()));
        }
        if self.rows_in(Label::Authentic, Split::Train).count() < 2 {
            return Err(Error::Split(
                "training split needs at least two authentic images".into(),
            ));
        }
        for label in [Label::Authentic, Label::Forged] {
            if self.rows_in(label, Split::Val).next().is_none() {
                return Err(Error::Split(format!(
                    "no {label} images in the validation split"
                )));
            }
        }
        Ok(())
    }

    /// Reads a manifest CSV. Relative paths are resolved against the
    /// manifest's directory.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("cannot open manifest: {e}"),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_reader(file, base).map_err(|e| match e {
            Error::InvalidData(message) => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_reader(reader: impl Read, base: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["image_id", "label", "split", "path"] {
            return Err(Error::InvalidData(
                "manifest header must be `image_id,label,split,path`".into(),
            ));
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<RawRow>() {
            let raw = rec?;
            let split = if raw.split.is_empty() {
                None
            } else {
                Some(raw.split.parse()?)
            };
            let p = PathBuf::from(&raw.path);
            rows.push(ManifestRow {
                image_id: raw.image_id,
                label: raw.label.parse()?,
                split,
                path: if p.is_absolute() || raw.path.is_empty() {
                    p
                } else {
                    base.join(p)
                },
            });
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(file)
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(RawRow {
                image_id: r.image_id.clone(),
                label: r.label.to_string(),
                split: r.split.map(|s| s.to_string()).unwrap_or_default(),
                path: r.path.to_string_lossy().into_owned(),
            })?;
        }
        if self.rows.is_empty() {
            w.write_record(["image_id", "label", "split", "path"])?;
        }
        w.flush()?;
        Ok(())
    }

    /// SHA-256 over `image_id,label,split` of every row in order. Paths are
    /// left out so relocating the data does not change the fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            let split = r.split.map(|s| s.as_str()).unwrap_or("");
            h.update(format!("{},{},{}\n", r.image_id, r.label, split).as_bytes());
        }
        hex(&h.finalize())
    }
}

impl Manifest {
    /// Hash of the sorted authentic training ids, the only rows a reference
    /// model may depend on.
    pub fn reference_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in self.authentic_train_ids() {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Assigns a seeded, label-stratified train/validation split.
///
/// Per label with `n` images, `round(val_fraction · n)` (clamped to
/// `[1, n − 1]`) go to validation. Ids are sorted before shuffling so the
/// result does not depend on input order.
pub fn split_manifest(rows: Vec<ManifestRow>, val_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::param(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut manifest = Manifest::new(rows)?;
    for (stream, label) in [Label::Authentic, Label::Forged].into_iter().enumerate() {
        let mut ids: Vec<String> = manifest
            .rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.image_id.clone())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 2 {
            return Err(Error::Split(format!(
                "label {label} has {} image(s); at least 2 are needed to split",
                ids.len()
            )));
        }
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let val: HashSet<&str> = ids[..n_val].iter().map(String::as_str).collect();
        for r in manifest.rows.iter_mut().filter(|r| r.label == label) {
            r.split = Some(if val.contains(r.image_id.as_str()) {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    Ok(manifest)
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median absolute deviation from the median, without a consistency factor.
pub fn mad(values: &[f64]) -> Option<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

pub fn robust_z(value: f64, median: f64, mad: f64, eps: f64) -> f64 {
    (value - median) / (MAD_SCALE * mad + eps)
}

pub fn plain_z(value: f64, mean: f64, std: f64, eps: f64) -> f64 {
    (value - mean) / (std + eps)
}

/// Location and scale of one feature over the authentic training images.
///
/// `count` is the number of defined values; with `count == 0` the other
/// fields are zero and the feature is skipped when scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub median: f64,
    pub mad: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_values(values: &[f64]) -> Self {
        let Some(median) = median(values) else {
            return Self {
                median: 0.0,
                mad: 0.0,
                mean: 0.0,
                std: 0.0,
                count: 0,
            };
        };
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            median,
            mad: mad(values).unwrap_or(0.0),
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchWeighting {
    /// Every pooled eigenvalue has the same weight.
    #[default]
    Eigenvalue,
    /// Every image contributes total weight one.
    Image,
}

impl FromStr for SketchWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigenvalue" => Ok(SketchWeighting::Eigenvalue),
            "image" => Ok(SketchWeighting::Image),
            other => Err(Error::param(format!("unknown sketch weighting `{other}`"))),
        }
    }
}

/// Pooled authentic-train sketches keyed by (layer, spectrum kind).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SketchBank {
    sketches: BTreeMap<String, BTreeMap<SpectrumKind, EsdSketch>>,
}

impl SketchBank {
    /// Pools the spectra of authentic training images. Spectra of other
    /// images are ignored.
    pub fn build<'a>(
        spectra: impl IntoIterator<Item = (&'a str, &'a str, &'a Spectrum)>,
        manifest: &Manifest,
        weighting: SketchWeighting,
    ) -> Result<Self> {
        let reference_ids = manifest.authentic_train_ids();
        let mut pooled: BTreeMap<(String, SpectrumKind), Vec<(f64, f64)>> = BTreeMap::new();
        for (image, layer, s) in spectra {
            if !reference_ids.contains(image) {
                continue;
            }
            let w = match weighting {
                SketchWeighting::Eigenvalue => 1.0,
                SketchWeighting::Image => 1.0 / s.len() as f64,
            };
            pooled
                .entry((layer.to_string(), s.kind))
                .or_default()
                .extend(s.eigenvalues().iter().map(|&v| (v, w)));
        }
        let mut sketches: BTreeMap<String, BTreeMap<SpectrumKind, EsdSketch>> = BTreeMap::new();
        for ((layer, kind), atoms) in pooled {
            let sketch = match weighting {
                SketchWeighting::Eigenvalue => {
                    let values: Vec<f64> = atoms.iter().map(|a| a.0).collect();
                    EsdSketch::from_values(&values, kind)?
                }
                SketchWeighting::Image => EsdSketch::from_weighted(&atoms, kind)?,
            };
            sketches.entry(layer).or_default().insert(kind, sketch);
        }
        Ok(Self { sketches })
    }

    pub fn get(&self, layer_id: &str, kind: SpectrumKind) -> Result<&EsdSketch> {
        self.sketches
            .get(layer_id)
            .and_then(|m| m.get(&kind))
            .ok_or_else(|| {
                Error::IncompleteCalibration(vec![format!(
                    "no reference sketch for layer `{layer_id}` ({kind})"
                )])
            })
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.sketches.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, SpectrumKind, &EsdSketch)> {
        self.sketches
            .iter()
            .flat_map(|(l, m)| m.iter().map(move |(k, s)| (l.as_str(), *k, s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeta {
    pub seed: u64,
    pub bundle: Bundle,
    pub eps: f64,
    pub reference_ids_hash: String,
    pub sketch_weighting: SketchWeighting,
    pub n_reference_images: usize,
    /// Number of pooled eigenvalues behind each sketch.
    pub sketch_sources: BTreeMap<String, BTreeMap<SpectrumKind, usize>>,
}

type StatsMap = BTreeMap<String, BTreeMap<SpectrumKind, BTreeMap<String, FeatureStats>>>;

/// Frozen authentic reference: sketches plus per-feature statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub meta: ReferenceMeta,
    stats: StatsMap,
    sketches: SketchBank,
}

#[derive(Serialize, Deserialize)]
struct ReferenceDocument {
    meta: ReferenceMeta,
    stats: StatsMap,
    sketches: BTreeMap<String, BTreeMap<SpectrumKind, Vec<f64>>>,
}

impl ReferenceModel {
    /// Builds the model from the authentic training rows of `features`.
    ///
    /// Every authentic training image must have a feature vector for every
    /// layer and spectrum kind present in `bank`; gaps are reported together.
    pub fn build(
        bank: SketchBank,
        features: &[FeatureVector],
        manifest: &Manifest,
        bundle: Bundle,
        seed: u64,
        eps: f64,
        weighting: SketchWeighting,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::param(format!(
                "eps guard must be positive, got {eps}"
            )));
        }
        let reference_ids = manifest.authentic_train_ids();
        if reference_ids.len() < 2 {
            return Err(Error::Split(
                "reference needs at least two authentic training images".into(),
            ));
        }

        let mut by_key: BTreeMap<(&str, &str, SpectrumKind), &FeatureVector> = BTreeMap::new();
        for fv in features {
            if reference_ids.contains(fv.image_id.as_str()) {
                by_key.insert((&fv.image_id, &fv.layer_id, fv.spectrum_kind), fv);
            }
        }

        let mut gaps = Vec::new();
        let mut stats: StatsMap = BTreeMap::new();
        for (layer, kind, _) in bank.iter() {
            let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for image in &reference_ids {
                match by_key.get(&(*image, layer, kind)) {
                    None => gaps.push(format!("image `{image}` layer `{layer}` ({kind})")),
                    Some(fv) => {
                        for (name, v) in &fv.values {
                            let col = columns.entry(name.as_str()).or_default();
                            if let Some(v) = v {
                                col.push(*v);
                            }
                        }
                    }
                }
            }
            let per_feature = columns
                .into_iter()
                .map(|(name, vals)| (name.to_string(), FeatureStats::from_values(&vals)))
                .collect();
            stats
                .entry(layer.to_string())
                .or_default()
                .insert(kind, per_feature);
        }
        if !gaps.is_empty() {
            return Err(Error::IncompleteCalibration(gaps));
        }

        let sketch_sources = bank.iter().fold(
            BTreeMap::new(),
            |mut acc: BTreeMap<_, BTreeMap<_, _>>, (l, k, s)| {
                acc.entry(l.to_string())
                    .or_default()
                    .insert(k, s.source_count);
                acc
            },
        );
        Ok(Self {
            meta: ReferenceMeta {
                seed,
                bundle,
                eps,
                reference_ids_hash: manifest.reference_fingerprint(),
                sketch_weighting: weighting,
                n_reference_images: reference_ids.len(),
                sketch_sources,
            },
            stats,
            sketches: bank,
        })
    }

    pub fn sketches(&self) -> &SketchBank {
        &self.sketches
    }

    pub fn sketch(&self, layer_id: &str, kind: SpectrumKind) -> Result<&EsdSketch> {
        self.sketches.get(layer_id, kind)
    }

    pub fn layers(&self) -> Vec<String> {
        self.stats.keys().cloned().collect()
    }

    pub fn stats(
        &self,
        layer_id: &str,
        kind: SpectrumKind,
        feature: &str,
    ) -> Option<&FeatureStats> {
        self.stats.get(layer_id)?.get(&kind)?.get(feature)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ReferenceDocument {
            meta: self.meta.clone(),
            stats: self.stats.clone(),
            sketches: self
                .sketches
                .sketches
                .iter()
                .map(|(l, m)| {
                    let inner = m.iter().map(|(k, s)| (*k, s.quantiles.clone())).collect();
                    (l.clone(), inner)
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ReferenceDocument = serde_json::from_str(text)?;
        let mut sketches: BTreeMap<String, BTreeMap<SpectrumKind, EsdSketch>> = BTreeMap::new();
        for (layer, m) in doc.sketches {
            for (kind, quantiles) in m {
                let source_count = doc
                    .meta
                    .sketch_sources
                    .get(&layer)
                    .and_then(|s| s.get(&kind))
                    .copied()
                    .unwrap_or(0);
                let s = EsdSketch {
                    quantiles,
                    support_kind: kind,
                    source_count,
                };
                s.validate()?;
                sketches.entry(layer.clone()).or_default().insert(kind, s);
            }
        }
        Ok(Self {
            meta: doc.meta,
            stats: doc.stats,
            sketches: SketchBank { sketches },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
