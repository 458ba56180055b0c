//! End-to-end orchestration over a manifest of per-image matrix files.
//!
//! Stages run in a fixed order: spectra, features, reference, layer scores,
//! layer ranking, fusion and evaluation. Each stage writes its artifacts
//! under the output directory. Spectra are cached per (image, layer) and
//! keyed by the SHA-256 of the input file; later stages are cheap and are
//! recomputed from the cached spectra.
//!
//! Outputs depend only on the inputs, the configuration and the seed. The
//! number of worker threads never changes a byte of any report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{self, auroc, MetricReport};
use crate::features::{
    extract_features, graph_controls_with_spectrum, Bundle, FeatureParams, FeatureVector,
    GraphControls,
};
use crate::fsel::{
    self, causal_perturbation, fsel_score, layer_seed, pooled_w1, reliability, w1_bootstrap_ci,
    FselWeights, LayerScorecard,
};
use crate::fusion::{
    calibrate_thresholds, fuse_topk, layer_score, ConfigFingerprint, DetectionReport, Fusion,
    ImageScore, LayerRanking, RankingSource, ZMode, FPR_TARGETS,
};
use crate::io;
use crate::reference::{
    hex, split_manifest, Label, Manifest, ReferenceModel, SketchBank, SketchWeighting, Split,
    DEFAULT_EPS,
};
use crate::spectral::{eigenspectrum, normalized_laplacian, symmetrize, Spectrum, SpectrumKind};
use crate::synth::{
    block_scramble, multiset_frobenius, score_shuffle, severity_sweep, sweep_spearman,
    weight_shuffle, SweepConfig, SweepRow, DEFAULT_SEVERITIES,
};

/// Source of the softmax input when fusing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Uniform,
    Fsel,
    Reliability,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::Fsel => "fsel",
            Weighting::Reliability => "reliability",
        }
    }

    fn fusion(self) -> Fusion {
        match self {
            Weighting::Uniform => Fusion::Unweighted,
            _ => Fusion::Softmax,
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "unweighted" => Ok(Weighting::Uniform),
            "fsel" => Ok(Weighting::Fsel),
            "reliability" => Ok(Weighting::Reliability),
            other => Err(Error::param(format!("unknown weighting `{other}`"))),
        }
    }
}

pub fn parse_spectrum_kinds(s: &str) -> Result<Vec<SpectrumKind>> {
    match s {
        "both" => Ok(SpectrumKind::ALL.to_vec()),
        other => Ok(vec![other.parse()?]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub spectrum_kinds: Vec<SpectrumKind>,
    pub bundle: Bundle,
    pub z_mode: ZMode,
    pub k: usize,
    pub weighting: Weighting,
    pub ranking: RankingSource,
    pub temperature: f64,
    pub tail_q: f64,
    pub near_one_eps: f64,
    pub r_ablate: usize,
    pub b: usize,
    pub n_perm: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub sketch_weighting: SketchWeighting,
    pub continue_on_error: bool,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    /// Sweep repetitions, scenes per class and synthetic grid side.
    pub repeats: usize,
    pub scenes: usize,
    pub grid: usize,
    /// Copy-move severity of generated datasets.
    pub severity: f64,
    pub severities: Vec<f64>,
    pub shuffles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spectrum_kinds: vec![SpectrumKind::Laplacian],
            bundle: Bundle::W1Only,
            z_mode: ZMode::Robust,
            k: 5,
            weighting: Weighting::Fsel,
            ranking: RankingSource::Auroc,
            temperature: 1.0,
            tail_q: 0.10,
            near_one_eps: 0.05,
            r_ablate: fsel::DEFAULT_ABLATION_RANK,
            b: 200,
            n_perm: 200,
            seed: 0,
            val_fraction: 0.25,
            sketch_weighting: SketchWeighting::Eigenvalue,
            continue_on_error: false,
            manifest: None,
            out: PathBuf::from("gsf_out"),
            repeats: 20,
            scenes: 40,
            grid: 16,
            severity: 0.7,
            severities: DEFAULT_SEVERITIES.to_vec(),
            shuffles: 50,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::param(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::param(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Sets one documented key. Paths in config files are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "spectrum" | "spectrum_kinds" => self.spectrum_kinds = parse_spectrum_kinds(v)?,
            "bundle" => self.bundle = v.parse()?,
            "z_mode" => self.z_mode = v.parse()?,
            "k" => self.k = parse_num(key, v)?,
            "weighting" => self.weighting = v.parse()?,
            "ranking" => self.ranking = v.parse()?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "tail_q" => self.tail_q = parse_num(key, v)?,
            "near_one_eps" | "eps" => self.near_one_eps = parse_num(key, v)?,
            "r_ablate" => self.r_ablate = parse_num(key, v)?,
            "B" | "b" => self.b = parse_num(key, v)?,
            "n_perm" => self.n_perm = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "val_fraction" => self.val_fraction = parse_num(key, v)?,
            "sketch_weighting" => self.sketch_weighting = v.parse()?,
            "continue_on_error" => self.continue_on_error = parse_bool(key, v)?,
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "repeats" => self.repeats = parse_num(key, v)?,
            "scenes" => self.scenes = parse_num(key, v)?,
            "grid" => self.grid = parse_num(key, v)?,
            "severity" => self.severity = parse_num(key, v)?,
            "severities" => {
                self.severities = v
                    .split(',')
                    .map(|s| parse_num::<f64>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "shuffles" => self.shuffles = parse_num(key, v)?,
            other => return Err(Error::param(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Returns the config
    /// and any list-valued grid keys (for ablation) unapplied.
    pub fn parse_with_grid(text: &str) -> Result<(Self, BTreeMap<String, Vec<String>>)> {
        let mut cfg = Self::default();
        let mut grid = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::param(format!("config line {}: expected `key = value`", no + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if GRID_KEYS.contains(&k) && v.contains(',') {
                grid.insert(
                    k.to_string(),
                    v.split(',').map(|s| s.trim().to_string()).collect(),
                );
            } else {
                cfg.set(k, v)
                    .map_err(|e| Error::param(format!("config line {}: {e}", no + 1)))?;
            }
        }
        Ok((cfg, grid))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (cfg, grid) = Self::parse_with_grid(text)?;
        if let Some(k) = grid.keys().next() {
            return Err(Error::param(format!(
                "`{k}` takes a single value outside ablation grids"
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spectrum_kinds.is_empty() {
            return Err(Error::param("no spectrum kind selected"));
        }
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature must be positive"));
        }
        if !(self.tail_q > 0.0 && self.tail_q < 1.0) {
            return Err(Error::param("tail_q must lie in (0, 1)"));
        }
        if !(self.near_one_eps > 0.0) {
            return Err(Error::param("near_one_eps must be positive"));
        }
        if self.b < 2 || self.n_perm < 1 {
            return Err(Error::param("B must be >= 2 and n_perm >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::param("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn feature_params(&self) -> FeatureParams {
        FeatureParams {
            tail_q: self.tail_q,
            near_one_eps: self.near_one_eps,
            ..FeatureParams::default()
        }
    }

    fn fingerprint(&self, kind: SpectrumKind) -> ConfigFingerprint {
        ConfigFingerprint {
            spectrum: kind.to_string(),
            bundle: self.bundle,
            k: self.k,
            fusion: self.weighting.fusion(),
            ranking: self.ranking,
            weighting: self.weighting.to_string(),
            z_mode: self.z_mode,
            temperature: self.temperature,
        }
    }
}

const GRID_KEYS: [&str; 5] = ["spectrum", "bundle", "z_mode", "k", "weighting"];

/// Spectra and graph controls of one (image, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub spectra: BTreeMap<SpectrumKind, Spectrum>,
    pub controls: GraphControls,
}

/// Records keyed by (image_id, layer_id).
pub type Records = BTreeMap<(String, String), LayerRecord>;

/// Per kind → layer → image → score.
pub type LayerScores = BTreeMap<SpectrumKind, BTreeMap<String, BTreeMap<String, f64>>>;

/// Optional transformation applied to every symmetrized matrix on load.
pub type Perturb<'a> =
    Option<&'a (dyn Fn(&str, &str, &DMatrix<f64>) -> Result<DMatrix<f64>> + Sync)>;

fn compute_record(a: &DMatrix<f64>, kinds: &[SpectrumKind]) -> Result<LayerRecord> {
    let raw = eigenspectrum(a, SpectrumKind::Raw)?;
    let controls = graph_controls_with_spectrum(a, &raw);
    let mut spectra = BTreeMap::new();
    for &kind in kinds {
        let s = match kind {
            SpectrumKind::Raw => raw.clone(),
            SpectrumKind::Laplacian => eigenspectrum(&normalized_laplacian(a)?, kind)?,
        };
        spectra.insert(kind, s);
    }
    Ok(LayerRecord { spectra, controls })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    io::write_atomic(path, text.as_bytes())
}

fn safe_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c == '/' || c == '\\' || c == '\0' {
                '_'
            } else {
                c
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    input_sha256: String,
    kinds: Vec<SpectrumKind>,
}

/// Kind-level inputs to the scorecards that do not depend on the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEvidence {
    pub w1_pool: f64,
    pub ci_width: f64,
    pub causal_drop: Option<f64>,
}

/// Everything produced for one spectrum kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KindOutcome {
    pub scorecards: Vec<LayerScorecard>,
    pub report: DetectionReport,
    pub metrics: MetricReport,
}

/// An opened run: validated configuration, split manifest and layer layout.
pub struct Session {
    pub cfg: RunConfig,
    pub manifest: Manifest,
    /// image → (layer id, matrix path), sorted by layer id.
    pub layer_files: BTreeMap<String, Vec<(String, PathBuf)>>,
    pub layers: Vec<String>,
    matrix_hashes: BTreeMap<(String, String), String>,
}

impl Session {
    /// Reads and splits the manifest and checks the layer layout. No
    /// numerical work happens here, so configuration errors surface first.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let path = cfg
            .manifest
            .clone()
            .ok_or_else(|| Error::param("no manifest given (use --manifest or `manifest =`)"))?;
        let mut manifest = Manifest::read_csv(&path)?;
        std::fs::create_dir_all(&cfg.out)?;
        if !manifest.is_empty() && !manifest.is_split() {
            let rows = manifest.rows.clone();
            manifest = split_manifest(rows, cfg.val_fraction, cfg.seed)?;
            manifest.write_csv(&cfg.out.join("manifest_split.csv"))?;
        }
        let mut layer_files = BTreeMap::new();
        for row in &manifest.rows {
            layer_files.insert(
                row.image_id.clone(),
                io::discover_layers(&row.image_id, &row.path)?,
            );
        }
        let mut layers: Option<Vec<String>> = None;
        for (image, files) in &layer_files {
            let ids: Vec<String> = files.iter().map(|f| f.0.clone()).collect();
            match &layers {
                None => layers = Some(ids),
                Some(first) if *first != ids => {
                    return Err(Error::InvalidData(format!(
                        "image `{image}` has layers {ids:?}, expected {first:?}"
                    )))
                }
                _ => {}
            }
        }
        let layers = layers.unwrap_or_default();
        if !manifest.is_empty() && cfg.k > layers.len() {
            return Err(Error::param(format!(
                "k = {} exceeds the {} available layers",
                cfg.k,
                layers.len()
            )));
        }
        Ok(Self {
            cfg,
            manifest,
            layer_files,
            layers,
            matrix_hashes: BTreeMap::new(),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn spectra_dir(&self, image: &str) -> PathBuf {
        self.cfg.out.join("spectra").join(safe_component(image))
    }

    fn load_matrix(&self, image: &str, path: &Path) -> Result<(DMatrix<f64>, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("cannot read: {e}"),
        })?;
        let hash = sha256_hex(&bytes);
        let m = io::read_matrix(path)?;
        if m.nrows() < 2 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("matrix for image `{image}` must be at least 2x2"),
            });
        }
        let a = symmetrize(&m).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok((a, hash))
    }

    /// Symmetrized matrix of one (image, layer), after `perturb`.
    pub fn matrix(&self, image: &str, layer: &str, perturb: Perturb<'_>) -> Result<DMatrix<f64>> {
        let path = self.layer_files[image]
            .iter()
            .find(|f| f.0 == layer)
            .map(|f| f.1.clone())
            .ok_or_else(|| Error::InvalidData(format!("image `{image}` has no layer `{layer}`")))?;
        let (a, _) = self.load_matrix(image, &path)?;
        match perturb {
            Some(p) => p(image, layer, &a),
            None => Ok(a),
        }
    }

    fn cached_record(&self, image: &str, layer: &str, hash: &str) -> Option<LayerRecord> {
        let dir = self.spectra_dir(image);
        let stem = safe_component(layer);
        let entry: CacheEntry = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("{stem}.cache.json"))).ok()?,
        )
        .ok()?;
        if entry.input_sha256 != hash
            || !self
                .cfg
                .spectrum_kinds
                .iter()
                .all(|k| entry.kinds.contains(k))
        {
            return None;
        }
        let controls: GraphControls = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("{stem}_controls.json"))).ok()?,
        )
        .ok()?;
        let mut spectra = BTreeMap::new();
        for &kind in &self.cfg.spectrum_kinds {
            let p = dir.join(format!("{stem}_{}_eigs.csv", kind.file_tag()));
            spectra.insert(kind, io::read_spectrum_csv(&p, kind).ok()?);
        }
        Some(LayerRecord { spectra, controls })
    }

    fn store_record(&self, image: &str, layer: &str, hash: &str, rec: &LayerRecord) -> Result<()> {
        let dir = self.spectra_dir(image);
        let stem = safe_component(layer);
        for (kind, s) in &rec.spectra {
            io::write_spectrum_csv(&dir.join(format!("{stem}_{}_eigs.csv", kind.file_tag())), s)?;
        }
        write_json(&dir.join(format!("{stem}_controls.json")), &rec.controls)?;
        // The cache entry goes last so an interrupted write is recomputed.
        write_json(
            &dir.join(format!("{stem}.cache.json")),
            &CacheEntry {
                input_sha256: hash.to_string(),
                kinds: rec.spectra.keys().copied().collect(),
            },
        )
    }

    /// Spectra stage. With `perturb` set nothing is cached or written.
    pub fn compute_records(&mut self, perturb: Perturb<'_>) -> Result<Records> {
        if self.manifest.is_empty() {
            log::warn!("manifest is empty; nothing to do");
            return Ok(Records::new());
        }
        let tasks: Vec<(String, String, PathBuf)> = self
            .layer_files
            .iter()
            .flat_map(|(img, files)| {
                files
                    .iter()
                    .map(move |(l, p)| (img.clone(), l.clone(), p.clone()))
            })
            .collect();
        let kinds = self.cfg.spectrum_kinds.clone();
        let this = &*self;
        let results: Vec<Result<(String, String, String, LayerRecord, bool)>> = tasks
            .par_iter()
            .map(|(image, layer, path)| {
                let (a, hash) = this.load_matrix(image, path)?;
                if perturb.is_none() {
                    if let Some(rec) = this.cached_record(image, layer, &hash) {
                        return Ok((image.clone(), layer.clone(), hash, rec, true));
                    }
                }
                let a = match perturb {
                    Some(p) => p(image, layer, &a)?,
                    None => a,
                };
                let rec = compute_record(&a, &kinds).map_err(|e| e.with_ids(image, layer))?;
                if perturb.is_none() {
                    this.store_record(image, layer, &hash, &rec)?;
                }
                Ok((image.clone(), layer.clone(), hash, rec, false))
            })
            .collect();

        let mut records = Records::new();
        let mut failed: BTreeSet<String> = BTreeSet::new();
        let mut reused = 0usize;
        for ((image, layer, _), res) in tasks.iter().zip(results) {
            match res {
                Ok((i, l, hash, rec, cached)) => {
                    reused += usize::from(cached);
                    self.matrix_hashes.insert((i.clone(), l.clone()), hash);
                    records.insert((i, l), rec);
                }
                Err(e) if self.cfg.continue_on_error => {
                    log::warn!("skipping image `{image}` (layer `{layer}`): {e}");
                    failed.insert(image.clone());
                }
                Err(e) => return Err(e),
            }
        }
        if !failed.is_empty() {
            records.retain(|(i, _), _| !failed.contains(i));
            self.manifest.rows.retain(|r| !failed.contains(&r.image_id));
            self.layer_files.retain(|i, _| !failed.contains(i));
        }
        log::info!(
            "spectra: {} computed, {reused} reused from cache",
            records.len() - reused
        );
        Ok(records)
    }

    /// Digest over every input matrix hash, in (image, layer) order.
    pub fn input_hashes(&self) -> BTreeMap<String, String> {
        let mut h = Sha256::new();
        for ((i, l), v) in &self.matrix_hashes {
            h.update(format!("{i}\t{l}\t{v}\n").as_bytes());
        }
        BTreeMap::from([
            ("manifest".to_string(), self.manifest.fingerprint()),
            ("matrices".to_string(), hex(&h.finalize())),
        ])
    }

    pub fn sketches(&self, records: &Records) -> Result<SketchBank> {
        SketchBank::build(
            records.iter().flat_map(|((i, l), r)| {
                r.spectra.values().map(move |s| (i.as_str(), l.as_str(), s))
            }),
            &self.manifest,
            self.cfg.sketch_weighting,
        )
    }

    /// Features of every (image, layer, kind) for `bundle`.
    pub fn features(
        &self,
        records: &Records,
        bank: &SketchBank,
        bundle: Bundle,
    ) -> Result<Vec<FeatureVector>> {
        let params = self.cfg.feature_params();
        let items: Vec<(&(String, String), &LayerRecord, SpectrumKind)> = records
            .iter()
            .flat_map(|(key, r)| r.spectra.keys().map(move |k| (key, r, *k)))
            .collect();
        items
            .par_iter()
            .map(|((image, layer), rec, kind)| {
                extract_features(
                    image,
                    layer,
                    &rec.spectra[kind],
                    bank.get(layer, *kind)?,
                    Some(&rec.controls),
                    bundle,
                    &params,
                )
            })
            .collect()
    }

    pub fn reference(
        &self,
        bank: SketchBank,
        features: &[FeatureVector],
        bundle: Bundle,
    ) -> Result<ReferenceModel> {
        ReferenceModel::build(
            bank,
            features,
            &self.manifest,
            bundle,
            self.cfg.seed,
            DEFAULT_EPS,
            self.cfg.sketch_weighting,
        )
    }

    /// Per-layer scores. In plain mode each layer is standardized by the
    /// mean and standard deviation of its authentic training scores.
    pub fn layer_scores(
        &self,
        features: &[FeatureVector],
        model: &ReferenceModel,
        bundle: Bundle,
        z_mode: ZMode,
    ) -> Result<LayerScores> {
        let params = self.cfg.feature_params();
        let raw: Vec<f64> = features
            .par_iter()
            .map(|fv| layer_score(fv, model, z_mode, bundle, &params))
            .collect::<Result<_>>()?;
        let mut out = LayerScores::new();
        for (fv, s) in features.iter().zip(raw) {
            out.entry(fv.spectrum_kind)
                .or_default()
                .entry(fv.layer_id.clone())
                .or_default()
                .insert(fv.image_id.clone(), s);
        }
        if z_mode == ZMode::Plain {
            let train = self.manifest.authentic_train_ids();
            for per_layer in out.values_mut() {
                for scores in per_layer.values_mut() {
                    let ref_vals: Vec<f64> = scores
                        .iter()
                        .filter(|(i, _)| train.contains(i.as_str()))
                        .map(|(_, v)| *v)
                        .collect();
                    let n = ref_vals.len() as f64;
                    let mean = ref_vals.iter().sum::<f64>() / n;
                    let std = (ref_vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    for v in scores.values_mut() {
                        *v = (*v - mean) / (std + DEFAULT_EPS);
                    }
                }
            }
        }
        Ok(out)
    }

    fn val_ids(&self, label: Label) -> Vec<String> {
        self.manifest
            .rows_in(label, Split::Val)
            .map(|r| r.image_id.clone())
            .collect()
    }

    /// Pooled W₁, its bootstrap width and the causal drop per layer, all on
    /// the validation images.
    pub fn layer_evidence(
        &self,
        records: &Records,
        kind: SpectrumKind,
        perturb: Perturb<'_>,
    ) -> Result<BTreeMap<String, LayerEvidence>> {
        let auth = self.val_ids(Label::Authentic);
        let forged = self.val_ids(Label::Forged);
        self.layers
            .par_iter()
            .map(|layer| {
                let spectra = |ids: &[String]| -> Vec<&Spectrum> {
                    ids.iter()
                        .map(|i| &records[&(i.clone(), layer.clone())].spectra[&kind])
                        .collect()
                };
                let (sa, sf) = (spectra(&auth), spectra(&forged));
                let w1_pool = pooled_w1(&sa, &sf)?;
                let ci = w1_bootstrap_ci(&sa, &sf, self.cfg.b, layer_seed(self.cfg.seed, layer))?;
                let load = |ids: &[String]| -> Result<Vec<DMatrix<f64>>> {
                    ids.iter().map(|i| self.matrix(i, layer, perturb)).collect()
                };
                let causal =
                    causal_perturbation(&load(&auth)?, &load(&forged)?, kind, self.cfg.r_ablate)
                        .map_err(|e| e.with_ids("", layer))?;
                Ok((
                    layer.clone(),
                    LayerEvidence {
                        w1_pool,
                        ci_width: ci.width(),
                        causal_drop: causal.drop,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().collect())
    }

    pub fn scorecards(
        &self,
        evidence: &BTreeMap<String, LayerEvidence>,
        scores: &BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Result<Vec<LayerScorecard>> {
        let val: Vec<(&str, bool)> = self
            .manifest
            .rows
            .iter()
            .filter(|r| r.split == Some(Split::Val))
            .map(|r| (r.image_id.as_str(), r.label.is_forged()))
            .collect();
        let labels: Vec<bool> = val.iter().map(|v| v.1).collect();
        let cards = self
            .layers
            .iter()
            .map(|layer| {
                let s: Vec<f64> = val.iter().map(|(i, _)| scores[layer][*i]).collect();
                let e = &evidence[layer];
                Ok(LayerScorecard::new(
                    layer.clone(),
                    e.w1_pool,
                    auroc(&s, &labels)?,
                    e.causal_drop,
                    e.ci_width,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        if cards.len() < 2 {
            // A single layer has nothing to be ranked against.
            return Ok(cards);
        }
        fsel_score(cards, &FselWeights::default())
    }

    /// Top-k fusion, thresholds from authentic validation scores, and the
    /// metric report on the validation split.
    pub fn detect(
        &self,
        scores: &BTreeMap<String, BTreeMap<String, f64>>,
        cards: &[LayerScorecard],
        k: usize,
        weighting: Weighting,
        cfg_print: ConfigFingerprint,
    ) -> Result<(DetectionReport, MetricReport)> {
        let rel = reliability(cards);
        let ranking: Vec<LayerRanking> = cards
            .iter()
            .map(|c| LayerRanking {
                layer_id: c.layer_id.clone(),
                key: match self.cfg.ranking {
                    RankingSource::Auroc => c.auroc_val,
                    RankingSource::Fsel => c.fsel,
                },
                w1_pool: c.w1_pool,
                reliability: match weighting {
                    Weighting::Fsel => c.fsel,
                    Weighting::Reliability => rel[&c.layer_id],
                    Weighting::Uniform => 0.0,
                },
            })
            .collect();
        let ids: Vec<&str> = self
            .manifest
            .rows
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        let columns: BTreeMap<String, Vec<f64>> = scores
            .iter()
            .map(|(l, per)| (l.clone(), ids.iter().map(|i| per[*i]).collect()))
            .collect();
        let fused = fuse_topk(
            &columns,
            &ranking,
            k,
            weighting.fusion(),
            self.cfg.temperature,
        )?;

        let (vs, vl): (Vec<f64>, Vec<bool>) = self
            .manifest
            .rows
            .iter()
            .zip(&fused.scores)
            .filter(|(r, _)| r.split == Some(Split::Val))
            .map(|(r, s)| (*s, r.label.is_forged()))
            .unzip();
        let thresholds = calibrate_thresholds(&vs, &vl).map_err(|e| e.in_stage("calibrate"))?;
        let images: Vec<ImageScore> = self
            .manifest
            .rows
            .iter()
            .zip(&fused.scores)
            .map(|(r, s)| ImageScore {
                image_id: r.image_id.clone(),
                label: r.label.to_string(),
                split: r.split.map(|s| s.to_string()).unwrap_or_default(),
                fused_score: *s,
                layer_scores: scores
                    .iter()
                    .map(|(l, per)| (l.clone(), per[&r.image_id]))
                    .collect(),
            })
            .collect();

        let metrics = eval::evaluate(&vs, &vl, self.cfg.b, self.cfg.n_perm, self.cfg.seed)?;
        Ok((
            DetectionReport {
                config: cfg_print,
                selected_layers: fused.selected,
                weights: fused.weights,
                thresholds,
                input_hashes: self.input_hashes(),
                images,
            },
            metrics,
        ))
    }
}

/// How far a command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Spectra,
    Features,
    Reference,
    Score,
    Fsel,
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Spectra => "spectra",
            Stage::Features => "features",
            Stage::Reference => "reference",
            Stage::Score => "score",
            Stage::Fsel => "fsel",
            Stage::Evaluate => "evaluate",
        }
    }
}

fn write_layer_scores(path: &Path, scores: &LayerScores) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["image_id", "layer_id", "spectrum", "score"])?;
        for (kind, per_layer) in scores {
            for (layer, per_image) in per_layer {
                for (image, s) in per_image {
                    w.write_record([
                        image.as_str(),
                        layer.as_str(),
                        kind.as_str(),
                        &s.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
    }
    io::write_atomic(path, &buf)
}

fn write_image_scores(path: &Path, report: &DetectionReport) -> Result<()> {
    let t1 = report.thresholds[&FPR_TARGETS[0].to_string()];
    let t5 = report.thresholds[&FPR_TARGETS[1].to_string()];
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "image_id",
            "label",
            "split",
            "fused_score",
            "decision_at_1pct",
            "decision_at_5pct",
        ])?;
        for im in &report.images {
            let flag = |t: f64| if im.fused_score >= t { "1" } else { "0" };
            w.write_record([
                im.image_id.as_str(),
                im.label.as_str(),
                im.split.as_str(),
                &im.fused_score.to_string(),
                flag(t1),
                flag(t5),
            ])?;
        }
        w.flush()?;
    }
    io::write_atomic(path, &buf)
}

fn write_points(path: &Path, header: [&str; 2], points: &[(f64, f64)]) -> Result<()> {
    let mut text = format!("{},{}\n", header[0], header[1]);
    for (a, b) in points {
        text.push_str(&format!("{a},{b}\n"));
    }
    io::write_atomic(path, text.as_bytes())
}

fn val_scores(report: &DetectionReport) -> (Vec<f64>, Vec<bool>) {
    report
        .images
        .iter()
        .filter(|i| i.split == "val")
        .map(|i| (i.fused_score, i.label == "forged"))
        .unzip()
}

/// Runs every stage up to `until` and writes its artifacts.
pub fn run_stages(cfg: RunConfig, until: Stage) -> Result<BTreeMap<SpectrumKind, KindOutcome>> {
    let mut s = Session::open(cfg)?;
    let records = s.compute_records(None).map_err(|e| e.in_stage("spectra"))?;
    if until == Stage::Spectra || s.manifest.is_empty() {
        return Ok(BTreeMap::new());
    }
    let bundle = s.cfg.bundle;
    let bank = s.sketches(&records).map_err(|e| e.in_stage("features"))?;
    let features = s
        .features(&records, &bank, bundle)
        .map_err(|e| e.in_stage("features"))?;
    io::write_feature_table(&s.out("features.csv"), &features)?;
    if until == Stage::Features {
        return Ok(BTreeMap::new());
    }
    let model = s
        .reference(bank, &features, bundle)
        .map_err(|e| e.in_stage("reference"))?;
    model.save(&s.out("reference.json"))?;
    if until == Stage::Reference {
        return Ok(BTreeMap::new());
    }
    s.manifest
        .validate_for_evaluation()
        .map_err(|e| e.in_stage("score"))?;
    let scores = s
        .layer_scores(&features, &model, bundle, s.cfg.z_mode)
        .map_err(|e| e.in_stage("score"))?;
    write_layer_scores(&s.out("layer_scores.csv"), &scores)?;

    let mut out = BTreeMap::new();
    for kind in s.cfg.spectrum_kinds.clone() {
        let evidence = s
            .layer_evidence(&records, kind, None)
            .map_err(|e| e.in_stage("fsel"))?;
        let cards = s
            .scorecards(&evidence, &scores[&kind])
            .map_err(|e| e.in_stage("fsel"))?;
        fsel::write_scorecards(&s.out(&format!("scorecard_{kind}.csv")), &cards)?;
        let (report, metrics) = s
            .detect(
                &scores[&kind],
                &cards,
                s.cfg.k,
                s.cfg.weighting,
                s.cfg.fingerprint(kind),
            )
            .map_err(|e| e.in_stage("score"))?;
        write_image_scores(&s.out(&format!("scores_{kind}.csv")), &report)?;
        write_json(&s.out(&format!("detection_{kind}.json")), &report)?;
        if until >= Stage::Evaluate {
            let (vs, vl) = val_scores(&report);
            write_json(&s.out(&format!("metrics_{kind}.json")), &metrics)?;
            write_points(
                &s.out(&format!("roc_{kind}.csv")),
                ["fpr", "tpr"],
                &eval::roc_curve(&vs, &vl)?,
            )?;
            write_points(
                &s.out(&format!("pr_{kind}.csv")),
                ["recall", "precision"],
                &eval::pr_curve(&vs, &vl)?,
            )?;
        }
        out.insert(
            kind,
            KindOutcome {
                scorecards: cards,
                report,
                metrics,
            },
        );
    }
    Ok(out)
}

/// Full five-stage run with all reports.
pub fn cmd_full_run(cfg: RunConfig) -> Result<BTreeMap<SpectrumKind, KindOutcome>> {
    run_stages(cfg, Stage::Evaluate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub spectrum: SpectrumKind,
    pub bundle: Bundle,
    pub z_mode: ZMode,
    pub k: usize,
    pub weighting: Weighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
}

fn grid_values<T: FromStr<Err = Error>>(
    grid: &BTreeMap<String, Vec<String>>,
    key: &str,
    default: T,
) -> Result<Vec<T>> {
    match grid.get(key) {
        Some(vals) => vals.iter().map(|v| v.parse()).collect(),
        None => Ok(vec![default]),
    }
}

/// Cells of an ablation grid in lexicographic order of
/// (spectrum, bundle, z_mode, k, weighting) as listed.
pub fn ablation_cells(
    cfg: &RunConfig,
    grid: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<AblationCell>> {
    let spectra: Vec<SpectrumKind> = match grid.get("spectrum") {
        Some(v) => {
            let mut out = Vec::new();
            for s in v {
                for k in parse_spectrum_kinds(s)? {
                    if !out.contains(&k) {
                        out.push(k);
                    }
                }
            }
            out
        }
        None => cfg.spectrum_kinds.clone(),
    };
    let bundles = grid_values(grid, "bundle", cfg.bundle)?;
    let z_modes = grid_values(grid, "z_mode", cfg.z_mode)?;
    let ks: Vec<usize> = match grid.get("k") {
        Some(v) => v.iter().map(|s| parse_num("k", s)).collect::<Result<_>>()?,
        None => vec![cfg.k],
    };
    let weightings = grid_values(grid, "weighting", cfg.weighting)?;
    let mut cells = Vec::new();
    for &spectrum in &spectra {
        for &bundle in &bundles {
            for &z_mode in &z_modes {
                for &k in &ks {
                    for &weighting in &weightings {
                        cells.push(AblationCell {
                            spectrum,
                            bundle,
                            z_mode,
                            k,
                            weighting,
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Evaluates every grid cell; failing cells are recorded and skipped.
pub fn cmd_ablation_grid(
    mut cfg: RunConfig,
    grid: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<AblationRow>> {
    let cells = ablation_cells(&cfg, grid)?;
    if cells.is_empty() {
        return Err(Error::param("empty ablation grid"));
    }
    let mut kinds: Vec<SpectrumKind> = cells.iter().map(|c| c.spectrum).collect();
    kinds.sort();
    kinds.dedup();
    cfg.spectrum_kinds = kinds.clone();
    cfg.continue_on_error = true;
    // Cells with k above the layer count fail individually.
    cfg.k = cells.iter().map(|c| c.k).min().unwrap_or(1);
    let mut s = Session::open(cfg)?;
    let records = s.compute_records(None).map_err(|e| e.in_stage("spectra"))?;
    s.manifest.validate_for_evaluation()?;
    // Features of the largest bundle cover every smaller one.
    let widest = cells.iter().map(|c| c.bundle).max().expect("nonempty grid");
    let bank = s.sketches(&records)?;
    let features = s.features(&records, &bank, widest)?;
    let model = s.reference(bank, &features, widest)?;
    let mut evidence = BTreeMap::new();
    for &kind in &kinds {
        evidence.insert(
            kind,
            s.layer_evidence(&records, kind, None)
                .map_err(|e| e.in_stage("fsel"))?,
        );
    }

    let mut score_cache: BTreeMap<(Bundle, ZMode), LayerScores> = BTreeMap::new();
    let mut rows = Vec::new();
    for cell in cells {
        let result = (|| -> Result<MetricReport> {
            if let std::collections::btree_map::Entry::Vacant(e) = score_cache.entry((cell.bundle, cell.z_mode)) {
                let sc = s.layer_scores(&features, &model, cell.bundle, cell.z_mode)?;
                e.insert(sc);
            }
            let scores = &score_cache[&(cell.bundle, cell.z_mode)][&cell.spectrum];
            let cards = s.scorecards(&evidence[&cell.spectrum], scores)?;
            let print = ConfigFingerprint {
                spectrum: cell.spectrum.to_string(),
                bundle: cell.bundle,
                k: cell.k,
                fusion: cell.weighting.fusion(),
                ranking: s.cfg.ranking,
                weighting: cell.weighting.to_string(),
                z_mode: cell.z_mode,
                temperature: s.cfg.temperature,
            };
            let (_, metrics) = s.detect(scores, &cards, cell.k, cell.weighting, print)?;
            Ok(metrics)
        })();
        match result {
            Ok(m) => rows.push(AblationRow {
                cell,
                metrics: Some(m),
                error: None,
            }),
            Err(e) => {
                log::warn!("ablation cell {cell:?} failed: {e}");
                rows.push(AblationRow {
                    cell,
                    metrics: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    write_ablation(&s.out("ablation.csv"), &rows)?;
    if let Some(best) = best_cell(&rows) {
        write_json(&s.out("ablation_best.json"), best)?;
    }
    Ok(rows)
}

/// Highest AUROC; ties go to the earliest cell in grid order.
pub fn best_cell(rows: &[AblationRow]) -> Option<&AblationRow> {
    let mut best: Option<&AblationRow> = None;
    for r in rows {
        if let Some(m) = &r.metrics {
            if best
                .and_then(|b| b.metrics.as_ref())
                .is_none_or(|bm| m.auroc > bm.auroc)
            {
                best = Some(r);
            }
        }
    }
    best
}

fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "spectrum",
            "bundle",
            "z_mode",
            "k",
            "weighting",
            "auroc",
            "ci_lo",
            "ci_hi",
            "auprc",
            "tpr_at_1pct",
            "tpr_at_5pct",
            "mcc",
            "error",
        ])?;
        for r in rows {
            let c = &r.cell;
            let mut rec = vec![
                c.spectrum.to_string(),
                c.bundle.to_string(),
                c.z_mode.to_string(),
                c.k.to_string(),
                c.weighting.to_string(),
            ];
            match &r.metrics {
                Some(m) => rec.extend([
                    m.auroc.to_string(),
                    m.auroc_ci.0.to_string(),
                    m.auroc_ci.1.to_string(),
                    m.auprc.to_string(),
                    m.tpr_at_1pct.to_string(),
                    m.tpr_at_5pct.to_string(),
                    m.mcc.to_string(),
                    String::new(),
                ]),
                None => {
                    rec.extend(std::iter::repeat_n("NA".to_string(), 7));
                    rec.push(r.error.clone().unwrap_or_default());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    io::write_atomic(path, &buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsificationRow {
    pub spectrum: SpectrumKind,
    pub control: String,
    pub auroc: Option<f64>,
    pub detail: String,
}

/// Null controls on a run: label shuffling of the final scores, and the
/// whole detector rerun on block-scrambled and weight-shuffled matrices.
pub fn cmd_falsify(cfg: RunConfig) -> Result<Vec<FalsificationRow>> {
    let shuffles = cfg.shuffles.max(1);
    let mut s = Session::open(cfg)?;
    s.manifest.validate_for_evaluation()?;
    let records = s.compute_records(None).map_err(|e| e.in_stage("spectra"))?;
    let mut rows = Vec::new();

    let run = |s: &mut Session,
               records: &Records,
               perturb: Perturb<'_>|
     -> Result<BTreeMap<SpectrumKind, f64>> {
        let bank = s.sketches(records)?;
        let features = s.features(records, &bank, s.cfg.bundle)?;
        let model = s.reference(bank, &features, s.cfg.bundle)?;
        let scores = s.layer_scores(&features, &model, s.cfg.bundle, s.cfg.z_mode)?;
        let mut out = BTreeMap::new();
        for kind in s.cfg.spectrum_kinds.clone() {
            let ev = s.layer_evidence(records, kind, perturb)?;
            let cards = s.scorecards(&ev, &scores[&kind])?;
            let (_, m) = s.detect(
                &scores[&kind],
                &cards,
                s.cfg.k,
                s.cfg.weighting,
                s.cfg.fingerprint(kind),
            )?;
            out.insert(kind, m.auroc);
        }
        Ok(out)
    };

    // Baseline and label shuffling of its validation scores.
    let bank = s.sketches(&records)?;
    let features = s.features(&records, &bank, s.cfg.bundle)?;
    let model = s.reference(bank, &features, s.cfg.bundle)?;
    let scores = s.layer_scores(&features, &model, s.cfg.bundle, s.cfg.z_mode)?;
    for kind in s.cfg.spectrum_kinds.clone() {
        let ev = s.layer_evidence(&records, kind, None)?;
        let cards = s.scorecards(&ev, &scores[&kind])?;
        let (report, m) = s.detect(
            &scores[&kind],
            &cards,
            s.cfg.k,
            s.cfg.weighting,
            s.cfg.fingerprint(kind),
        )?;
        rows.push(FalsificationRow {
            spectrum: kind,
            control: "baseline".into(),
            auroc: Some(m.auroc),
            detail: String::new(),
        });
        let (vs, vl) = val_scores(&report);
        let aurocs: Vec<f64> = (0..shuffles as u64)
            .map(|i| auroc(&vs, &score_shuffle(&vl, s.cfg.seed.wrapping_add(i))))
            .collect::<Result<_>>()?;
        rows.push(FalsificationRow {
            spectrum: kind,
            control: "score_shuffle".into(),
            auroc: Some(aurocs.iter().sum::<f64>() / aurocs.len() as f64),
            detail: format!("mean over {shuffles} shuffles"),
        });
    }

    let seed = s.cfg.seed;
    let scramble = move |image: &str, layer: &str, a: &DMatrix<f64>| {
        block_scramble(a, 8, layer_seed(seed, &format!("{image}\t{layer}")))
    };
    let shuffle = move |image: &str, layer: &str, a: &DMatrix<f64>| {
        weight_shuffle(a, layer_seed(seed, &format!("{image}\t{layer}")))
    };
    let controls: [(
        &str,
        &(dyn Fn(&str, &str, &DMatrix<f64>) -> Result<DMatrix<f64>> + Sync),
    ); 2] = [("block_scramble", &scramble), ("weight_shuffle", &shuffle)];
    for (name, f) in controls {
        // Check the structural guarantee on every matrix before rerunning.
        let mut violations = 0usize;
        for (image, layer) in records.keys() {
            let a = s.matrix(image, layer, None)?;
            let b = match f(image, layer, &a) {
                Ok(b) => b,
                Err(_) => {
                    violations = usize::MAX;
                    break;
                }
            };
            let ok = if name == "block_scramble" {
                let sorted = |m: &DMatrix<f64>| {
                    let mut v: Vec<f64> = m.iter().copied().collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                sorted(&a) == sorted(&b)
            } else {
                multiset_frobenius(&a) == multiset_frobenius(&b)
            };
            violations += usize::from(!ok);
        }
        let outcome = if violations == usize::MAX {
            Err(Error::param("matrix size not compatible with this control"))
        } else {
            s.compute_records(Some(f))
                .and_then(|r| run(&mut s, &r, Some(f)))
        };
        match outcome {
            Ok(per_kind) => {
                for (kind, a) in per_kind {
                    rows.push(FalsificationRow {
                        spectrum: kind,
                        control: name.into(),
                        auroc: Some(a),
                        detail: format!("{violations} invariant violations"),
                    });
                }
            }
            Err(e) => {
                for &kind in &s.cfg.spectrum_kinds {
                    rows.push(FalsificationRow {
                        spectrum: kind,
                        control: name.into(),
                        auroc: None,
                        detail: e.to_string(),
                    });
                }
            }
        }
    }

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["spectrum", "control", "auroc", "detail"])?;
        for r in &rows {
            w.write_record([
                r.spectrum.to_string(),
                r.control.clone(),
                r.auroc.map_or_else(|| "NA".into(), |a| a.to_string()),
                r.detail.clone(),
            ])?;
        }
        w.flush()?;
    }
    io::write_atomic(&s.out("falsification.csv"), &buf)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub spectrum: SpectrumKind,
    pub repeats: usize,
    pub mean_spearman: f64,
    /// Mean AUROC per severity, in grid order.
    pub mean_auroc: Vec<(f64, f64)>,
}

/// Severity sweep over `repeats` seeds starting at `seed`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    cfg.validate()?;
    if cfg.repeats == 0 {
        return Err(Error::param("repeats must be at least 1"));
    }
    let sweep = SweepConfig {
        h: cfg.grid,
        w: cfg.grid,
        n_scenes: cfg.scenes,
        val_fraction: cfg.val_fraction,
        severities: cfg.severities.clone(),
        kinds: cfg.spectrum_kinds.clone(),
        bundle: cfg.bundle,
        z_mode: cfg.z_mode,
        ..SweepConfig::default()
    };
    let mut rows = Vec::new();
    for r in 0..cfg.repeats as u64 {
        rows.extend(severity_sweep(&sweep, cfg.seed.wrapping_add(r))?);
    }
    let rho = sweep_spearman(&rows);
    let mut summaries = Vec::new();
    std::fs::create_dir_all(&cfg.out)?;
    for &kind in &cfg.spectrum_kinds {
        let mut text = String::from("severity,seed,auroc,mean_shift,w1_bound_margin\n");
        for r in rows.iter().filter(|r| r.kind == kind) {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.severity, r.seed, r.auroc, r.mean_shift, r.w1_bound_margin
            ));
        }
        io::write_atomic(&cfg.out.join(format!("sweep_{kind}.csv")), text.as_bytes())?;
        let per_seed: Vec<f64> = rho
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, v)| *v)
            .collect();
        let mean_auroc = cfg
            .severities
            .iter()
            .map(|&sev| {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.kind == kind && r.severity == sev)
                    .map(|r| r.auroc)
                    .collect();
                (sev, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        summaries.push(SweepSummary {
            spectrum: kind,
            repeats: cfg.repeats,
            mean_spearman: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            mean_auroc,
        });
    }
    write_json(&cfg.out.join("sweep_summary.json"), &summaries)?;
    Ok((rows, summaries))
}

/// Writes a synthetic dataset as GSF1 files plus a split manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    use crate::synth::{default_layers, generate_dataset, DatasetConfig};
    let ds = DatasetConfig {
        n_per_class: cfg.scenes,
        h: cfg.grid,
        w: cfg.grid,
        severity: cfg.severity,
        layers: default_layers(cfg.grid, cfg.grid),
        ..DatasetConfig::default()
    };
    let images = generate_dataset(&ds, cfg.seed)?;
    let root = cfg.out.join("images");
    let mut rows = Vec::new();
    for im in &images {
        let dir = root.join(&im.image_id);
        for (layer, m) in &im.layers {
            io::write_gsf1(&dir.join(format!("{}__{layer}.gsf", im.image_id)), m)?;
        }
        rows.push(crate::reference::ManifestRow {
            image_id: im.image_id.clone(),
            label: im.label,
            split: None,
            path: PathBuf::from("images").join(&im.image_id),
        });
    }
    let manifest = split_manifest(rows, cfg.val_fraction, cfg.seed)?;
    let path = cfg.out.join("manifest.csv");
    manifest.write_csv(&path)?;
    Ok(path)
}

/// Runs `f` on a dedicated pool of `jobs` worker threads.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Err(Error::param("jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Human-readable one-line summary of a metric report.
pub fn summarize(kind: SpectrumKind, m: &MetricReport) -> String {
    format!(
        "{kind}: AUROC {:.3} [{:.3}, {:.3}]  AUPRC {:.3}  TPR@1% {:.3}  TPR@5% {:.3}  MCC {:.3}  p {}",
        m.auroc, m.auroc_ci.0, m.auroc_ci.1, m.auprc, m.tpr_at_1pct, m.tpr_at_5pct, m.mcc, m.permutation_p_display
    )
}
