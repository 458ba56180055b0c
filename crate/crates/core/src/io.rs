//! File formats: GSF1 and CSV matrices, eigenvalue lists, feature tables.
//!
//! GSF1 layout: the 4 ASCII bytes `GSF1`, a little-endian `u32` size `n`,
//! then `n·n` little-endian `f64` values in row-major order. Nothing else
//! may follow.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::spectral::{Spectrum, SpectrumKind};

pub const GSF1_MAGIC: &[u8; 4] = b"GSF1";
const NA: &str = "NA";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes a GSF1 byte buffer.
pub fn decode_gsf1(bytes: &[u8]) -> std::result::Result<DMatrix<f64>, String> {
    if bytes.len() < 8 || &bytes[..4] != GSF1_MAGIC {
        return Err("bad magic bytes, expected `GSF1`".into());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = n
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(8))
        .ok_or("matrix size overflows")?;
    if bytes.len() != expected {
        return Err(format!(
            "size field says {n}x{n} ({expected} bytes) but the file has {} bytes",
            bytes.len()
        ));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(n, n, &values))
}

pub fn encode_gsf1(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!(
            "GSF1 needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let n32 = u32::try_from(n).map_err(|_| Error::Dimension("matrix too large for GSF1".into()))?;
    let mut out = Vec::with_capacity(8 + 8 * n * n);
    out.extend_from_slice(GSF1_MAGIC);
    out.extend_from_slice(&n32.to_le_bytes());
    for i in 0..n {
        for j in 0..n {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_gsf1(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| format_err(path, format!("cannot read: {e}")))?;
    decode_gsf1(&bytes).map_err(|m| format_err(path, m))
}

/// Writes through a temporary file in the same directory and renames it,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| format_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_gsf1(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_gsf1(m)?)
}

/// Reads a headerless numeric CSV holding a square matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, format!("cannot read: {e}")))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(format_err(path, "empty matrix"));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(format_err(
            path,
            format!("row {} has {} values, expected {n}", i + 1, r.len()),
        ));
    }
    Ok(DMatrix::from_row_iterator(n, n, rows.into_iter().flatten()))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut text = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Reads a GSF1 (`.gsf`) or CSV (`.csv`) matrix; other extensions are
/// sniffed by their first bytes.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("gsf") | Some("gsf1") => read_gsf1(path),
        Some("csv") => read_matrix_csv(path),
        _ => {
            let head = fs::read(path).map_err(|e| format_err(path, format!("cannot read: {e}")))?;
            if head.starts_with(GSF1_MAGIC) {
                decode_gsf1(&head).map_err(|m| format_err(path, m))
            } else {
                read_matrix_csv(path)
            }
        }
    }
}

fn is_matrix_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()),
        Some("gsf") | Some("gsf1") | Some("csv")
    )
}

fn layer_id_of(image_id: &str, path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let prefix = format!("{image_id}__");
    stem.strip_prefix(&prefix)
        .map(str::to_string)
        .unwrap_or(stem)
}

/// Matrix files of one image. `path` is either one matrix file or a
/// directory of them; layer ids are file stems without an `{image_id}__`
/// prefix. Results are sorted by layer id.
pub fn discover_layers(image_id: &str, path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let meta = fs::metadata(path).map_err(|e| format_err(path, format!("cannot access: {e}")))?;
    let mut out = Vec::new();
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() && is_matrix_file(&p) {
                out.push((layer_id_of(image_id, &p), p));
            }
        }
        if out.is_empty() {
            return Err(format_err(path, "directory contains no matrix files"));
        }
    } else {
        out.push((layer_id_of(image_id, path), path.to_path_buf()));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(format_err(
            path,
            format!("layer `{}` appears twice", w[0].0),
        ));
    }
    Ok(out)
}

/// Eigenvalue list with header `lambda`, one value per line.
pub fn write_spectrum_csv(path: &Path, s: &Spectrum) -> Result<()> {
    let mut text = String::from("lambda\n");
    for v in s.eigenvalues() {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_spectrum_csv(path: &Path, kind: SpectrumKind) -> Result<Spectrum> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, format!("cannot read: {e}")))?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["lambda"] {
        return Err(format_err(path, "expected header `lambda`"));
    }
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        values.push(
            rec[0]
                .parse::<f64>()
                .map_err(|e| format_err(path, format!("bad eigenvalue `{}`: {e}", &rec[0])))?,
        );
    }
    Spectrum::new(kind, values).map_err(|e| format_err(path, e.to_string()))
}

/// Long-format table `image_id,layer_id,spectrum,feature,value`; undefined
/// values are written as `NA`.
pub fn write_feature_table(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["image_id", "layer_id", "spectrum", "feature", "value"])?;
        for fv in features {
            for (name, v) in &fv.values {
                w.write_record([
                    fv.image_id.as_str(),
                    fv.layer_id.as_str(),
                    fv.spectrum_kind.as_str(),
                    name.as_str(),
                    &v.map_or_else(|| NA.to_string(), |x| x.to_string()),
                ])?;
            }
        }
        w.flush()?;
    }
    write_atomic(path, &buf)
}

/// Reads a feature table back into vectors ordered by (image, layer, kind).
pub fn read_feature_table(path: &Path) -> Result<Vec<FeatureVector>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| format_err(path, format!("cannot read: {e}")))?;
    if rdr.headers()?.iter().collect::<Vec<_>>()
        != ["image_id", "layer_id", "spectrum", "feature", "value"]
    {
        return Err(format_err(
            path,
            "expected header `image_id,layer_id,spectrum,feature,value`",
        ));
    }
    let mut grouped: BTreeMap<(String, String, SpectrumKind), BTreeMap<String, Option<f64>>> =
        BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let kind: SpectrumKind = rec[2]
            .parse()
            .map_err(|e: Error| format_err(path, e.to_string()))?;
        let value = if &rec[4] == NA {
            None
        } else {
            Some(
                rec[4]
                    .parse::<f64>()
                    .map_err(|e| format_err(path, format!("bad value `{}`: {e}", &rec[4])))?,
            )
        };
        grouped
            .entry((rec[0].to_string(), rec[1].to_string(), kind))
            .or_default()
            .insert(rec[3].to_string(), value);
    }
    Ok(grouped
        .into_iter()
        .map(
            |((image_id, layer_id, spectrum_kind), values)| FeatureVector {
                image_id,
                layer_id,
                spectrum_kind,
                values,
            },
        )
        .collect())
}
