//! CSV datasets with a JSON sidecar manifest, and raw signal files.
//!
//! `<name>.csv` has a header `f0,f1,...`, then optional `label`
//! (`healthy|anomalous`) and `mode` columns. `<name>.manifest.json` records
//! the domain, feature kind, shape and generating seed.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, FeatureKind, Label};
use crate::{AdauError, Result};

pub const LABEL_COLUMN: &str = "label";
pub const MODE_COLUMN: &str = "mode";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    pub feature_kind: FeatureKind,
    pub n_samples: usize,
    pub n_features: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub label_column: Option<String>,
}

/// `dir/name.csv` -> `dir/name.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_dataset(path: &Path, dataset: &Dataset, seed: Option<u64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let d = dataset.n_features();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    if dataset.labels().is_some() {
        header.push(LABEL_COLUMN.into());
    }
    if dataset.modes().is_some() {
        header.push(MODE_COLUMN.into());
    }
    w.write_record(&header)?;
    let x = dataset.samples();
    for i in 0..dataset.n_samples() {
        // `{}` on f64 prints the shortest string that round-trips
        let mut rec: Vec<String> = (0..d).map(|j| format!("{}", x[(i, j)])).collect();
        if let Some(l) = dataset.labels() {
            rec.push(l[i].as_str().into());
        }
        if let Some(m) = dataset.modes() {
            rec.push(m[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let manifest = Manifest {
        domain: dataset.domain(),
        feature_kind: dataset.feature_kind(),
        n_samples: dataset.n_samples(),
        n_features: d,
        seed,
        label_column: dataset.labels().map(|_| LABEL_COLUMN.to_string()),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let label_name = manifest.label_column.as_deref().unwrap_or(LABEL_COLUMN);
    let label_col = headers.iter().position(|h| h == label_name);
    let mode_col = headers.iter().position(|h| h == MODE_COLUMN);
    let feature_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('f') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if feature_cols.len() != manifest.n_features {
        return Err(AdauError::DimensionMismatch {
            expected: manifest.n_features,
            actual: feature_cols.len(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut modes = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for &c in &feature_cols {
            let v: f64 = rec[c].trim().parse().map_err(|_| {
                AdauError::invalid(format!("row {}: cannot parse '{}'", line + 1, &rec[c]))
            })?;
            values.push(v);
        }
        if let Some(c) = label_col {
            labels.push(Label::parse(&rec[c]).ok_or_else(|| {
                AdauError::invalid(format!("row {}: unknown label '{}'", line + 1, &rec[c]))
            })?);
        }
        if let Some(c) = mode_col {
            modes.push(rec[c].trim().parse::<usize>().map_err(|_| {
                AdauError::invalid(format!("row {}: bad mode '{}'", line + 1, &rec[c]))
            })?);
        }
    }
    let n = values.len() / manifest.n_features;
    if n != manifest.n_samples {
        return Err(AdauError::DimensionMismatch {
            expected: manifest.n_samples,
            actual: n,
        });
    }
    let x = DMatrix::from_row_slice(n, manifest.n_features, &values);
    let ds = Dataset::new(
        x,
        manifest.domain,
        label_col.map(|_| labels),
        manifest.feature_kind,
    )?;
    if mode_col.is_some() {
        ds.with_modes(modes)
    } else {
        Ok(ds)
    }
}

/// Reads real values separated by whitespace, commas or newlines. A
/// non-numeric first line is treated as a header and skipped.
pub fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = line
            .split(|c: char| c.is_whitespace() || c == ',' || c == ';')
            .filter(|t| !t.is_empty());
        for tok in tokens {
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                Ok(_) => return Err(AdauError::invalid(format!("line {}: non-finite value", i + 1))),
                Err(_) if i == 0 && out.is_empty() => break,
                Err(_) => {
                    return Err(AdauError::invalid(format!("line {}: cannot parse '{tok}'", i + 1)))
                }
            }
        }
    }
    if out.is_empty() {
        return Err(AdauError::invalid("signal file holds no values"));
    }
    Ok(out)
}
