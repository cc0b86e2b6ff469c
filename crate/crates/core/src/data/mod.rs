//! Datasets, vibration-signal preprocessing and synthetic domain-shift data.

mod io;
mod signal;
mod synthetic;

use nalgebra::{DMatrix, RowDVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{AdauError, Result};

pub use io::{manifest_path, read_dataset, read_signal, write_dataset, Manifest};
pub use signal::{compute_stride, downsample, fft_features, preprocess_signal, window, WindowSpec};
pub use synthetic::{synth_generate, AffineShift, SyntheticData, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "healthy" => Some(Label::Healthy),
            "anomalous" => Some(Label::Anomalous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    RawWindow,
    FftMagnitude,
    ImageVector,
    Synthetic,
}

/// Samples in rows, features in columns, tagged with their domain.
///
/// Labels are carried for evaluation only; training code rejects datasets
/// with anomalous rows. `modes` optionally records the operating mode each
/// row was drawn from (1-based), which the harness uses for per-mode tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: DMatrix<f64>,
    domain: Domain,
    labels: Option<Vec<Label>>,
    modes: Option<Vec<usize>>,
    feature_kind: FeatureKind,
}

impl Dataset {
    pub fn new(
        samples: DMatrix<f64>,
        domain: Domain,
        labels: Option<Vec<Label>>,
        feature_kind: FeatureKind,
    ) -> Result<Self> {
        if samples.ncols() == 0 {
            return Err(AdauError::invalid("dataset needs at least one feature"));
        }
        if let Some(l) = &labels {
            if l.len() != samples.nrows() {
                return Err(AdauError::DimensionMismatch {
                    expected: samples.nrows(),
                    actual: l.len(),
                });
            }
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            // column-major position
            let (r, c) = (pos % samples.nrows(), pos / samples.nrows());
            return Err(AdauError::invalid(format!(
                "non-finite value at row {r}, column {c}"
            )));
        }
        Ok(Dataset {
            samples,
            domain,
            labels,
            modes: None,
            feature_kind,
        })
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(
        rows: &[Vec<f64>],
        domain: Domain,
        labels: Option<Vec<Label>>,
        feature_kind: FeatureKind,
    ) -> Result<Self> {
        let n_features = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_features) {
            return Err(AdauError::DimensionMismatch {
                expected: n_features,
                actual: bad.len(),
            });
        }
        let samples = DMatrix::from_fn(rows.len(), n_features, |i, j| rows[i][j]);
        Dataset::new(samples, domain, labels, feature_kind)
    }

    pub fn with_modes(mut self, modes: Vec<usize>) -> Result<Self> {
        if modes.len() != self.n_samples() {
            return Err(AdauError::DimensionMismatch {
                expected: self.n_samples(),
                actual: modes.len(),
            });
        }
        self.modes = Some(modes);
        Ok(self)
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn modes(&self) -> Option<&[usize]> {
        self.modes.as_deref()
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.feature_kind
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_healthy_only(&self) -> bool {
        self.labels
            .as_ref()
            .is_none_or(|l| l.iter().all(|&x| x == Label::Healthy))
    }

    pub(crate) fn require_healthy(&self, what: &str) -> Result<()> {
        if self.is_healthy_only() {
            Ok(())
        } else {
            Err(AdauError::invalid(format!(
                "{what} must contain healthy samples only"
            )))
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples = self.samples.select_rows(indices);
        Dataset {
            samples,
            domain: self.domain,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            modes: self
                .modes
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
            feature_kind: self.feature_kind,
        }
    }

    /// Stacks `other` below `self`. The result keeps `self`'s domain tag.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.n_features() != self.n_features() {
            return Err(AdauError::DimensionMismatch {
                expected: self.n_features(),
                actual: other.n_features(),
            });
        }
        let n = self.n_samples();
        let samples = DMatrix::from_fn(n + other.n_samples(), self.n_features(), |i, j| {
            if i < n {
                self.samples[(i, j)]
            } else {
                other.samples[(i - n, j)]
            }
        });
        let labels = match (&self.labels, &other.labels) {
            (None, None) => None,
            (a, b) => {
                let fill = |l: &Option<Vec<Label>>, len| {
                    l.clone().unwrap_or_else(|| vec![Label::Healthy; len])
                };
                let mut v = fill(a, n);
                v.extend(fill(b, other.n_samples()));
                Some(v)
            }
        };
        let modes = match (&self.modes, &other.modes) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Dataset {
            samples,
            domain: self.domain,
            labels,
            modes,
            feature_kind: self.feature_kind,
        })
    }

    pub fn with_domain(mut self, domain: Domain) -> Dataset {
        self.domain = domain;
        self
    }

    pub fn map_samples(&self, samples: DMatrix<f64>) -> Result<Dataset> {
        if samples.nrows() != self.n_samples() {
            return Err(AdauError::DimensionMismatch {
                expected: self.n_samples(),
                actual: samples.nrows(),
            });
        }
        let mut out = Dataset::new(samples, self.domain, self.labels.clone(), self.feature_kind)?;
        out.modes = self.modes.clone();
        Ok(out)
    }
}

/// Seeded 80/20 split: the validation part holds a quarter as many rows as
/// the training part.
pub fn split_train_val(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.n_samples();
    if n < 5 {
        return Err(AdauError::invalid(format!(
            "need at least 5 samples for a train/validation split, got {n}"
        )));
    }
    dataset.require_healthy("split pool")?;
    let n_val = (n as f64 / 5.0).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = idx.split_at(n_val);
    Ok((dataset.subset(train_idx), dataset.subset(val_idx)))
}

/// Seeded random subset holding `round(fraction * n)` rows (at least one).
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AdauError::invalid(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = dataset.n_samples();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(dataset.subset(&idx))
}

/// Column-wise z-score fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Standardizer {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let std = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        Standardizer { mean, std }
    }

    /// Centres columns but divides every column by one common scale, the
    /// root mean column variance, so Euclidean geometry is kept up to a factor.
    pub fn fit_isotropic(x: &DMatrix<f64>) -> Standardizer {
        let per_column = Standardizer::fit(x);
        let n = x.nrows().max(1) as f64;
        let d = x.ncols().max(1) as f64;
        let total: f64 = x
            .column_iter()
            .zip(&per_column.mean)
            .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
            .sum();
        let s = (total / d).sqrt();
        let s = if s > 1e-12 { s } else { 1.0 };
        Standardizer { std: vec![s; x.ncols()], mean: per_column.mean }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(AdauError::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.ncols(),
            });
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.std[j]
        }))
    }

    pub fn transform_dataset(&self, d: &Dataset) -> Result<Dataset> {
        d.map_samples(self.transform(d.samples())?)
    }
}

/// Row `i` of a matrix as an owned vector.
pub fn row_vec(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Stacks row vectors into a matrix.
pub fn stack_rows(rows: &[RowDVector<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}
