//! Synthetic multi-mode condition-monitoring data with a controllable
//! source-to-target domain shift.
//!
//! The source unit operates in `n_modes` healthy modes whose centres sit on a
//! seeded integer grid (scaled by `mode_separation`) in the leading
//! `mode_dims` coordinates. Within a mode, samples vary along a random
//! `latent_dims`-dimensional subspace specific to that mode (correlated
//! sensors), plus an isotropic `noise_floor`. The trailing `nuisance_dims`
//! coordinates carry only that noise floor. The target unit sees the same
//! modes pushed through an affine map plus noise; only some of its modes are available for
//! training. Anomalies are healthy target samples displaced by
//! `anomaly_offset` along a random unit direction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, FeatureKind, Label};
use crate::{AdauError, Result};

/// `x_target = R * (scale ⊙ x) + translation + N(0, noise_std²)`.
///
/// `rotations[k]` is a Givens angle (radians) in the plane of coordinates
/// `(2k, 2k + 1)`. Empty `scale`/`translation` mean ones/zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AffineShift {
    #[serde(default)]
    pub scale: Vec<f64>,
    #[serde(default)]
    pub rotations: Vec<f64>,
    #[serde(default)]
    pub translation: Vec<f64>,
    #[serde(default)]
    pub noise_std: f64,
}

impl AffineShift {
    pub fn identity() -> Self {
        AffineShift::default()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !self.scale.is_empty() && self.scale.len() != dim {
            return Err(AdauError::DimensionMismatch { expected: dim, actual: self.scale.len() });
        }
        if !self.translation.is_empty() && self.translation.len() != dim {
            return Err(AdauError::DimensionMismatch {
                expected: dim,
                actual: self.translation.len(),
            });
        }
        if self.rotations.len() > dim / 2 {
            return Err(AdauError::invalid(format!(
                "{} rotation planes requested but dimension {dim} only has {}",
                self.rotations.len(),
                dim / 2
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(AdauError::invalid("noise std must be finite and >= 0"));
        }
        Ok(())
    }

    /// The deterministic part of the map (no noise).
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        for (i, s) in self.scale.iter().enumerate() {
            y[i] *= s;
        }
        for (k, &theta) in self.rotations.iter().enumerate() {
            let (a, b) = (y[2 * k], y[2 * k + 1]);
            let (s, c) = theta.sin_cos();
            y[2 * k] = c * a - s * b;
            y[2 * k + 1] = s * a + c * b;
        }
        for (i, t) in self.translation.iter().enumerate() {
            y[i] += t;
        }
        y
    }
}

fn default_test_samples() -> usize {
    100
}

fn default_mode_std() -> f64 {
    1.0
}

fn default_latent_dims() -> usize {
    usize::MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_modes: usize,
    /// 1-based mode indices whose healthy target data are available for training.
    pub modes_in_target_training: Vec<usize>,
    pub dim: usize,
    /// Leading coordinates carrying the mode centres; the rest are centred at 0.
    pub mode_dims: usize,
    pub mode_separation: f64,
    #[serde(default = "default_mode_std")]
    pub mode_std: f64,
    /// Rank of the within-mode variation; values >= `dim` mean full rank.
    #[serde(default = "default_latent_dims")]
    pub latent_dims: usize,
    #[serde(default)]
    pub noise_floor: f64,
    /// Trailing coordinates that carry no healthy variation beyond the noise floor.
    #[serde(default)]
    pub nuisance_dims: usize,
    pub shift: AffineShift,
    pub anomaly_offset: f64,
    pub samples_per_mode: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples_per_mode: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 || self.dim == 0 {
            return Err(AdauError::invalid("n_modes and dim must be >= 1"));
        }
        if self.nuisance_dims >= self.dim {
            return Err(AdauError::invalid("nuisance_dims must be < dim"));
        }
        if self.mode_dims == 0 || self.mode_dims > self.dim - self.nuisance_dims {
            return Err(AdauError::invalid("mode_dims must lie in 1..=dim - nuisance_dims"));
        }
        if self.modes_in_target_training.is_empty()
            || self
                .modes_in_target_training
                .iter()
                .any(|&m| m == 0 || m > self.n_modes)
        {
            return Err(AdauError::invalid(format!(
                "modes_in_target_training must be a non-empty subset of 1..={}",
                self.n_modes
            )));
        }
        if self.samples_per_mode == 0 || self.test_samples_per_mode == 0 {
            return Err(AdauError::invalid("samples per mode must be >= 1"));
        }
        if self.latent_dims == 0 {
            return Err(AdauError::invalid("latent_dims must be >= 1"));
        }
        if !(self.mode_std >= 0.0
            && self.noise_floor >= 0.0
            && self.anomaly_offset >= 0.0
            && self.mode_separation >= 0.0)
        {
            return Err(AdauError::invalid("spreads, separation and offset must be >= 0"));
        }
        // the grid {-2..2}^mode_dims must hold every mode
        if (self.mode_dims as u32) < 8 && 5usize.pow(self.mode_dims as u32) < self.n_modes {
            return Err(AdauError::invalid("too many modes for the centre grid"));
        }
        self.shift.validate(self.dim)
    }

    /// The modes the target never sees during training.
    pub fn unseen_modes(&self) -> Vec<usize> {
        (1..=self.n_modes)
            .filter(|m| !self.modes_in_target_training.contains(m))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test_healthy: Dataset,
    pub target_test_anomalous: Dataset,
    /// Mode centres in source coordinates, one row per mode.
    pub centers: DMatrix<f64>,
}

impl SyntheticData {
    /// Healthy and anomalous target test rows stacked, labelled.
    pub fn target_test(&self) -> Result<Dataset> {
        self.target_test_healthy.concat(&self.target_test_anomalous)
    }
}

fn grid_centers(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut points: Vec<Vec<i32>> = Vec::with_capacity(spec.n_modes);
    while points.len() < spec.n_modes {
        let p: Vec<i32> = (0..spec.mode_dims).map(|_| rng.random_range(-2..=2)).collect();
        if !points.contains(&p) {
            points.push(p);
        }
    }
    DMatrix::from_fn(spec.n_modes, spec.dim, |m, j| {
        if j < spec.mode_dims {
            spec.mode_separation * points[m][j] as f64
        } else {
            0.0
        }
    })
}

/// Orthonormal basis (`dim × latent`) of each mode's variation subspace,
/// zero on the nuisance coordinates.
fn mode_bases(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
    let active = spec.dim - spec.nuisance_dims;
    let k = spec.latent_dims.min(active);
    (0..spec.n_modes)
        .map(|_| {
            let q = if k == active {
                DMatrix::identity(active, active)
            } else {
                let g = DMatrix::from_fn(active, k, |_, _| StandardNormal.sample(rng));
                g.qr().q()
            };
            DMatrix::from_fn(spec.dim, k, |i, j| if i < active { q[(i, j)] } else { 0.0 })
        })
        .collect()
}

struct Modes {
    centers: DMatrix<f64>,
    bases: Vec<DMatrix<f64>>,
}

fn draw_healthy(spec: &SyntheticSpec, modes: &Modes, mode: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let basis = &modes.bases[mode - 1];
    let z: DVector<f64> = DVector::from_fn(basis.ncols(), |_, _| StandardNormal.sample(rng));
    let mut x = basis * z * spec.mode_std;
    for j in 0..spec.dim {
        x[j] += modes.centers[(mode - 1, j)];
        if spec.noise_floor > 0.0 {
            let e: f64 = StandardNormal.sample(rng);
            x[j] += spec.noise_floor * e;
        }
    }
    x
}

fn to_target(spec: &SyntheticSpec, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut y = spec.shift.apply(x);
    if spec.shift.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.shift.noise_std).expect("validated std");
        y.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    y
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn build(rows: Vec<DVector<f64>>, modes: Vec<usize>, domain: Domain, label: Label) -> Result<Dataset> {
    let dim = rows.first().map_or(0, |r| r.len());
    let x = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
    let n = rows.len();
    Dataset::new(x, domain, Some(vec![label; n]), FeatureKind::Synthetic)?.with_modes(modes)
}

/// Generates source, target-training and labelled target-test datasets.
/// Bit-identical for equal specs.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = grid_centers(spec, &mut rng);
    let bases = mode_bases(spec, &mut rng);
    let modes = Modes { centers, bases };

    let mut src = Vec::new();
    let mut src_modes = Vec::new();
    for m in 1..=spec.n_modes {
        for _ in 0..spec.samples_per_mode {
            src.push(draw_healthy(spec, &modes, m, &mut rng));
            src_modes.push(m);
        }
    }

    let mut train_modes: Vec<usize> = spec.modes_in_target_training.clone();
    train_modes.sort_unstable();
    train_modes.dedup();
    let mut tt = Vec::new();
    let mut tt_modes = Vec::new();
    for &m in &train_modes {
        for _ in 0..spec.samples_per_mode {
            let x = draw_healthy(spec, &modes, m, &mut rng);
            tt.push(to_target(spec, &x, &mut rng));
            tt_modes.push(m);
        }
    }

    let (mut healthy, mut anomalous) = (Vec::new(), Vec::new());
    let mut test_modes = Vec::new();
    for m in 1..=spec.n_modes {
        for _ in 0..spec.test_samples_per_mode {
            let x = draw_healthy(spec, &modes, m, &mut rng);
            healthy.push(to_target(spec, &x, &mut rng));
            let x = draw_healthy(spec, &modes, m, &mut rng);
            let dir = random_direction(spec.dim, &mut rng);
            anomalous.push(to_target(spec, &x, &mut rng) + dir * spec.anomaly_offset);
            test_modes.push(m);
        }
    }

    Ok(SyntheticData {
        source: build(src, src_modes, Domain::Source, Label::Healthy)?,
        target_train: build(tt, tt_modes, Domain::Target, Label::Healthy)?,
        target_test_healthy: build(healthy, test_modes.clone(), Domain::Target, Label::Healthy)?,
        target_test_anomalous: build(anomalous, test_modes, Domain::Target, Label::Anomalous)?,
        centers: modes.centers,
    })
}
