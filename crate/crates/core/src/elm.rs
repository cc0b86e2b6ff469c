//! Extreme learning machines: random sigmoid hidden layers whose output
//! weights are solved by ridge regression, the autoencoder + one-class stack
//! (HELM), its percentile detection threshold, and elbow-based sizing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Standardizer};
use crate::{AdauError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;
/// Detection threshold is this factor times the validation percentile.
pub const THRESHOLD_FACTOR: f64 = 1.2;
pub const THRESHOLD_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

/// One random hidden layer. Input weights and bias are fixed at
/// initialisation; only `output_weights` is ever solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElmLayer {
    #[serde(with = "crate::serde_mat")]
    input_weights: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    bias: DVector<f64>,
    activation: Activation,
    #[serde(with = "crate::serde_mat")]
    output_weights: DMatrix<f64>,
    seed: u64,
}

/// Untrained layer with weights and bias i.i.d. uniform on [-1, 1].
pub fn elm_init(n_in: usize, n_hidden: usize, seed: u64) -> Result<ElmLayer> {
    if n_in == 0 || n_hidden == 0 {
        return Err(AdauError::invalid("ELM layer sizes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_weights = DMatrix::from_fn(n_hidden, n_in, |_, _| rng.random_range(-1.0..=1.0));
    let bias = DVector::from_fn(n_hidden, |_, _| rng.random_range(-1.0..=1.0));
    Ok(ElmLayer {
        input_weights,
        bias,
        activation: Activation::Sigmoid,
        output_weights: DMatrix::zeros(n_hidden, 0),
        seed,
    })
}

impl ElmLayer {
    pub fn n_in(&self) -> usize {
        self.input_weights.ncols()
    }

    pub fn n_hidden(&self) -> usize {
        self.input_weights.nrows()
    }

    pub fn input_weights(&self) -> &DMatrix<f64> {
        &self.input_weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn output_weights(&self) -> &DMatrix<f64> {
        &self.output_weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_in() {
            return Err(AdauError::DimensionMismatch { expected: self.n_in(), actual: x.ncols() });
        }
        Ok(())
    }

    /// `act(X Wᵀ + 1 bᵀ)`, shape `[n × n_hidden]`.
    pub fn hidden(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x * self.input_weights.transpose();
        for mut row in h.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.bias.iter()) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(h)
    }

    /// Solves the output weights mapping `hidden(x)` onto `targets`.
    pub fn fit(&mut self, x: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64) -> Result<()> {
        let h = self.hidden(x)?;
        self.output_weights = ridge_solve(&h, targets, lambda)?;
        Ok(())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.output_weights.ncols() == 0 {
            return Err(AdauError::invalid("ELM layer has not been trained"));
        }
        Ok(self.hidden(x)? * &self.output_weights)
    }
}

/// `argmin_B ‖H B − T‖² + λ‖B‖²` through a Cholesky solve of
/// `(HᵀH + λI) B = HᵀT`.
pub fn ridge_solve(h: &DMatrix<f64>, t: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if h.nrows() == 0 || h.ncols() == 0 {
        return Err(AdauError::invalid("ridge system needs at least one row and column"));
    }
    if t.nrows() != h.nrows() {
        return Err(AdauError::DimensionMismatch { expected: h.nrows(), actual: t.nrows() });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(AdauError::invalid(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    let ht = h.transpose();
    let mut a = &ht * h;
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let rhs = &ht * t;
    let chol = a
        .cholesky()
        .ok_or_else(|| AdauError::Singular(format!("HᵀH + {lambda}·I is not positive definite")))?;
    let b = chol.solve(&rhs);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(AdauError::Singular("ridge solution is not finite".into()));
    }
    Ok(b)
}

/// ELM autoencoder. The learned features are `sigmoid(z(X Bᵀ))` where `B`
/// are the solved output (reconstruction) weights and `z` standardises each
/// projection with its training mean and deviation, keeping healthy data
/// out of the sigmoid's flat tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub layer: ElmLayer,
    /// z-score of the projections `X Bᵀ` on the training data.
    pub projection_scale: Standardizer,
}

impl Autoencoder {
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.layer.check_input(x)?;
        let act = self.layer.activation;
        let proj = self.projection_scale.transform(&(x * self.layer.output_weights.transpose()))?;
        Ok(proj.map(|z| act.apply(z)))
    }

    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.layer.predict(x)
    }

    /// Mean squared reconstruction error per entry.
    pub fn reconstruction_error(&self, x: &DMatrix<f64>) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok((r - x).norm_squared() / (x.nrows() * x.ncols()) as f64)
    }
}

pub fn train_ae(x: &DMatrix<f64>, n_hidden: usize, lambda: f64, seed: u64) -> Result<Autoencoder> {
    if x.nrows() == 0 {
        return Err(AdauError::invalid("autoencoder needs at least one sample"));
    }
    let mut layer = elm_init(x.ncols(), n_hidden, seed)?;
    layer.fit(x, x, lambda)?;
    let projection_scale = Standardizer::fit(&(x * layer.output_weights.transpose()));
    Ok(Autoencoder { layer, projection_scale })
}

/// Random expansion of `features` regressed onto the constant 1.
pub fn train_oneclass(features: &DMatrix<f64>, n_hidden: usize, lambda: f64, seed: u64) -> Result<ElmLayer> {
    if features.nrows() == 0 {
        return Err(AdauError::invalid("one-class ELM needs at least one sample"));
    }
    let mut layer = elm_init(features.ncols(), n_hidden, seed)?;
    layer.fit(features, &DMatrix::from_element(features.nrows(), 1, 1.0), lambda)?;
    Ok(layer)
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(AdauError::invalid("percentile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// `1.2 ×` the 99.5th percentile of healthy validation residuals, floored at
/// a tiny positive value so the threshold is always strictly positive.
pub fn threshold_from_residuals(residuals: &[f64]) -> Result<f64> {
    let p = percentile(residuals, THRESHOLD_PERCENTILE)?;
    Ok((THRESHOLD_FACTOR * p).max(f64::MIN_POSITIVE))
}

/// Flags every score strictly above the threshold.
pub fn flag(residuals: &[f64], threshold: f64) -> Vec<Label> {
    residuals
        .iter()
        .map(|&r| if r > threshold { Label::Anomalous } else { Label::Healthy })
        .collect()
}

/// One-class ELM plus its detection threshold; the last stage of both HELM
/// and the aligned detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneClassDetector {
    /// z-score fitted on the one-class training features.
    pub scaler: Standardizer,
    pub oc_layer: ElmLayer,
    pub threshold: f64,
    pub ridge_lambda: f64,
}

impl OneClassDetector {
    /// Trains on `train` features, sets the threshold from `val` features.
    pub fn fit(train: &DMatrix<f64>, val: &DMatrix<f64>, n_hidden: usize, lambda: f64, seed: u64) -> Result<Self> {
        if val.nrows() == 0 {
            return Err(AdauError::invalid("validation set is empty"));
        }
        let scaler = Standardizer::fit(train);
        let oc_layer = train_oneclass(&scaler.transform(train)?, n_hidden, lambda, seed)?;
        let mut det = OneClassDetector { scaler, oc_layer, threshold: 0.0, ridge_lambda: lambda };
        det.threshold = threshold_from_residuals(&det.residuals(val)?)?;
        Ok(det)
    }

    pub fn scores(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        let z = self.scaler.transform(features)?;
        Ok(self.oc_layer.predict(&z)?.column(0).iter().copied().collect())
    }

    /// `|1 − ŷ(x)|` per row.
    pub fn residuals(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.scores(features)?.into_iter().map(|y| (1.0 - y).abs()).collect())
    }

    pub fn detect(&self, features: &DMatrix<f64>) -> Result<Vec<Label>> {
        Ok(flag(&self.residuals(features)?, self.threshold))
    }
}

/// Autoencoder feeding a one-class ELM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelmModel {
    pub format_version: u32,
    pub autoencoder: Autoencoder,
    pub detector: OneClassDetector,
    pub seed: u64,
}

impl HelmModel {
    pub fn threshold(&self) -> f64 {
        self.detector.threshold
    }

    pub fn n_features(&self) -> usize {
        self.autoencoder.layer.n_in()
    }

    pub fn residuals(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.detector.residuals(&self.autoencoder.features(x)?)
    }
}

pub(crate) fn oneclass_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

pub fn helm_train(
    train: &Dataset,
    val: &Dataset,
    n_ae: usize,
    n_oc: usize,
    lambda: f64,
    seed: u64,
) -> Result<HelmModel> {
    train.require_healthy("HELM training set")?;
    val.require_healthy("HELM validation set")?;
    if val.n_samples() == 0 {
        return Err(AdauError::invalid("validation set is empty"));
    }
    if val.n_features() != train.n_features() {
        return Err(AdauError::DimensionMismatch {
            expected: train.n_features(),
            actual: val.n_features(),
        });
    }
    let autoencoder = train_ae(train.samples(), n_ae, lambda, seed)?;
    let f_train = autoencoder.features(train.samples())?;
    let f_val = autoencoder.features(val.samples())?;
    let detector = OneClassDetector::fit(&f_train, &f_val, n_oc, lambda, oneclass_seed(seed))?;
    Ok(HelmModel { format_version: FORMAT_VERSION, autoencoder, detector, seed })
}

pub fn helm_detect(model: &HelmModel, x: &DMatrix<f64>) -> Result<Vec<Label>> {
    Ok(flag(&model.residuals(x)?, model.threshold()))
}

/// Size at the elbow of a decreasing loss curve: the point farthest from the
/// chord joining the first and last points after scaling both axes to [0, 1].
/// Ties go to the smallest size.
pub fn elbow_select(sizes: &[usize], losses: &[f64]) -> Result<usize> {
    if sizes.len() != losses.len() {
        return Err(AdauError::DimensionMismatch { expected: sizes.len(), actual: losses.len() });
    }
    if sizes.len() < 3 {
        return Err(AdauError::invalid("elbow selection needs at least 3 points"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AdauError::invalid("sizes must be strictly increasing"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(AdauError::invalid("losses must be finite"));
    }
    let (s0, s1) = (sizes[0] as f64, *sizes.last().unwrap() as f64);
    let lmin = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let lmax = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lspan = if lmax - lmin > 0.0 { lmax - lmin } else { 1.0 };
    let pts: Vec<(f64, f64)> = sizes
        .iter()
        .zip(losses)
        .map(|(&s, &l)| ((s as f64 - s0) / (s1 - s0), (l - lmin) / lspan))
        .collect();
    let (a, b) = (pts[0], *pts.last().unwrap());
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let norm = (dx * dx + dy * dy).sqrt();
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, p) in pts.iter().enumerate() {
        let d = (dy * (p.0 - a.0) - dx * (p.1 - a.1)).abs() / norm;
        if d > best.1 + 1e-12 {
            best = (i, d);
        }
    }
    Ok(sizes[best.0])
}

/// Result of sweeping HELM sizes with the elbow rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSelection {
    pub n_ae: usize,
    pub n_oc: usize,
    pub ae_losses: Vec<f64>,
    pub oc_losses: Vec<f64>,
}

/// Picks the autoencoder size from validation reconstruction error, then the
/// one-class size from the mean distance of validation scores to 1.
pub fn select_sizes(
    train: &Dataset,
    val: &Dataset,
    ae_sizes: &[usize],
    oc_sizes: &[usize],
    lambda: f64,
    seed: u64,
) -> Result<SizeSelection> {
    let ae_losses = ae_sizes
        .iter()
        .map(|&h| train_ae(train.samples(), h, lambda, seed)?.reconstruction_error(val.samples()))
        .collect::<Result<Vec<_>>>()?;
    let n_ae = elbow_select(ae_sizes, &ae_losses)?;
    let ae = train_ae(train.samples(), n_ae, lambda, seed)?;
    let (f_train, f_val) = (ae.features(train.samples())?, ae.features(val.samples())?);
    let oc_losses = oc_sizes
        .iter()
        .map(|&h| {
            let layer = train_oneclass(&f_train, h, lambda, oneclass_seed(seed))?;
            let s = layer.predict(&f_val)?;
            Ok(s.iter().map(|y| (1.0 - y).abs()).sum::<f64>() / s.nrows() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_oc = elbow_select(oc_sizes, &oc_losses)?;
    Ok(SizeSelection { n_ae, n_oc, ae_losses, oc_losses })
}
