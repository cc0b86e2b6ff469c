//! Adversarial alignment of a source and a target domain.
//!
//! A feature extractor is trained on the multidimensional-scaling loss while
//! a domain discriminator, attached through a gradient-reversal layer, pushes
//! it towards domain-invariant features. A one-class ELM is then fitted on
//! the aligned healthy features.

mod loss;
mod net;

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain, Label, Standardizer};
use crate::elm::{oneclass_seed, OneClassDetector, DEFAULT_RIDGE_LAMBDA, FORMAT_VERSION};
use crate::{AdauError, Result};

pub use loss::{
    closed_form_eta, discriminator_loss, grl_backward, mds_loss, pair_rng, DomainWeighting, GradientReversal,
    MdsOutput, MdsProblem, MdsState, PairSampling, BCE_CLAMP,
};
pub use net::{Activations, AdamState, DenseLayer, DenseNet, NetActivation, NetGradients};

/// Above this many training rows the MDS term switches to sampled pairs.
pub const FULL_BATCH_LIMIT: usize = 2048;
/// Pairs drawn per domain and epoch once sampling is active.
pub const PAIR_CAP: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdauConfig {
    /// Extractor width `h` (both layers).
    pub width: usize,
    pub disc_hidden: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hidden units of the one-class ELM.
    pub n_oc: usize,
    pub ridge_lambda: f64,
    pub seed: u64,
    pub weighting: DomainWeighting,
    pub freeze_discriminator: bool,
    /// Rows per optimisation step. `None` trains on the full batch each
    /// epoch; otherwise every epoch is split into domain-stratified batches.
    pub batch_size: Option<usize>,
    /// Discriminator updates per optimisation step; all but the last one
    /// leave the extractor untouched.
    pub disc_steps: usize,
    /// Centre inputs on the source mean and divide by one source-derived
    /// scale before the extractor.
    pub standardize: bool,
}

impl Default for AdauConfig {
    fn default() -> Self {
        AdauConfig {
            width: 16,
            disc_hidden: 5,
            alpha: 0.1,
            epochs: 2000,
            learning_rate: 1e-3,
            n_oc: 50,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            seed: 0,
            weighting: DomainWeighting::Balanced,
            freeze_discriminator: false,
            batch_size: None,
            disc_steps: 1,
            standardize: true,
        }
    }
}

impl AdauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.disc_hidden == 0 || self.n_oc == 0 {
            return Err(AdauError::invalid("layer sizes must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AdauError::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AdauError::invalid("learning rate must be positive"));
        }
        if self.disc_steps == 0 {
            return Err(AdauError::invalid("disc_steps must be >= 1"));
        }
        if self.batch_size.is_some_and(|b| b < 4) {
            return Err(AdauError::invalid("batch size must be at least 4"));
        }
        if self.ridge_lambda.is_nan() || self.ridge_lambda < 0.0 {
            return Err(AdauError::invalid("ridge lambda must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdauModel {
    pub format_version: u32,
    pub input_scaler: Option<Standardizer>,
    pub extractor: DenseNet,
    pub discriminator: DenseNet,
    pub grl: GradientReversal,
    pub mds: MdsState,
    pub detector: OneClassDetector,
    pub config: AdauConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mds_loss: f64,
    pub disc_loss: f64,
    pub eta_target: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn mds_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mds_loss).collect()
    }
}

/// Losses and parameter gradients of one full training step.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub mds_loss: f64,
    pub disc_loss: f64,
    pub eta_target: Option<f64>,
    /// Gradient of `mds − α·bce` for the extractor parameters.
    pub extractor: NetGradients,
    /// Gradient of `bce` for the discriminator parameters.
    pub discriminator: NetGradients,
}

/// Forward and backward pass of the adversarial objective on `x`.
pub fn training_step_gradients(
    extractor: &DenseNet,
    discriminator: &DenseNet,
    problem: &MdsProblem,
    x: &DMatrix<f64>,
    domains: &[Domain],
    alpha: f64,
    weighting: DomainWeighting,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepGradients> {
    let acts_f = extractor.forward(x)?;
    let f = acts_f.output();
    let mds = problem.evaluate(f, rng)?;
    let acts_d = discriminator.forward(f)?;
    let d_out: Vec<f64> = acts_d.output().column(0).iter().copied().collect();
    let (disc_loss, g_d) = discriminator_loss(&d_out, domains, weighting)?;
    let disc_grads = discriminator.backward(&acts_d, &DMatrix::from_column_slice(g_d.len(), 1, &g_d))?;
    let upstream = &mds.grad_f + grl_backward(&disc_grads.input, alpha);
    let ext_grads = extractor.backward(&acts_f, &upstream)?;
    Ok(StepGradients {
        mds_loss: mds.loss,
        disc_loss,
        eta_target: mds.eta_target,
        extractor: ext_grads,
        discriminator: disc_grads,
    })
}

/// Gradient of the cross-entropy alone with respect to the discriminator.
fn discriminator_gradients(
    extractor: &DenseNet,
    discriminator: &DenseNet,
    x: &DMatrix<f64>,
    domains: &[Domain],
    weighting: DomainWeighting,
) -> Result<NetGradients> {
    let f = extractor.output(x)?;
    let acts = discriminator.forward(&f)?;
    let d_out: Vec<f64> = acts.output().column(0).iter().copied().collect();
    let (_, g) = discriminator_loss(&d_out, domains, weighting)?;
    discriminator.backward(&acts, &DMatrix::from_column_slice(g.len(), 1, &g))
}

fn check_inputs(source: &Dataset, target_train: &Dataset, target_val: &Dataset) -> Result<()> {
    source.require_healthy("source training set")?;
    target_train.require_healthy("target training set")?;
    target_val.require_healthy("target validation set")?;
    for other in [target_train, target_val] {
        if other.n_features() != source.n_features() {
            return Err(AdauError::DimensionMismatch { expected: source.n_features(), actual: other.n_features() });
        }
    }
    if source.n_samples() < 2 || target_train.n_samples() < 2 {
        return Err(AdauError::invalid("source and target need at least 2 samples each"));
    }
    if target_val.n_samples() == 0 {
        return Err(AdauError::invalid("target validation set is empty"));
    }
    Ok(())
}

/// Splits one epoch into batches that each hold at least two rows of both
/// domains. Rows `0..ns` are source, `ns..ns + nt` target.
pub fn epoch_batches(ns: usize, nt: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let wanted = (ns + nt).div_ceil(batch_size.max(1));
    let n_batches = wanted.min(ns / 2).min(nt / 2).max(1);
    let mut src: Vec<usize> = (0..ns).collect();
    let mut tgt: Vec<usize> = (ns..ns + nt).collect();
    src.shuffle(rng);
    tgt.shuffle(rng);
    (0..n_batches)
        .map(|k| {
            let mut b: Vec<usize> = src[k * ns / n_batches..(k + 1) * ns / n_batches].to_vec();
            b.extend_from_slice(&tgt[k * nt / n_batches..(k + 1) * nt / n_batches]);
            b
        })
        .collect()
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Trains the extractor and discriminator for exactly `config.epochs`
/// epochs, then fits the one-class detector on the aligned features of
/// source and target, thresholded on target validation data.
pub fn train_adau(
    source: &Dataset,
    target_train: &Dataset,
    target_val: &Dataset,
    config: &AdauConfig,
) -> Result<(AdauModel, TrainingLog)> {
    config.validate()?;
    check_inputs(source, target_train, target_val)?;
    let input_scaler = config.standardize.then(|| Standardizer::fit_isotropic(source.samples()));
    let prep = |x: &DMatrix<f64>| match &input_scaler {
        Some(s) => s.transform(x),
        None => Ok(x.clone()),
    };
    let xs = prep(source.samples())?;
    let xt = prep(target_train.samples())?;
    let (ns, nt, d) = (xs.nrows(), xt.nrows(), xs.ncols());
    let x = DMatrix::from_fn(ns + nt, d, |i, j| if i < ns { xs[(i, j)] } else { xt[(i - ns, j)] });
    let domains: Vec<Domain> = (0..ns + nt).map(|i| if i < ns { Domain::Source } else { Domain::Target }).collect();

    let sampling = if ns + nt <= FULL_BATCH_LIMIT { PairSampling::All } else { PairSampling::Random(PAIR_CAP) };
    let full_problem = match config.batch_size {
        None => Some(MdsProblem::new(&x, &domains, sampling)?),
        Some(_) => None,
    };
    let mut rng = pair_rng(config.seed);

    let mut extractor = DenseNet::extractor(d, config.width, config.seed)?;
    let mut discriminator = DenseNet::discriminator(config.width, config.disc_hidden, config.seed.wrapping_add(1))?;
    let mut adam_f = AdamState::new(&extractor, config.learning_rate);
    let mut adam_d = AdamState::new(&discriminator, config.learning_rate);
    let mut log = TrainingLog::default();
    let mut mds_state = MdsState::default();
    let (mut last_mds, mut last_disc) = (f64::NAN, f64::NAN);

    for epoch in 0..config.epochs {
        let batches = match config.batch_size {
            None => vec![None],
            Some(b) => epoch_batches(ns, nt, b, &mut rng).into_iter().map(Some).collect(),
        };
        let n_batches = batches.len() as f64;
        let (mut mds_sum, mut disc_sum, mut eta_sum) = (0.0, 0.0, 0.0);
        for rows in batches {
            if !config.freeze_discriminator {
                for _ in 1..config.disc_steps {
                    let (xb, db) = match &rows {
                        None => (x.clone(), domains.clone()),
                        Some(r) => (select_rows(&x, r), r.iter().map(|&i| domains[i]).collect()),
                    };
                    let grads = discriminator_gradients(&extractor, &discriminator, &xb, &db, config.weighting)?;
                    adam_d.update(&mut discriminator, &grads);
                }
            }
            let step = match &rows {
                None => training_step_gradients(
                    &extractor,
                    &discriminator,
                    full_problem.as_ref().expect("full batch problem"),
                    &x,
                    &domains,
                    config.alpha,
                    config.weighting,
                    Some(&mut rng),
                ),
                Some(rows) => {
                    let xb = select_rows(&x, rows);
                    let db: Vec<Domain> = rows.iter().map(|&i| domains[i]).collect();
                    let problem = MdsProblem::new(&xb, &db, PairSampling::All)?;
                    training_step_gradients(
                        &extractor,
                        &discriminator,
                        &problem,
                        &xb,
                        &db,
                        config.alpha,
                        config.weighting,
                        None,
                    )
                }
            };
            let step = step.map_err(|e| match e {
                AdauError::InvalidInput(msg) => AdauError::InvalidInput(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            if !step.mds_loss.is_finite() || !step.disc_loss.is_finite() {
                return Err(AdauError::NonFiniteLoss { epoch, last_mds, last_disc });
            }
            mds_sum += step.mds_loss;
            disc_sum += step.disc_loss;
            eta_sum += step.eta_target.unwrap_or(1.0);
            adam_f.update(&mut extractor, &step.extractor);
            if !config.freeze_discriminator {
                adam_d.update(&mut discriminator, &step.discriminator);
            }
            if !extractor.is_finite() || !discriminator.is_finite() {
                return Err(AdauError::NonFiniteLoss { epoch, last_mds, last_disc });
            }
        }
        let record = EpochRecord {
            epoch,
            mds_loss: mds_sum / n_batches,
            disc_loss: disc_sum / n_batches,
            eta_target: eta_sum / n_batches,
        };
        log.records.push(record);
        mds_state = MdsState { eta_source: 1.0, eta_target: record.eta_target, loss_value: record.mds_loss };
        last_mds = record.mds_loss;
        last_disc = record.disc_loss;
    }

    let f_train = extractor.output(&x)?;
    let f_val = extractor.output(&prep(target_val.samples())?)?;
    let detector = OneClassDetector::fit(&f_train, &f_val, config.n_oc, config.ridge_lambda, oneclass_seed(config.seed))?;
    let model = AdauModel {
        format_version: FORMAT_VERSION,
        input_scaler,
        extractor,
        discriminator,
        grl: GradientReversal { alpha: config.alpha },
        mds: mds_state,
        detector,
        config: config.clone(),
    };
    Ok((model, log))
}

impl AdauModel {
    fn prepare(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.input_scaler {
            Some(s) => s.transform(x),
            None => {
                if x.ncols() != self.extractor.n_in() {
                    return Err(AdauError::DimensionMismatch { expected: self.extractor.n_in(), actual: x.ncols() });
                }
                Ok(x.clone())
            }
        }
    }

    pub fn n_features(&self) -> usize {
        self.extractor.n_in()
    }

    /// Aligned features of raw inputs.
    pub fn extract(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.extractor.output(&self.prepare(x)?)
    }

    pub fn residuals(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.detector.residuals(&self.extract(x)?)
    }

    pub fn detect(&self, x: &DMatrix<f64>) -> Result<Vec<Label>> {
        self.detector.detect(&self.extract(x)?)
    }

    pub fn threshold(&self) -> f64 {
        self.detector.threshold
    }

    /// Discriminator output per row: estimated probability of Source.
    pub fn domain_scores(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let out = self.discriminator.output(&self.extract(x)?)?;
        Ok(out.column(0).iter().copied().collect())
    }

    /// Fraction of rows whose domain the trained discriminator gets right.
    pub fn discriminator_accuracy(&self, source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
        let n = source.nrows() + target.nrows();
        if n == 0 {
            return Err(AdauError::invalid("no samples to score"));
        }
        let hits = self.domain_scores(source)?.iter().filter(|&&p| p > 0.5).count()
            + self.domain_scores(target)?.iter().filter(|&&p| p <= 0.5).count();
        Ok(hits as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureKind;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); shift + z });
        Dataset::new(x, Domain::Source, None, FeatureKind::Synthetic).unwrap()
    }

    fn small_config(seed: u64) -> AdauConfig {
        AdauConfig { width: 4, epochs: 30, n_oc: 10, seed, ..AdauConfig::default() }
    }

    #[test]
    fn end_to_end_shapes_and_determinism() {
        let s = gaussian(30, 3, 0.0, 1);
        let t = gaussian(20, 3, 1.0, 2).with_domain(Domain::Target);
        let v = gaussian(10, 3, 1.0, 3).with_domain(Domain::Target);
        let (m1, log1) = train_adau(&s, &t, &v, &small_config(7)).unwrap();
        let (m2, log2) = train_adau(&s, &t, &v, &small_config(7)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
        assert_eq!(log1.records.len(), 30);
        let f = m1.extract(v.samples()).unwrap();
        assert_eq!((f.nrows(), f.ncols()), (10, 4));
        assert_eq!(f, m1.extract(v.samples()).unwrap());
        assert_eq!(m1.detect(v.samples()).unwrap().len(), 10);
        assert!(m1.mds.eta_target > 0.0);
        assert_eq!(m1.mds.eta_source, 1.0);
    }

    #[test]
    fn batches_cover_each_row_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = epoch_batches(50, 11, 16, &mut rng);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..61).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.iter().filter(|&&i| i < 50).count() >= 2);
            assert!(batch.iter().filter(|&&i| i >= 50).count() >= 2);
        }
        // too few target rows for the requested count
        assert_eq!(epoch_batches(50, 3, 4, &mut rng).len(), 1);
    }

    #[test]
    fn mini_batch_training_runs() {
        let s = gaussian(30, 3, 0.0, 1);
        let t = gaussian(20, 3, 1.0, 2).with_domain(Domain::Target);
        let cfg = AdauConfig { batch_size: Some(16), ..small_config(2) };
        let (m1, log) = train_adau(&s, &t, &t, &cfg).unwrap();
        assert_eq!(log.records.len(), 30);
        assert_eq!(m1, train_adau(&s, &t, &t, &cfg).unwrap().0);
        assert!(train_adau(&s, &t, &t, &AdauConfig { batch_size: Some(2), ..cfg }).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = gaussian(10, 3, 0.0, 1);
        let t = gaussian(10, 2, 0.0, 2);
        assert!(matches!(
            train_adau(&s, &t, &t, &small_config(0)),
            Err(AdauError::DimensionMismatch { .. })
        ));
        let one = gaussian(1, 3, 0.0, 3);
        assert!(train_adau(&s, &one, &s, &small_config(0)).is_err());
        let bad = AdauConfig { alpha: -1.0, ..small_config(0) };
        assert!(train_adau(&s, &s, &s, &bad).is_err());
    }

    #[test]
    fn diverging_training_aborts() {
        let s = gaussian(10, 3, 0.0, 1);
        let t = gaussian(10, 3, 0.0, 2);
        let cfg = AdauConfig { learning_rate: 1e300, epochs: 50, ..small_config(1) };
        assert!(matches!(train_adau(&s, &t, &t, &cfg), Err(AdauError::NonFiniteLoss { .. })));
    }

    #[test]
    fn model_json_round_trip() {
        let s = gaussian(12, 2, 0.0, 1);
        let t = gaussian(12, 2, 0.5, 2);
        let (m, _) = train_adau(&s, &t, &t, &small_config(3)).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: AdauModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn log_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = TrainingLog { records: vec![EpochRecord { epoch: 0, mds_loss: 1.0, disc_loss: 0.5, eta_target: 1.0 }] };
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("epoch,mds_loss,disc_loss,eta_target\n"));
    }
}
