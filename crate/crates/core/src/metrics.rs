//! Detection metrics and paired significance tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::data::Label;
use crate::{AdauError, Result};

/// Confusion counts with `Anomalous` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion(y_true: &[Label], y_pred: &[Label]) -> Result<ConfusionCounts> {
    if y_true.len() != y_pred.len() {
        return Err(AdauError::DimensionMismatch { expected: y_true.len(), actual: y_pred.len() });
    }
    let mut c = ConfusionCounts::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (Label::Anomalous, Label::Anomalous) => c.tp += 1,
            (Label::Healthy, Label::Anomalous) => c.fp += 1,
            (Label::Healthy, Label::Healthy) => c.tn += 1,
            (Label::Anomalous, Label::Healthy) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn tpr(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(AdauError::invalid("TPR undefined without anomalous samples"));
    }
    Ok(c.tp as f64 / (c.tp + c.fn_) as f64)
}

pub fn fpr(c: &ConfusionCounts) -> Result<f64> {
    if c.fp + c.tn == 0 {
        return Err(AdauError::invalid("FPR undefined without healthy samples"));
    }
    Ok(c.fp as f64 / (c.fp + c.tn) as f64)
}

/// `(TPR + TNR) / 2`.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    Ok(0.5 * (tpr(c)? + 1.0 - fpr(c)?))
}

/// Per-sample correctness: TP or TN.
pub fn successes(y_true: &[Label], y_pred: &[Label]) -> Result<Vec<bool>> {
    if y_true.len() != y_pred.len() {
        return Err(AdauError::DimensionMismatch { expected: y_true.len(), actual: y_pred.len() });
    }
    Ok(y_true.iter().zip(y_pred).map(|(t, p)| t == p).collect())
}

/// Two models scored on the same samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcomes {
    pub n: usize,
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
}

impl PairedOutcomes {
    pub fn new(a: &[bool], b: &[bool]) -> Result<PairedOutcomes> {
        if a.len() != b.len() {
            return Err(AdauError::DimensionMismatch { expected: a.len(), actual: b.len() });
        }
        let bc = a.iter().zip(b).filter(|(x, y)| **x && !**y).count();
        let cb = a.iter().zip(b).filter(|(x, y)| !**x && **y).count();
        Ok(PairedOutcomes { n: a.len(), b: bc, c: cb })
    }

    pub fn from_counts(n: usize, b: usize, c: usize) -> Result<PairedOutcomes> {
        if b + c > n {
            return Err(AdauError::invalid(format!("discordant counts {b}+{c} exceed n={n}")));
        }
        Ok(PairedOutcomes { n, b, c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum McNemarMode {
    #[default]
    Exact,
    ChiSquaredCC,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    /// Set when the test is undefined (no discordant pairs) or the fit separated.
    pub flagged: bool,
}

/// McNemar's test. With no discordant pairs the result is `p = 1`, flagged.
/// The exact variant reports `min(b, c)` as its statistic.
pub fn mcnemar(p: &PairedOutcomes, mode: McNemarMode) -> TestOutcome {
    let m = p.b + p.c;
    if m == 0 {
        return TestOutcome { statistic: 0.0, p_value: 1.0, flagged: true };
    }
    match mode {
        McNemarMode::Exact => {
            let k = p.b.min(p.c);
            let tail = Binomial::new(0.5, m as u64).expect("valid binomial").cdf(k as u64);
            TestOutcome { statistic: k as f64, p_value: (2.0 * tail).min(1.0), flagged: false }
        }
        McNemarMode::ChiSquaredCC => {
            let diff = (p.b as f64 - p.c as f64).abs();
            let stat = (diff - 1.0).powi(2) / m as f64;
            TestOutcome { statistic: stat, p_value: chi2_sf(stat, 1.0), flagged: false }
        }
    }
}

fn chi2_sf(stat: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("df > 0").sf(stat.max(0.0)).clamp(0.0, 1.0)
}

pub const IRLS_TOLERANCE: f64 = 1e-10;
pub const IRLS_MAX_ITER: usize = 100;
/// Linear predictors are held inside `±ETA_LIMIT` so separated fits stay finite.
const ETA_LIMIT: f64 = 30.0;
/// A converged fit with `|η|` beyond this is treated as separated.
const SEPARATION_ETA: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub deviance: f64,
    pub iterations: usize,
    /// Some fitted probability reached 0 or 1.
    pub separated: bool,
}

fn bernoulli_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&yi, &m)| {
            let a = if yi > 0.0 { yi * (yi / m).ln() } else { 0.0 };
            let b = if yi < 1.0 { (1.0 - yi) * ((1.0 - yi) / (1.0 - m)).ln() } else { 0.0 };
            a + b
        })
        .sum::<f64>()
}

/// Logistic regression by iteratively reweighted least squares.
pub fn logistic_irls(design: &DMatrix<f64>, y: &[f64]) -> Result<LogisticFit> {
    let (n, p) = design.shape();
    if y.len() != n {
        return Err(AdauError::DimensionMismatch { expected: n, actual: y.len() });
    }
    if n == 0 || p == 0 {
        return Err(AdauError::invalid("empty logistic design"));
    }
    let mut eta = DVector::zeros(n);
    let sigmoid = |e: f64| 1.0 / (1.0 + (-e).exp());
    let mut mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let mut dev = bernoulli_deviance(y, &mu);
    for iter in 1..=IRLS_MAX_ITER {
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / w[i]).collect();
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let row = design.row(i);
            for a in 0..p {
                xtwz[a] += row[a] * w[i] * z[i];
                for b in 0..p {
                    xtwx[(a, b)] += row[a] * w[i] * row[b];
                }
            }
        }
        let beta = xtwx
            .lu()
            .solve(&xtwz)
            .ok_or_else(|| AdauError::Singular("IRLS normal equations".into()))?;
        eta = (design * &beta).map(|e| e.clamp(-ETA_LIMIT, ETA_LIMIT));
        mu = eta.iter().map(|&e| sigmoid(e)).collect();
        let new_dev = bernoulli_deviance(y, &mu);
        if !new_dev.is_finite() {
            return Err(AdauError::NoConvergence(iter));
        }
        let converged = (new_dev - dev).abs() / (new_dev.abs() + 0.1) < IRLS_TOLERANCE;
        dev = new_dev;
        if converged {
            let separated = eta.iter().any(|e| e.abs() > SEPARATION_ETA);
            return Ok(LogisticFit { coefficients: beta, deviance: dev, iterations: iter, separated });
        }
    }
    Err(AdauError::NoConvergence(IRLS_MAX_ITER))
}

/// Likelihood-ratio test of the model factor in a logistic regression of
/// success on model identity, with `k − 1` degrees of freedom.
pub fn glm_model_factor(successes: &[Vec<bool>]) -> Result<TestOutcome> {
    let k = successes.len();
    if k < 2 {
        return Err(AdauError::invalid("GLM test needs at least 2 models"));
    }
    if successes.iter().any(|s| s.is_empty()) {
        return Err(AdauError::invalid("every model needs at least one outcome"));
    }
    let n: usize = successes.iter().map(Vec::len).sum();
    let y: Vec<f64> = successes.iter().flatten().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let groups: Vec<usize> = successes.iter().enumerate().flat_map(|(g, s)| std::iter::repeat_n(g, s.len())).collect();
    let full = DMatrix::from_fn(n, k, |i, j| if j == 0 || groups[i] == j { 1.0 } else { 0.0 });
    let null = DMatrix::from_element(n, 1, 1.0);
    let f0 = logistic_irls(&null, &y)?;
    let f1 = logistic_irls(&full, &y)?;
    // a drop at round-off level means the groups fit identically
    let drop = f0.deviance - f1.deviance;
    let stat = if drop <= 1e-9 * f0.deviance.max(1.0) { 0.0 } else { drop };
    // with a categorical factor, separation means a group that never or always succeeds
    let separated = successes.iter().any(|s| s.iter().all(|&v| v) || s.iter().all(|&v| !v));
    Ok(TestOutcome {
        statistic: stat,
        p_value: chi2_sf(stat, (k - 1) as f64),
        flagged: separated || f0.separated || f1.separated,
    })
}

/// One emitted significance result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub model_a: String,
    pub model_b: String,
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub flags: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Anomalous as A, Healthy as H};

    fn counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn confusion_cases() {
        let t = [A, A, H, H, H];
        assert_eq!(confusion(&t, &t).unwrap(), counts(2, 0, 3, 0));
        let inv: Vec<Label> = t.iter().map(|l| if *l == A { H } else { A }).collect();
        assert_eq!(confusion(&t, &inv).unwrap(), counts(0, 3, 0, 2));
        assert!(confusion(&t, &t[..4]).is_err());
    }

    #[test]
    fn confusion_enumeration() {
        let t = [A, H, H, A, A, H, H, H, A, H, A, A, H, H, A, H, A, H, H, H];
        let p = [A, A, H, H, A, H, A, H, A, H, H, A, H, A, A, H, H, H, H, A];
        // tp: 0,4,8,11,14 ; fn: 3,10,16 ; fp: 1,6,13,19 ; tn: rest
        assert_eq!(confusion(&t, &p).unwrap(), counts(5, 4, 8, 3));
    }

    #[test]
    fn rates() {
        assert_eq!(balanced_accuracy(&counts(5, 0, 5, 0)).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&counts(5, 5, 0, 0)).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&counts(100, 100, 0, 0)).unwrap(), 0.5);
        assert_eq!(fpr(&counts(3, 0, 7, 1)).unwrap(), 0.0);
        assert_eq!(tpr(&counts(9, 0, 1, 1)).unwrap(), 0.9);
        assert!(balanced_accuracy(&counts(0, 1, 1, 0)).is_err());
        assert!(fpr(&counts(1, 0, 0, 1)).is_err());
    }

    #[test]
    fn recovers_tpr_from_ba_and_fpr() {
        for (ba, fp) in [(0.5, 1.0), (0.9812, 0.0376), (0.75, 0.3)] {
            let tpr = 2.0 * ba - (1.0 - fp);
            let c = counts((tpr * 10_000.0_f64).round() as usize, (fp * 10_000.0_f64).round() as usize, 0, 0);
            let c = ConfusionCounts { fn_: 10_000 - c.tp, tn: 10_000 - c.fp, ..c };
            assert!((balanced_accuracy(&c).unwrap() - ba).abs() < 1e-4);
        }
    }

    fn binom_tail_oracle(m: u64, k: u64) -> f64 {
        let mut coef = 1.0f64;
        let mut s = 0.0;
        for i in 0..=k {
            if i > 0 {
                coef *= (m - i + 1) as f64 / i as f64;
            }
            s += coef;
        }
        (2.0 * s * 0.5f64.powi(m as i32)).min(1.0)
    }

    #[test]
    fn mcnemar_exact() {
        let p = mcnemar(&PairedOutcomes::from_counts(30, 15, 0).unwrap(), McNemarMode::Exact);
        assert!((p.p_value - 2.0 * 0.5f64.powi(15)).abs() < 1e-15);
        assert!((p.p_value - 6.1e-5).abs() < 1e-6);
        assert_eq!(mcnemar(&PairedOutcomes::from_counts(10, 5, 5).unwrap(), McNemarMode::Exact).p_value, 1.0);
        for (b, c) in [(3, 9), (20, 11), (40, 0), (1, 2)] {
            let p = mcnemar(&PairedOutcomes::from_counts(100, b, c).unwrap(), McNemarMode::Exact).p_value;
            let o = binom_tail_oracle((b + c) as u64, b.min(c) as u64);
            assert!((p - o).abs() < 1e-12 * o.max(1e-300) + 1e-15, "{b},{c}: {p} vs {o}");
        }
    }

    #[test]
    fn mcnemar_chi_squared() {
        let r = mcnemar(&PairedOutcomes::from_counts(50, 8, 8).unwrap(), McNemarMode::ChiSquaredCC);
        assert!((r.statistic - 1.0 / 16.0).abs() < 1e-15);
        let r = mcnemar(&PairedOutcomes::from_counts(50, 12, 2).unwrap(), McNemarMode::ChiSquaredCC);
        assert!((r.statistic - 81.0 / 14.0).abs() < 1e-12);
        // 1-df chi-squared tail is erfc(sqrt(x/2))
        let z = (r.statistic / 2.0).sqrt();
        assert!((r.p_value - erfc_oracle(z)).abs() < 1e-7);
    }

    #[test]
    fn mcnemar_tied_discordance() {
        let p = PairedOutcomes::from_counts(200, 50, 50).unwrap();
        assert_eq!(mcnemar(&p, McNemarMode::Exact).p_value, 1.0);
        let c = mcnemar(&p, McNemarMode::ChiSquaredCC);
        assert_eq!(c.statistic, 0.01);
        assert!((c.p_value - erfc_oracle(0.005f64.sqrt())).abs() < 1e-7);
    }

    #[test]
    fn mcnemar_undefined() {
        let r = mcnemar(&PairedOutcomes::from_counts(10, 0, 0).unwrap(), McNemarMode::Exact);
        assert!(r.flagged);
        assert_eq!(r.p_value, 1.0);
        assert!(PairedOutcomes::from_counts(3, 2, 2).is_err());
    }

    #[test]
    fn paired_counts() {
        let a = [true, true, false, false, true];
        let b = [true, false, true, false, false];
        assert_eq!(PairedOutcomes::new(&a, &b).unwrap(), PairedOutcomes { n: 5, b: 2, c: 1 });
    }

    /// Abramowitz–Stegun 7.1.26 is too coarse; use a continued series.
    pub(crate) fn erfc_oracle(x: f64) -> f64 {
        // erf by Taylor series, adequate for x < 4
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    }

    fn outcomes(successes: usize, n: usize) -> Vec<bool> {
        (0..n).map(|i| i < successes).collect()
    }

    fn xlogy(x: f64, y: f64) -> f64 {
        if x == 0.0 { 0.0 } else { x * y.ln() }
    }

    fn group_loglik(s: f64, n: f64) -> f64 {
        let p = s / n;
        xlogy(s, p) + xlogy(n - s, 1.0 - p)
    }

    #[test]
    fn glm_matches_groupwise_deviance() {
        let r = glm_model_factor(&[outcomes(90, 100), outcomes(60, 100)]).unwrap();
        let stat = 2.0 * (group_loglik(90.0, 100.0) + group_loglik(60.0, 100.0) - group_loglik(150.0, 200.0));
        assert!((r.statistic - stat).abs() < 1e-8);
        assert!((r.p_value - erfc_oracle((stat / 2.0).sqrt())).abs() < 1e-6);
        assert!(!r.flagged);
    }

    #[test]
    fn glm_identical_models() {
        let a = outcomes(37, 50);
        let r = glm_model_factor(&[a.clone(), a.clone()]).unwrap();
        assert!(r.statistic.abs() < 1e-9);
        assert!((r.p_value - 1.0).abs() < 1e-6);
        let r = glm_model_factor(&[a.clone(), a.clone(), a]).unwrap();
        assert!((r.p_value - 1.0).abs() < 1e-6);
        assert!(glm_model_factor(&[outcomes(1, 2)]).is_err());
        assert!(glm_model_factor(&[outcomes(1, 2), vec![]]).is_err());
    }

    #[test]
    fn glm_separation_flagged() {
        let r = glm_model_factor(&[outcomes(50, 50), outcomes(20, 50)]).unwrap();
        assert!(r.flagged);
        let stat = 2.0 * (group_loglik(50.0, 50.0) + group_loglik(20.0, 50.0) - group_loglik(70.0, 100.0));
        assert!((r.statistic - stat).abs() < 1e-6);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn glm_three_groups() {
        let r = glm_model_factor(&[outcomes(30, 40), outcomes(20, 40), outcomes(25, 30)]).unwrap();
        let stat = 2.0
            * (group_loglik(30.0, 40.0) + group_loglik(20.0, 40.0) + group_loglik(25.0, 30.0)
                - group_loglik(75.0, 110.0));
        assert!((r.statistic - stat).abs() < 1e-8);
        // 2-df chi-squared tail is exp(-x/2)
        assert!((r.p_value - (-stat / 2.0).exp()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ba_symmetric_in_class_roles(tp in 1usize..50, fp in 0usize..50, tn in 1usize..50, fn_ in 0usize..50) {
            let a = balanced_accuracy(&counts(tp, fp, tn, fn_)).unwrap();
            let b = balanced_accuracy(&counts(tn, fn_, tp, fp)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn mcnemar_symmetric(b in 0usize..60, c in 0usize..60) {
            for mode in [McNemarMode::Exact, McNemarMode::ChiSquaredCC] {
                let x = mcnemar(&PairedOutcomes::from_counts(200, b, c).unwrap(), mode);
                let y = mcnemar(&PairedOutcomes::from_counts(200, c, b).unwrap(), mode);
                prop_assert_eq!(x.p_value, y.p_value);
                prop_assert!((0.0..=1.0).contains(&x.p_value));
            }
        }

        // b = c is excluded: the corrected statistic is 1/(b+c) there, not 0
        #[test]
        fn mcnemar_variants_agree_for_large_counts(m in 100usize..400, frac in 0.3f64..0.7) {
            let b = (m as f64 * frac).round() as usize;
            prop_assume!(2 * b != m);
            let p = PairedOutcomes::from_counts(m, b, m - b).unwrap();
            let e = mcnemar(&p, McNemarMode::Exact).p_value;
            let c = mcnemar(&p, McNemarMode::ChiSquaredCC).p_value;
            prop_assert!((e - c).abs() < 0.02, "exact {} chi2 {}", e, c);
        }

        #[test]
        fn glm_monotone_in_rate_gap(n in 20usize..80, base in 0usize..10, gap in 0usize..8) {
            let sa = n / 2 + base.min(n / 2 - 1) / 2;
            let p_small = glm_model_factor(&[outcomes(sa, n), outcomes(sa.saturating_sub(gap), n)]).unwrap().p_value;
            let p_large = glm_model_factor(&[outcomes(sa, n), outcomes(sa.saturating_sub(gap + 1), n)]).unwrap().p_value;
            prop_assert!(p_large <= p_small + 1e-12);
            prop_assert!((0.0..=1.0).contains(&p_small));
        }
    }
}
