//! Multidimensional-scaling loss, domain-discriminator cross-entropy and the
//! gradient-reversal layer.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::distance::{condensed_index, euclidean, rows_of};
use crate::par::{map_range, Execution};
use crate::{AdauError, Result};

/// Clamp applied to discriminator outputs before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// How MDS pairs are enumerated each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSampling {
    All,
    /// At most this many uniformly drawn pairs per domain.
    Random(usize),
}

#[derive(Debug, Clone)]
struct Group {
    domain: Domain,
    indices: Vec<usize>,
    /// Input distances over all pairs, condensed; empty when sampling.
    dx: Vec<f64>,
}

/// Input-space side of the MDS loss, precomputed once per training set.
#[derive(Debug, Clone)]
pub struct MdsProblem {
    x_rows: Vec<Vec<f64>>,
    groups: Vec<Group>,
    sampling: PairSampling,
    n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdsOutput {
    pub loss: f64,
    /// Closed-form target scale, `None` when the batch has no target rows.
    pub eta_target: Option<f64>,
    /// `d loss / d F` with `η_Target` held fixed.
    pub grad_f: DMatrix<f64>,
}

/// Scale state carried by a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdsState {
    pub eta_source: f64,
    pub eta_target: f64,
    pub loss_value: f64,
}

impl Default for MdsState {
    fn default() -> Self {
        MdsState { eta_source: 1.0, eta_target: 1.0, loss_value: 0.0 }
    }
}

impl MdsProblem {
    pub fn new(x: &DMatrix<f64>, domains: &[Domain], sampling: PairSampling) -> Result<MdsProblem> {
        if domains.len() != x.nrows() {
            return Err(AdauError::DimensionMismatch { expected: x.nrows(), actual: domains.len() });
        }
        let x_rows = rows_of(x);
        let mut groups = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            let indices: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == domain).collect();
            if indices.is_empty() {
                continue;
            }
            if indices.len() < 2 {
                return Err(AdauError::invalid(format!(
                    "MDS loss needs at least 2 {domain:?} samples, got {}",
                    indices.len()
                )));
            }
            let dx = match sampling {
                PairSampling::All => condensed_over(&indices, &x_rows),
                PairSampling::Random(_) => Vec::new(),
            };
            groups.push(Group { domain, indices, dx });
        }
        Ok(MdsProblem { x_rows, groups, sampling, n: x.nrows() })
    }

    /// Loss, closed-form `η_Target` and gradient for features `f`. `rng` is
    /// only consulted under [`PairSampling::Random`].
    pub fn evaluate(&self, f: &DMatrix<f64>, rng: Option<&mut ChaCha8Rng>) -> Result<MdsOutput> {
        self.evaluate_with(f, None, rng)
    }

    /// Loss at a prescribed `η_Target` (all pairs; used by oracles).
    pub fn loss_at(&self, f: &DMatrix<f64>, eta_target: f64) -> Result<f64> {
        Ok(self.evaluate_with(f, Some(eta_target), None)?.loss)
    }

    fn evaluate_with(
        &self,
        f: &DMatrix<f64>,
        eta_override: Option<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<MdsOutput> {
        if f.nrows() != self.n {
            return Err(AdauError::DimensionMismatch { expected: self.n, actual: f.nrows() });
        }
        let f_rows = rows_of(f);
        let mut grad_f = DMatrix::zeros(f.nrows(), f.ncols());
        let mut loss = 0.0;
        let mut eta_target = None;
        for g in &self.groups {
            let m = g.indices.len();
            let pairs = match self.sampling {
                PairSampling::Random(cap) => {
                    let rng = rng
                        .as_deref_mut()
                        .ok_or_else(|| AdauError::invalid("pair sampling needs a random generator"))?;
                    Some(sample_pairs(m, cap, rng))
                }
                PairSampling::All => None,
            };
            let df = match &pairs {
                None => condensed_over(&g.indices, &f_rows),
                Some(p) => p.iter().map(|&(a, b)| euclidean(&f_rows[g.indices[a]], &f_rows[g.indices[b]])).collect(),
            };
            let dx: Vec<f64> = match &pairs {
                None => g.dx.clone(),
                Some(p) => p.iter().map(|&(a, b)| euclidean(&self.x_rows[g.indices[a]], &self.x_rows[g.indices[b]])).collect(),
            };
            let eta = match g.domain {
                Domain::Source => 1.0,
                Domain::Target => {
                    let e = match eta_override {
                        Some(e) => e,
                        None => closed_form_eta(&dx, &df)?,
                    };
                    eta_target = Some(e);
                    e
                }
            };
            let total_pairs = (m * (m - 1) / 2) as f64;
            let scale = match &pairs {
                None => 1.0 / m as f64,
                Some(p) => total_pairs / (p.len() as f64 * m as f64),
            };
            loss += scale * dx.iter().zip(&df).map(|(a, b)| (a - eta * b).powi(2)).sum::<f64>();

            // d/dF_a of (dx - η df)² = -2η (dx - η df) (F_a - F_b) / df
            let coef = |dxv: f64, dfv: f64| -2.0 * eta * (dxv - eta * dfv) * scale / dfv;
            match &pairs {
                None => {
                    let rows = map_range(m, Execution::Parallel, |a| {
                        let fa = &f_rows[g.indices[a]];
                        let mut acc = vec![0.0; fa.len()];
                        for b in 0..m {
                            if a == b {
                                continue;
                            }
                            let k = if a < b { condensed_index(m, a, b) } else { condensed_index(m, b, a) };
                            if df[k] == 0.0 {
                                continue;
                            }
                            let c = coef(dx[k], df[k]);
                            let fb = &f_rows[g.indices[b]];
                            for (o, (u, v)) in acc.iter_mut().zip(fa.iter().zip(fb)) {
                                *o += c * (u - v);
                            }
                        }
                        acc
                    });
                    for (a, acc) in rows.into_iter().enumerate() {
                        for (j, v) in acc.into_iter().enumerate() {
                            grad_f[(g.indices[a], j)] += v;
                        }
                    }
                }
                Some(p) => {
                    for (k, &(a, b)) in p.iter().enumerate() {
                        if df[k] == 0.0 {
                            continue;
                        }
                        let c = coef(dx[k], df[k]);
                        let (ia, ib) = (g.indices[a], g.indices[b]);
                        for j in 0..f.ncols() {
                            let d = c * (f_rows[ia][j] - f_rows[ib][j]);
                            grad_f[(ia, j)] += d;
                            grad_f[(ib, j)] -= d;
                        }
                    }
                }
            }
        }
        Ok(MdsOutput { loss, eta_target, grad_f })
    }
}

fn condensed_over(indices: &[usize], rows: &[Vec<f64>]) -> Vec<f64> {
    let m = indices.len();
    map_range(m, Execution::Parallel, |a| {
        ((a + 1)..m)
            .map(|b| euclidean(&rows[indices[a]], &rows[indices[b]]))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn sample_pairs(m: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..cap.max(1))
        .map(|_| {
            let a = rng.random_range(0..m);
            let mut b = rng.random_range(0..m - 1);
            if b >= a {
                b += 1;
            }
            (a.min(b), a.max(b))
        })
        .collect()
}

/// Least-squares scale `Σ dX·dF / Σ dF²`.
pub fn closed_form_eta(dx: &[f64], df: &[f64]) -> Result<f64> {
    let den: f64 = df.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(AdauError::invalid("target feature distances are all zero; scale undefined"));
    }
    let num: f64 = dx.iter().zip(df).map(|(a, b)| a * b).sum();
    Ok(num / den)
}

/// MDS loss of features `f` against inputs `x`, domain by domain, with
/// `η_Source = 1` and the closed-form `η_Target`.
pub fn mds_loss(x: &DMatrix<f64>, f: &DMatrix<f64>, domains: &[Domain]) -> Result<MdsOutput> {
    MdsProblem::new(x, domains, PairSampling::All)?.evaluate(f, None)
}

/// Per-sample weights of the cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DomainWeighting {
    /// Each domain contributes half of the loss whatever its size.
    #[default]
    Balanced,
    Uniform,
}

/// Mean binary cross-entropy with Source labelled 1 and Target 0, and its
/// gradient with respect to each output.
pub fn discriminator_loss(d_out: &[f64], domains: &[Domain], weighting: DomainWeighting) -> Result<(f64, Vec<f64>)> {
    if d_out.is_empty() {
        return Err(AdauError::invalid("discriminator loss of an empty batch"));
    }
    if d_out.len() != domains.len() {
        return Err(AdauError::DimensionMismatch { expected: d_out.len(), actual: domains.len() });
    }
    let n = d_out.len() as f64;
    let n_src = domains.iter().filter(|&&d| d == Domain::Source).count() as f64;
    let n_tgt = n - n_src;
    let weight = |d: Domain| match weighting {
        DomainWeighting::Balanced if n_src > 0.0 && n_tgt > 0.0 => match d {
            Domain::Source => n / (2.0 * n_src),
            Domain::Target => n / (2.0 * n_tgt),
        },
        _ => 1.0,
    };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(d_out.len());
    for (&p_raw, &d) in d_out.iter().zip(domains) {
        let w = weight(d);
        let p = p_raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let clamped = p != p_raw;
        let y = if d == Domain::Source { 1.0 } else { 0.0 };
        loss += w * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        let g = if clamped { 0.0 } else { -y / p + (1.0 - y) / (1.0 - p) };
        grad.push(w * g / n);
    }
    Ok((loss / n, grad))
}

/// Identity forward, `-α ×` gradient backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReversal {
    pub alpha: f64,
}

impl Default for GradientReversal {
    fn default() -> Self {
        GradientReversal { alpha: 0.1 }
    }
}

impl GradientReversal {
    pub fn forward<'a>(&self, x: &'a DMatrix<f64>) -> &'a DMatrix<f64> {
        x
    }

    pub fn backward(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        grl_backward(grad, self.alpha)
    }
}

pub fn grl_backward(grad: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    grad * -alpha
}

/// Seeded generator for pair sampling.
pub fn pair_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03)
}
