//! Pairwise distances: plain Euclidean for the MDS loss and the image
//! Euclidean distance (IMED) for image inputs.
//!
//! Pairwise results use condensed upper-triangle storage, row-major over
//! `i < j`: `(0,1), (0,2), …, (0,n-1), (1,2), …`.

use nalgebra::DMatrix;
use std::f64::consts::PI;

use crate::par::{map_range, Execution};
use crate::{AdauError, Result};

/// Gram entries below this are stored as exact zeros.
pub const GRAM_TRUNCATION: f64 = 1e-12;

/// Position of pair `(i, j)`, `i < j`, in condensed storage for `n` items.
pub fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn condensed<F>(n: usize, exec: Execution, dist: F) -> Vec<f64>
where
    F: Fn(usize, usize) -> f64 + Sync + Send,
{
    map_range(n, exec, |i| ((i + 1)..n).map(|j| dist(i, j)).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn pairwise_euclidean(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    pairwise_euclidean_with(x, Execution::Parallel)
}

pub fn pairwise_euclidean_with(x: &DMatrix<f64>, exec: Execution) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(AdauError::invalid(format!("pairwise distances need >= 2 rows, got {n}")));
    }
    let rows = rows_of(x);
    Ok(condensed(n, exec, |i, j| euclidean(&rows[i], &rows[j])))
}

/// Gaussian coefficients between every pair of pixels of a `width × height`
/// grid, pixels vectorised row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImedKernel {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub gram: DMatrix<f64>,
}

impl ImedKernel {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// `g_ij = exp(-|P_i - P_j|² / 2σ²) / (2πσ²)`.
pub fn imed_kernel(width: usize, height: usize, sigma: f64) -> Result<ImedKernel> {
    if width == 0 || height == 0 {
        return Err(AdauError::invalid("image width and height must be >= 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(AdauError::invalid("sigma must be a positive finite number"));
    }
    let n = width * height;
    let norm = 1.0 / (2.0 * PI * sigma * sigma);
    let gram = DMatrix::from_fn(n, n, |i, j| {
        let (ri, ci) = ((i / width) as f64, (i % width) as f64);
        let (rj, cj) = ((j / width) as f64, (j % width) as f64);
        let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
        let g = norm * (-d2 / (2.0 * sigma * sigma)).exp();
        if g < GRAM_TRUNCATION { 0.0 } else { g }
    });
    Ok(ImedKernel { width, height, sigma, gram })
}

fn imed_sq(diff: &[f64], gram: &DMatrix<f64>) -> f64 {
    let n = diff.len();
    let mut total = 0.0;
    for i in 0..n {
        if diff[i] == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..n {
            acc += gram[(i, j)] * diff[j];
        }
        total += diff[i] * acc;
    }
    total
}

/// `sqrt(Σ_i Σ_j g_ij (x_i - y_i)(x_j - y_j))` for single-channel images.
pub fn imed_distance(x: &[f64], y: &[f64], kernel: &ImedKernel) -> Result<f64> {
    imed_distance_channels(x, y, kernel, 1)
}

/// IMED over `channels` planar channels (each `width × height` block in
/// turn); squared per-channel distances are summed.
pub fn imed_distance_channels(x: &[f64], y: &[f64], kernel: &ImedKernel, channels: usize) -> Result<f64> {
    let p = kernel.n_pixels();
    let expected = p * channels.max(1);
    for v in [x, y] {
        if v.len() != expected {
            return Err(AdauError::DimensionMismatch { expected, actual: v.len() });
        }
    }
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let total: f64 = diff.chunks(p).map(|c| imed_sq(c, &kernel.gram)).sum();
    // positive definite gram: negatives are rounding only
    Ok(total.max(0.0).sqrt())
}

pub fn pairwise_imed(x: &DMatrix<f64>, kernel: &ImedKernel) -> Result<Vec<f64>> {
    pairwise_imed_with(x, kernel, 1, Execution::Parallel)
}

pub fn pairwise_imed_with(
    x: &DMatrix<f64>,
    kernel: &ImedKernel,
    channels: usize,
    exec: Execution,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 2 {
        return Err(AdauError::invalid(format!("pairwise distances need >= 2 rows, got {n}")));
    }
    let expected = kernel.n_pixels() * channels.max(1);
    if x.ncols() != expected {
        return Err(AdauError::DimensionMismatch { expected, actual: x.ncols() });
    }
    let rows = rows_of(x);
    Ok(condensed(n, exec, |i, j| {
        imed_distance_channels(&rows[i], &rows[j], kernel, channels).expect("lengths checked")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn three_four_five() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(pairwise_euclidean(&x).unwrap(), vec![5.0]);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(pairwise_euclidean(&x).unwrap(), vec![0.0]);
        assert!(pairwise_euclidean(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn matches_double_loop() {
        let x = random_matrix(5, 3, 1);
        let got = pairwise_euclidean(&x).unwrap();
        assert_eq!(got.len(), 10);
        let mut k = 0;
        for i in 0..5 {
            for j in (i + 1)..5 {
                let mut s = 0.0;
                for c in 0..3 {
                    s += (x[(i, c)] - x[(j, c)]).powi(2);
                }
                assert!((got[k] - s.sqrt()).abs() < 1e-12);
                assert_eq!(condensed_index(5, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn sequential_and_parallel_identical() {
        let x = random_matrix(300, 4, 2);
        let a = pairwise_euclidean_with(&x, Execution::Sequential).unwrap();
        let b = pairwise_euclidean_with(&x, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_entries() {
        let k = imed_kernel(3, 2, 1.3).unwrap();
        let diag = 1.0 / (2.0 * PI * 1.3 * 1.3);
        for i in 0..6 {
            assert!((k.gram[(i, i)] - diag).abs() < 1e-15);
        }
        assert_eq!(k.gram, k.gram.transpose());
        let k = imed_kernel(2, 1, 1.0).unwrap();
        assert!((k.gram[(0, 1)] - (-0.5f64).exp() / (2.0 * PI)).abs() < 1e-15);
        // isotropy: horizontal and vertical neighbours at distance 1
        let k = imed_kernel(3, 3, 1.0).unwrap();
        assert_eq!(k.gram[(4, 5)], k.gram[(4, 7)]);
        assert_eq!(k.gram[(0, 4)], k.gram[(2, 4)]);
        assert!(k.gram[(4, 5)] > k.gram[(4, 8)]);
        assert!(imed_kernel(0, 3, 1.0).is_err());
        assert!(imed_kernel(3, 3, 0.0).is_err());
    }

    #[test]
    fn single_pixel_difference() {
        let k = imed_kernel(4, 4, 1.0).unwrap();
        let x = vec![0.0; 16];
        let mut y = x.clone();
        y[5] = 0.7;
        let d = imed_distance(&x, &y, &k).unwrap();
        assert!((d - 0.7 * (1.0 / (2.0 * PI)).sqrt()).abs() < 1e-14);
        assert_eq!(imed_distance(&x, &x, &k).unwrap(), 0.0);
        assert!(imed_distance(&x, &y[..15], &k).is_err());
    }

    #[test]
    fn cholesky_factorisation_agrees() {
        let k = imed_kernel(4, 4, 1.0).unwrap();
        let chol = k.gram.clone().cholesky().expect("gram is positive definite");
        let l = chol.l();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let diff = nalgebra::DVector::from_iterator(16, x.iter().zip(&y).map(|(a, b)| a - b));
        let blurred = l.transpose() * diff;
        let d = imed_distance(&x, &y, &k).unwrap();
        assert!((d - blurred.norm()).abs() < 1e-10);
    }

    #[test]
    fn small_sigma_tends_to_scaled_euclidean() {
        let sigma = 0.05;
        let k = imed_kernel(4, 4, sigma).unwrap();
        let x = random_matrix(3, 16, 4);
        let imed = pairwise_imed(&x, &k).unwrap();
        let eu = pairwise_euclidean(&x).unwrap();
        for (a, b) in imed.iter().zip(&eu) {
            let ratio = sigma * a / (0.399 * b);
            assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
        }
    }

    #[test]
    fn pairwise_imed_consistency() {
        let k = imed_kernel(3, 3, 1.0).unwrap();
        let mut x = random_matrix(3, 9, 5);
        let got = pairwise_imed(&x, &k).unwrap();
        let rows = rows_of(&x);
        assert_eq!(got[0], imed_distance(&rows[0], &rows[1], &k).unwrap());
        assert_eq!(got[1], imed_distance(&rows[0], &rows[2], &k).unwrap());
        assert_eq!(got[2], imed_distance(&rows[1], &rows[2], &k).unwrap());
        let r0 = x.row(0).clone_owned();
        x.row_mut(2).copy_from(&r0);
        assert_eq!(pairwise_imed(&x, &k).unwrap()[1], 0.0);
    }

    #[test]
    fn channels_sum_squares() {
        let k = imed_kernel(2, 2, 1.0).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let y = vec![0.0; 8];
        let both = imed_distance_channels(&x, &y, &k, 2).unwrap();
        let a = imed_distance(&x[..4], &y[..4], &k).unwrap();
        let b = imed_distance(&x[4..], &y[4..], &k).unwrap();
        assert!((both * both - (a * a + b * b)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn metric_axioms(seed in 0u64..500) {
            let k = imed_kernel(3, 3, 1.0).unwrap();
            let x = random_matrix(3, 9, seed);
            let rows = rows_of(&x);
            let d = |a: usize, b: usize| imed_distance(&rows[a], &rows[b], &k).unwrap();
            let e = |a: usize, b: usize| euclidean(&rows[a], &rows[b]);
            for f in [&d as &dyn Fn(usize, usize) -> f64, &e] {
                prop_assert!(f(0, 1) >= 0.0);
                prop_assert!((f(0, 1) - f(1, 0)).abs() < 1e-14);
                prop_assert_eq!(f(2, 2), 0.0);
                prop_assert!(f(0, 2) <= f(0, 1) + f(1, 2) + 1e-12);
            }
        }
    }
}
