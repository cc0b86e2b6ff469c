//! Vibration-signal preprocessing: decimation, overlapping windows and
//! FFT magnitude features.

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{AdauError, Result};

/// Keeps every `factor`-th sample starting at index 0. No anti-alias filter.
pub fn downsample(signal: &[f64], factor: usize) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(AdauError::invalid("cannot downsample an empty signal"));
    }
    if factor == 0 {
        return Err(AdauError::invalid("downsampling factor must be >= 1"));
    }
    Ok(signal.iter().step_by(factor).copied().collect())
}

/// Stride that spreads `window_count` windows of `window_length` over a
/// signal: `round((signal_len - window_length) / window_count)`.
///
/// If rounding up would push the last window past the end, the largest
/// stride that still fits is used instead.
pub fn compute_stride(signal_len: usize, window_length: usize, window_count: usize) -> Result<usize> {
    if window_length == 0 {
        return Err(AdauError::invalid("window length must be >= 1"));
    }
    if signal_len < window_length {
        return Err(AdauError::invalid(format!(
            "signal of length {signal_len} is shorter than one window ({window_length})"
        )));
    }
    if window_count < 2 {
        return Err(AdauError::invalid("stride needs at least two windows"));
    }
    let span = signal_len - window_length;
    let mut stride = (span as f64 / window_count as f64).round() as usize;
    if (window_count - 1) * stride > span {
        stride = span / (window_count - 1);
    }
    if stride == 0 {
        return Err(AdauError::invalid(format!(
            "{window_count} windows of length {window_length} do not fit with a positive stride in {signal_len} samples"
        )));
    }
    Ok(stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_length: usize,
    pub window_count: usize,
    pub stride: usize,
}

impl WindowSpec {
    /// Derives the stride for a signal of `signal_len` samples.
    pub fn for_signal(signal_len: usize, window_length: usize, window_count: usize) -> Result<Self> {
        let stride = if window_count == 1 {
            1
        } else {
            compute_stride(signal_len, window_length, window_count)?
        };
        let spec = WindowSpec {
            window_length,
            window_count,
            stride,
        };
        spec.check(signal_len)?;
        Ok(spec)
    }

    pub fn check(&self, signal_len: usize) -> Result<()> {
        if self.window_length == 0 || self.window_count == 0 || self.stride == 0 {
            return Err(AdauError::invalid("window length, count and stride must be >= 1"));
        }
        let needed = (self.window_count - 1) * self.stride + self.window_length;
        if needed > signal_len {
            return Err(AdauError::invalid(format!(
                "windows need {needed} samples but the signal has {signal_len}"
            )));
        }
        Ok(())
    }
}

/// Row `k` is `signal[k * stride .. k * stride + window_length]`.
pub fn window(signal: &[f64], spec: &WindowSpec) -> Result<DMatrix<f64>> {
    spec.check(signal.len())?;
    Ok(DMatrix::from_fn(spec.window_count, spec.window_length, |k, j| {
        signal[k * spec.stride + j]
    }))
}

/// Magnitudes of DFT bins `0..L/2` of a window of even length `L`.
pub fn fft_features(window: &[f64]) -> Result<Vec<f64>> {
    let len = window.len();
    if len < 2 || !len.is_multiple_of(2) {
        return Err(AdauError::invalid(format!(
            "FFT features need an even window length >= 2, got {len}"
        )));
    }
    let mut buf: Vec<Complex<f64>> = window.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    Ok(buf[..len / 2].iter().map(|c| c.norm()).collect())
}

/// Decimate, window and transform a raw recording into an FFT feature matrix.
pub fn preprocess_signal(
    signal: &[f64],
    factor: usize,
    window_length: usize,
    window_count: usize,
) -> Result<DMatrix<f64>> {
    let decimated = downsample(signal, factor)?;
    let spec = WindowSpec::for_signal(decimated.len(), window_length, window_count)?;
    let windows = window(&decimated, &spec)?;
    let mut out = DMatrix::zeros(window_count, window_length / 2);
    let mut row = vec![0.0; window_length];
    for k in 0..window_count {
        row.iter_mut()
            .zip(windows.row(k).iter())
            .for_each(|(r, &v)| *r = v);
        let feats = fft_features(&row)?;
        out.row_mut(k).iter_mut().zip(feats).for_each(|(o, f)| *o = f);
    }
    Ok(out)
}
