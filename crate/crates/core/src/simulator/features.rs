//! Statistical features of one response channel.
//!
//! Five numbers summarize a series: mean, standard deviation, the dominant
//! spectral peak below the band split f_lim, the dominant peak above it, and
//! the power-weighted first spectral moment
//!   m0 = integral of omega * S(omega) d omega   (omega in rad/s),
//! taken by trapezoid over the one-sided periodogram. The first 10% of the
//! samples are treated as transient and discarded before any statistic.
//!
//! Periodogram scaling is chosen so the discrete Parseval identity holds
//! exactly: sum_k S[k] * delta_f equals the biased variance of the
//! mean-removed segment, which the unit tests pin to rounding error.

use crate::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Default split between the natural-frequency band and the wave band, Hz.
pub const F_LIM_DEFAULT_HZ: f64 = 0.05;

/// Fraction of leading samples discarded as transient.
pub const TRANSIENT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DofFeatures {
    pub mean: f64,
    pub std: f64,
    /// Peak frequency on [0, f_lim], Hz.
    pub f1: f64,
    /// Peak frequency on [f_lim, Nyquist], Hz.
    pub f2: f64,
    /// First spectral moment, (signal units)^2 * (rad/s).
    pub m0: f64,
}

impl DofFeatures {
    pub fn to_array(self) -> [f64; 5] {
        [self.mean, self.std, self.f1, self.f2, self.m0]
    }
}

/// One-sided periodogram of the mean-removed series.
///
/// Returns (frequencies in Hz, spectral density in units^2/Hz). Density
/// scaling: S[k] = dt/N * |X_k|^2, doubled for interior bins so the
/// one-sided sum times delta_f reproduces the biased variance.
pub fn periodogram(series: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = series.len();
    if n < 2 {
        return Err(Error::parameter(format!(
            "periodogram needs at least 2 samples, got {n}"
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::parameter(format!("sample step must be positive, got {dt}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|&x| Complex::new(x - mean, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let n_half = n / 2;
    let scale = dt / n as f64;
    let mut freqs = Vec::with_capacity(n_half + 1);
    let mut psd = Vec::with_capacity(n_half + 1);
    for (k, f) in (0..=n_half).map(|k| (k, k as f64 / (n as f64 * dt))) {
        let interior = k != 0 && !(n % 2 == 0 && k == n_half);
        let factor = if interior { 2.0 } else { 1.0 };
        freqs.push(f);
        psd.push(factor * scale * buf[k].norm_sqr());
    }
    Ok((freqs, psd))
}

fn argmax_band(freqs: &[f64], psd: &[f64], keep: impl Fn(f64) -> bool) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&f, &s) in freqs.iter().zip(psd) {
        if keep(f) && best.map_or(true, |(_, bs)| s > bs) {
            best = Some((f, s));
        }
    }
    best.map(|(f, _)| f)
}

/// Extract the five features of one channel sampled at `sample_rate_hz`.
pub fn extract_features(series: &[f64], sample_rate_hz: f64, f_lim_hz: f64) -> Result<DofFeatures> {
    if series.len() < 2 {
        return Err(Error::parameter(format!(
            "feature extraction needs at least 2 samples, got {}",
            series.len()
        )));
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(Error::parameter("sample rate must be positive"));
    }
    let nyquist = 0.5 * sample_rate_hz;
    if f_lim_hz >= nyquist {
        return Err(Error::config(format!(
            "band split f_lim = {f_lim_hz} Hz must be below the Nyquist frequency {nyquist} Hz"
        )));
    }
    if f_lim_hz < 0.0 {
        return Err(Error::config("band split f_lim must be nonnegative"));
    }
    let skip = (series.len() as f64 * TRANSIENT_FRACTION) as usize;
    let kept = &series[skip..];
    if kept.len() < 2 {
        return Err(Error::parameter(
            "series too short after transient discard",
        ));
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let ss: f64 = kept.iter().map(|&x| (x - mean).powi(2)).sum();
    let std = (ss / (n - 1.0)).sqrt();

    let dt = 1.0 / sample_rate_hz;
    let (freqs, psd) = periodogram(kept, dt)?;
    let f1 = argmax_band(&freqs, &psd, |f| f <= f_lim_hz)
        .ok_or_else(|| Error::config("empty low band"))?;
    let f2 = argmax_band(&freqs, &psd, |f| f >= f_lim_hz)
        .ok_or_else(|| Error::config("empty high band"))?;

    // omega grid: S_omega = S_f / 2pi, integrand omega * S_omega.
    let mut m0 = 0.0;
    for k in 1..freqs.len() {
        let (w0, w1) = (
            std::f64::consts::TAU * freqs[k - 1],
            std::f64::consts::TAU * freqs[k],
        );
        let (g0, g1) = (
            w0 * psd[k - 1] / std::f64::consts::TAU,
            w1 * psd[k] / std::f64::consts::TAU,
        );
        m0 += 0.5 * (g0 + g1) * (w1 - w0);
    }

    Ok(DofFeatures { mean, std, f1, f2, m0 })
}

/// Flatten per-DOF features into the network input layout
/// [mean, std, f1, f2, m0] per DOF, DOFs in order.
pub fn feature_vector(per_dof: &[DofFeatures]) -> Vec<f64> {
    per_dof.iter().flat_map(|d| d.to_array()).collect()
}
