//! Butterworth band-pass design (bilinear transform) and direct-form filtering.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::DspError;

/// Pole magnitude bound every designed filter must satisfy.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Design parameters kept alongside the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDesign {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of the low-pass prototype; the band-pass has twice as many poles.
    pub order: usize,
    pub fs: f64,
}

/// Transfer-function coefficients, `a[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoeffs {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub design: BandDesign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    Causal,
    ZeroPhase,
}

/// Designs a digital Butterworth band-pass by prewarped bilinear transform of
/// the analog low-pass prototype.
pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    fs: f64,
) -> Result<FilterCoeffs, DspError> {
    let valid = low_hz.is_finite()
        && high_hz.is_finite()
        && fs.is_finite()
        && low_hz > 0.0
        && low_hz < high_hz
        && high_hz < fs / 2.0
        && (2..=8).contains(&order)
        && order % 2 == 0;
    if !valid {
        return Err(DspError::InvalidBand {
            low_hz,
            high_hz,
            order,
            fs,
        });
    }

    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (PI * f / fs).tan();
    let (wl, wh) = (warp(low_hz), warp(high_hz));
    let bw = wh - wl;
    let w0_sq = wl * wh;

    // Analog prototype poles on the left half of the unit circle, each split
    // into a conjugate-symmetric pair by the low-pass to band-pass mapping.
    let mut analog_poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let disc = (half * half - w0_sq).sqrt();
        analog_poles.push(half + disc);
        analog_poles.push(half - disc);
    }

    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|&s| (fs2 + s) / (fs2 - s))
        .collect();
    let mut zeros = vec![Complex64::new(1.0, 0.0); order];
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), order));

    let denom: Complex64 = analog_poles.iter().map(|&s| fs2 - s).product();
    let gain = (Complex64::new(bw.powi(order as i32) * fs2.powi(order as i32), 0.0) / denom).re;

    if digital_poles
        .iter()
        .any(|p| p.norm() >= 1.0 - STABILITY_MARGIN)
    {
        return Err(DspError::UnstableDesign);
    }

    let b: Vec<f64> = poly_from_roots(&zeros).iter().map(|c| c.re * gain).collect();
    let a: Vec<f64> = poly_from_roots(&digital_poles).iter().map(|c| c.re).collect();
    let coeffs = FilterCoeffs {
        b,
        a,
        design: BandDesign {
            low_hz,
            high_hz,
            order,
            fs,
        },
    };
    if !coeffs.b.iter().chain(&coeffs.a).all(|v| v.is_finite()) {
        return Err(DspError::UnstableDesign);
    }
    // The expanded polynomial is what actually runs, so re-check its roots.
    if coeffs.max_pole_magnitude() >= 1.0 - STABILITY_MARGIN {
        return Err(DspError::UnstableDesign);
    }
    Ok(coeffs)
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        poly = next;
    }
    poly
}

impl FilterCoeffs {
    pub fn len(&self) -> usize {
        self.a.len().max(self.b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Roots of the denominator polynomial (companion-matrix eigenvalues).
    pub fn poles(&self) -> Vec<Complex64> {
        let n = self.a.len() - 1;
        if n == 0 {
            return Vec::new();
        }
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            companion[(0, j)] = -self.a[j + 1] / self.a[0];
        }
        for i in 1..n {
            companion[(i, i - 1)] = 1.0;
        }
        companion.complex_eigenvalues().iter().copied().collect()
    }

    pub fn max_pole_magnitude(&self) -> f64 {
        self.poles().iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.design.fs;
        let eval = |c: &[f64]| -> Complex64 {
            c.iter()
                .enumerate()
                .map(|(k, &v)| v * Complex64::from_polar(1.0, -w * k as f64))
                .sum()
        };
        eval(&self.b) / eval(&self.a)
    }

    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    /// Internal state reached after an infinitely long unit-amplitude constant input.
    fn step_state(&self) -> Vec<f64> {
        let n = self.len();
        let b = padded(&self.b, n);
        let a = padded(&self.a, n);
        let dc = b.iter().sum::<f64>() / a.iter().sum::<f64>();
        let mut z = vec![0.0; n - 1];
        let mut acc = 0.0;
        for i in (0..n - 1).rev() {
            acc += b[i + 1] - a[i + 1] * dc;
            z[i] = acc;
        }
        z
    }
}

fn padded(c: &[f64], n: usize) -> Vec<f64> {
    let mut v = c.to_vec();
    v.resize(n, 0.0);
    v
}

/// Per-channel delay line for causal, sample-by-sample filtering
/// (transposed direct form II).
#[derive(Debug, Clone)]
pub struct FilterState {
    b: Vec<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
}

impl FilterState {
    pub fn new(coeffs: &FilterCoeffs) -> Self {
        let n = coeffs.len();
        let a0 = coeffs.a[0];
        Self {
            b: padded(&coeffs.b, n).iter().map(|v| v / a0).collect(),
            a: padded(&coeffs.a, n).iter().map(|v| v / a0).collect(),
            z: vec![0.0; n - 1],
        }
    }

    fn with_state(coeffs: &FilterCoeffs, z: Vec<f64>) -> Self {
        let mut s = Self::new(coeffs);
        s.z = z;
        s
    }

    pub fn reset(&mut self) {
        self.z.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let n = self.z.len();
        if n == 0 {
            return self.b[0] * x;
        }
        let y = self.b[0] * x + self.z[0];
        for i in 0..n - 1 {
            self.z[i] = self.b[i + 1] * x + self.z[i + 1] - self.a[i + 1] * y;
        }
        self.z[n - 1] = self.b[n] * x - self.a[n] * y;
        y
    }

    pub fn process(&mut self, signal: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(signal.iter().map(|&x| self.step(x)));
    }
}

/// Filters a one-dimensional series from a zero initial state (`Causal`) or
/// forward-backward with odd edge extension (`ZeroPhase`).
pub fn apply_filter(
    coeffs: &FilterCoeffs,
    signal: &[f64],
    mode: FilterMode,
) -> Result<Vec<f64>, DspError> {
    match mode {
        FilterMode::Causal => {
            let mut state = FilterState::new(coeffs);
            let mut out = Vec::with_capacity(signal.len());
            state.process(signal, &mut out);
            Ok(out)
        }
        FilterMode::ZeroPhase => zero_phase(coeffs, signal),
    }
}

/// Forward-backward filtering. The forward-first and backward-first passes
/// differ only in their edge transients; averaging them makes the result
/// commute exactly with time reversal.
fn zero_phase(coeffs: &FilterCoeffs, signal: &[f64]) -> Result<Vec<f64>, DspError> {
    let forward_first = forward_backward(coeffs, signal)?;
    let mut reversed = signal.to_vec();
    reversed.reverse();
    let mut backward_first = forward_backward(coeffs, &reversed)?;
    backward_first.reverse();
    Ok(forward_first
        .iter()
        .zip(&backward_first)
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

fn forward_backward(coeffs: &FilterCoeffs, signal: &[f64]) -> Result<Vec<f64>, DspError> {
    let pad = 3 * coeffs.len();
    let n = signal.len();
    if n <= pad {
        return Err(DspError::TooShort {
            len: n,
            required: pad + 1,
        });
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let first = signal[0];
    let last = signal[n - 1];
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let zi = coeffs.step_state();
    let run = |input: &[f64]| -> Vec<f64> {
        let x0 = input[0];
        let mut state = FilterState::with_state(coeffs, zi.iter().map(|v| v * x0).collect());
        let mut out = Vec::with_capacity(input.len());
        state.process(input, &mut out);
        out
    };
    let mut forward = run(&ext);
    forward.reverse();
    let mut backward = run(&forward);
    backward.reverse();
    Ok(backward[pad..pad + n].to_vec())
}
