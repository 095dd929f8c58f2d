//! Rational-factor polyphase resampling with a Kaiser-windowed sinc
//! anti-aliasing filter.

use std::f64::consts::PI;

use super::DspError;

const MAX_DENOMINATOR: u64 = 1000;
/// Kaiser beta for roughly 60 dB stop-band attenuation.
const KAISER_BETA: f64 = 5.653;
/// Filter half-length in units of the larger rate factor.
const HALF_LEN_FACTOR: usize = 16;

/// Reduced `(up, down)` such that `to_hz / from_hz == up / down`.
pub fn rational_ratio(from_hz: f64, to_hz: f64) -> Result<(usize, usize), DspError> {
    let err = DspError::IrrationalRatio { from_hz, to_hz };
    if !(from_hz.is_finite() && to_hz.is_finite() && from_hz > 0.0 && to_hz > 0.0) {
        return Err(err);
    }
    let ratio = to_hz / from_hz;
    for q in 1..=MAX_DENOMINATOR {
        let scaled = ratio * q as f64;
        let p = scaled.round();
        if p >= 1.0 && (scaled - p).abs() <= 1e-9 * scaled.max(1.0) {
            return Ok((p as usize, q as usize));
        }
    }
    Err(err)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn anti_alias_taps(up: usize, down: usize) -> Vec<f64> {
    let factor = up.max(down);
    let half = HALF_LEN_FACTOR * factor;
    let len = 2 * half + 1;
    let cutoff = 1.0 / factor as f64;
    let norm = bessel_i0(KAISER_BETA);
    (0..len)
        .map(|i| {
            let t = i as f64 - half as f64;
            let x = cutoff * t;
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let r = t / half as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            cutoff * sinc * window * up as f64
        })
        .collect()
}

/// Resamples `signal` from `from_hz` to `to_hz`. Output length is
/// `floor(n * to_hz / from_hz)` and the filter is centred so there is no
/// group delay.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, DspError> {
    let (up, down) = rational_ratio(from_hz, to_hz)?;
    let n = signal.len();
    let out_len = n * up / down;
    if up == down {
        return Ok(signal.to_vec());
    }
    let taps = anti_alias_taps(up, down);
    let half = (taps.len() - 1) / 2;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Position of this output sample on the upsampled grid, shifted by the
        // filter centre so tap index k = t - j*up.
        let t = m * down + half;
        let j_hi = (t / up).min(n.saturating_sub(1));
        let j_lo = t.saturating_sub(taps.len() - 1).div_ceil(up);
        let mut acc = 0.0;
        for j in j_lo..=j_hi {
            acc += signal[j] * taps[t - j * up];
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * f * i as f64 / fs).sin())
            .collect()
    }

    fn fitted_amplitude(y: &[f64], f: f64, fs: f64, range: std::ops::Range<usize>) -> f64 {
        let (mut ys, mut yc, mut ss, mut cc) = (0.0, 0.0, 0.0, 0.0);
        for i in range {
            let (s, c) = (2.0 * PI * f * i as f64 / fs).sin_cos();
            ys += y[i] * s;
            yc += y[i] * c;
            ss += s * s;
            cc += c * c;
        }
        ((ys / ss).powi(2) + (yc / cc).powi(2)).sqrt()
    }

    #[test]
    fn ratios() {
        assert_eq!(rational_ratio(500.0, 250.0).unwrap(), (1, 2));
        assert_eq!(rational_ratio(256.0, 250.0).unwrap(), (125, 128));
        assert_eq!(rational_ratio(250.0, 500.0).unwrap(), (2, 1));
        assert!(matches!(
            rational_ratio(1000.0, 1000.0 * std::f64::consts::E),
            Err(DspError::IrrationalRatio { .. })
        ));
        assert!(rational_ratio(0.0, 250.0).is_err());
    }

    #[test]
    fn lengths() {
        assert_eq!(resample(&vec![0.0; 1000], 500.0, 250.0).unwrap().len(), 500);
        assert_eq!(resample(&vec![0.0; 2560], 256.0, 250.0).unwrap().len(), 2500);
        assert_eq!(resample(&vec![0.0; 7], 500.0, 250.0).unwrap().len(), 3);
        assert!(resample(&[], 500.0, 250.0).unwrap().is_empty());
    }

    #[test]
    fn downsampled_tone_keeps_amplitude() {
        let x = tone(10.0, 500.0, 5000);
        let y = resample(&x, 500.0, 250.0).unwrap();
        let amp = fitted_amplitude(&y, 10.0, 250.0, 250..2250);
        assert!((amp - 1.0).abs() < 0.05, "amp {amp}");
    }

    #[test]
    fn tones_below_forty_percent_of_min_rate() {
        for (from, to) in [(500.0, 250.0), (256.0, 250.0), (250.0, 500.0)] {
            let f = 0.4 * f64::min(from, to);
            let x = tone(f, from, 8 * from as usize);
            let y = resample(&x, from, to).unwrap();
            let n = y.len();
            let amp = fitted_amplitude(&y, f, to, n / 4..3 * n / 4);
            assert!((amp - 1.0).abs() < 0.05, "{from}->{to} @ {f}: {amp}");
        }
    }

    #[test]
    fn aliasing_tone_suppressed() {
        // 200 Hz at 500 Hz would alias to 50 Hz at 250 Hz.
        let x = tone(200.0, 500.0, 5000);
        let y = resample(&x, 500.0, 250.0).unwrap();
        let rms = (y[500..2000].iter().map(|v| v * v).sum::<f64>() / 1500.0).sqrt();
        assert!(rms < 1e-2, "rms {rms}");
    }
}
