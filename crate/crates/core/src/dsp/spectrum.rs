use rustfft::{num_complex::Complex64, FftPlanner};

/// One-sided Welch PSD with a Hann window and 50% overlap.
/// Returns `(freqs_hz, psd)` in units^2/Hz.
pub fn welch_psd(signal: &[f64], fs: f64, nperseg: usize) -> (Vec<f64>, Vec<f64>) {
    let nperseg = nperseg.min(signal.len()).max(2);
    let step = (nperseg / 2).max(1);
    let win: Vec<f64> = (0..nperseg)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / nperseg as f64).cos())
        .collect();
    let wss: f64 = win.iter().map(|w| w * w).sum();
    let n_bins = nperseg / 2 + 1;
    let mut psd = vec![0.0; n_bins];
    let fft = FftPlanner::new().plan_fft_forward(nperseg);
    let mut buf = vec![Complex64::default(); nperseg];
    let mut segments = 0usize;
    let mut start = 0;
    while start + nperseg <= signal.len() {
        let seg = &signal[start..start + nperseg];
        let mean = seg.iter().sum::<f64>() / nperseg as f64;
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&win)) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let mut v = buf[k].norm_sqr() / (fs * wss);
            if k != 0 && !(nperseg % 2 == 0 && k == nperseg / 2) {
                v *= 2.0;
            }
            *p += v;
        }
        segments += 1;
        start += step;
    }
    if segments > 0 {
        psd.iter_mut().for_each(|p| *p /= segments as f64);
    }
    let freqs = (0..n_bins).map(|k| k as f64 * fs / nperseg as f64).collect();
    (freqs, psd)
}

/// Integrated Welch power over `[lo_hz, hi_hz]`.
pub fn band_power(signal: &[f64], fs: f64, lo_hz: f64, hi_hz: f64, nperseg: usize) -> f64 {
    let (f, p) = welch_psd(signal, fs, nperseg);
    let df = f.get(1).copied().unwrap_or(fs);
    f.iter()
        .zip(&p)
        .filter(|(f, _)| (lo_hz..=hi_hz).contains(*f))
        .map(|(_, p)| p * df)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_power_lands_in_band() {
        let fs = 250.0;
        let x: Vec<f64> = (0..5000).map(|t| 3.0 * (2.0 * std::f64::consts::PI * 10.0 * t as f64 / fs).sin()).collect();
        let total = band_power(&x, fs, 0.0, 125.0, 250);
        assert!((total - 4.5).abs() < 0.05, "{total}");
        let inband = band_power(&x, fs, 8.0, 13.0, 250);
        assert!(inband / total > 0.99);
    }
}
