//! Synthetic 12-channel EEG with mu/beta rhythms that desynchronize during
//! move intervals, pink background noise and frontal blink artifacts.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::dsp::{Event, Label, Recording, MONTAGE, TARGET_FS};

/// Phase diffusion per sample (radians) keeping the rhythms narrow-band
/// without being pure tones.
const PHASE_JITTER: f64 = 0.05;
/// Per-trial amplitude spread of the rhythms, uniform in `1 +/- TRIAL_JITTER`.
const TRIAL_JITTER: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials: usize,
    pub fs: f64,
    pub move_s: f64,
    pub rest_s: f64,
    /// Microvolts, peak amplitude at full weight.
    pub mu_amp: f64,
    pub mu_erd: f64,
    pub beta_amp: f64,
    pub beta_erd: f64,
    /// Microvolts RMS of the per-channel pink background.
    pub noise_rms: f64,
    /// Events per minute.
    pub blink_rate: f64,
    pub blink_amp: f64,
    /// Standard deviation of the log subject gain.
    pub subject_spread: f64,
    /// Post-movement beta rebound, off by default.
    pub ers: bool,
    pub ers_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 5,
            trials: 15,
            fs: TARGET_FS,
            move_s: 4.0,
            rest_s: 6.0,
            mu_amp: 6.0,
            mu_erd: 0.6,
            beta_amp: 3.0,
            beta_erd: 0.5,
            noise_rms: 5.0,
            blink_rate: 6.0,
            blink_amp: 60.0,
            subject_spread: 0.3,
            ers: false,
            ers_gain: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(format!("synth config: {m}")));
        if self.fs != TARGET_FS {
            return bad("fs must be 250 Hz");
        }
        if !(0.0..=1.0).contains(&self.mu_erd) || !(0.0..=1.0).contains(&self.beta_erd) {
            return bad("ERD depths must lie in [0, 1]");
        }
        if !(self.move_s > 1.0 && self.rest_s > 1.0) {
            return bad("move and rest durations must exceed 1 s");
        }
        let amps = [self.mu_amp, self.beta_amp, self.noise_rms, self.blink_rate, self.blink_amp, self.subject_spread, self.ers_gain];
        if amps.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("amplitudes, rates and spreads must be finite and non-negative");
        }
        if self.n_subjects == 0 || self.trials == 0 {
            return bad("need at least one subject and one trial");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        ((self.rest_s + self.trials as f64 * (self.move_s + self.rest_s)) * self.fs).round() as usize
    }

    /// Move intervals: an initial rest, then `move_s` on / `rest_s` off.
    pub fn schedule(&self) -> Vec<Event> {
        let m = (self.move_s * self.fs).round() as usize;
        let r = (self.rest_s * self.fs).round() as usize;
        (0..self.trials)
            .map(|i| {
                let start = r + i * (m + r);
                Event { start, end: start + m, label: Label::Move }
            })
            .collect()
    }
}

/// Independent stream per subject derived from the master seed.
pub fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 + 1);
    rng
}

/// Kellet's refined pink filter, scaled to unit variance.
#[derive(Debug, Clone)]
pub struct PinkNoise {
    state: [f64; 7],
    scale: f64,
}

const PK_A: [f64; 6] = [0.99886, 0.99332, 0.96900, 0.86650, 0.55000, -0.7616];
const PK_G: [f64; 6] = [0.0555179, 0.0750759, 0.1538520, 0.3104856, 0.5329522, -0.0168980];
const PK_DIRECT: f64 = 0.5362;
const PK_LAG: f64 = 0.115926;

impl PinkNoise {
    /// Stationary output variance for unit white input, from the impulse
    /// response `h0 = S0 + direct`, `h1 = S1 + lag`, `hn = Sn`,
    /// `Sn = sum g_k a_k^n`.
    pub fn unit_variance() -> f64 {
        let mut geo = 0.0;
        for k in 0..6 {
            for l in 0..6 {
                geo += PK_G[k] * PK_G[l] / (1.0 - PK_A[k] * PK_A[l]);
            }
        }
        let s0: f64 = PK_G.iter().sum();
        let s1: f64 = PK_G.iter().zip(&PK_A).map(|(g, a)| g * a).sum();
        geo + 2.0 * PK_DIRECT * s0 + PK_DIRECT * PK_DIRECT + 2.0 * PK_LAG * s1 + PK_LAG * PK_LAG
    }

    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self { state: [0.0; 7], scale: 1.0 / Self::unit_variance().sqrt() };
        // settle past the slowest pole
        for _ in 0..3500 {
            p.next(rng);
        }
        p
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let w: f64 = StandardNormal.sample(rng);
        let mut y = self.state[6] + PK_DIRECT * w;
        for k in 0..6 {
            self.state[k] = PK_A[k] * self.state[k] + PK_G[k] * w;
            y += self.state[k];
        }
        self.state[6] = PK_LAG * w;
        y * self.scale
    }
}

/// Per-subject constants drawn once from the subject stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub gain: f64,
    pub mu_hz: f64,
    pub beta_hz: f64,
    /// Rhythm weights per channel for the left and right motor sources.
    pub weights: [[f64; 12]; 2],
}

/// Left-hemisphere source weights in montage order; the right source mirrors
/// them (`F7 <-> F8`, `FC5 <-> FC6`, ...).
const LEFT_WEIGHTS: [f64; 12] = [0.5, 0.8, 1.0, 0.5, 0.2, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05];
const BLINK_WEIGHTS: [f64; 12] = [0.9, 1.0, 0.5, 0.2, 0.05, 0.02, 0.02, 0.05, 0.2, 0.5, 1.0, 0.9];

#[derive(Debug, Clone)]
struct Blink {
    t0: usize,
    hz: f64,
    amp: f64,
}

/// Sample-by-sample generator for one subject. The caller decides when the
/// subject is moving, so the same generator drives both offline recordings
/// and cue-driven live sessions.
#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub params: SubjectParams,
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    pink: Vec<PinkNoise>,
    /// `[band][hemisphere]`, band 0 = mu, 1 = beta.
    phase: [[f64; 2]; 2],
    trial_gain: f64,
    moving: bool,
    ers_left: usize,
    blinks: Vec<Blink>,
    t: usize,
}

impl SynthSubject {
    pub fn new(cfg: &SynthConfig, subject: usize) -> Result<Self, DataError> {
        cfg.validate()?;
        let mut rng = subject_rng(cfg.seed, subject);
        let z: f64 = StandardNormal.sample(&mut rng);
        let gain = (cfg.subject_spread * z).exp();
        let mu_hz = 10.0 + rng.random_range(-0.5..0.5);
        let beta_hz = 20.0 + rng.random_range(-1.0..1.0);
        let mut weights = [[0.0; 12]; 2];
        for c in 0..12 {
            weights[0][c] = LEFT_WEIGHTS[c] * rng.random_range(0.8..1.2);
            weights[1][11 - c] = LEFT_WEIGHTS[c] * rng.random_range(0.8..1.2);
        }
        let pink = (0..12).map(|_| PinkNoise::new(&mut rng)).collect();
        let mut phase = [[0.0; 2]; 2];
        for row in &mut phase {
            for p in row.iter_mut() {
                *p = rng.random_range(0.0..2.0 * PI);
            }
        }
        Ok(Self {
            params: SubjectParams { gain, mu_hz, beta_hz, weights },
            cfg: cfg.clone(),
            rng,
            pink,
            phase,
            trial_gain: 1.0,
            moving: false,
            ers_left: 0,
            blinks: Vec::new(),
            t: 0,
        })
    }

    /// Next 12-channel frame in microvolts, montage order.
    pub fn next_frame(&mut self, moving: bool) -> [f64; 12] {
        let cfg = &self.cfg;
        let fs = cfg.fs;
        if moving != self.moving {
            self.trial_gain = 1.0 + self.rng.random_range(-TRIAL_JITTER..TRIAL_JITTER);
            if !moving && cfg.ers {
                self.ers_left = fs as usize;
            }
            self.moving = moving;
        }
        let mu_env = if moving { 1.0 - cfg.mu_erd } else { 1.0 };
        let beta_env = if moving {
            1.0 - cfg.beta_erd
        } else if self.ers_left > 0 {
            self.ers_left -= 1;
            1.0 + cfg.ers_gain
        } else {
            1.0
        };
        let freqs = [self.params.mu_hz, self.params.beta_hz];
        let amps = [cfg.mu_amp * mu_env, cfg.beta_amp * beta_env];
        let mut source = [0.0; 2];
        for b in 0..2 {
            for h in 0..2 {
                let jitter: f64 = StandardNormal.sample(&mut self.rng);
                self.phase[b][h] = (self.phase[b][h] + 2.0 * PI * freqs[b] / fs + PHASE_JITTER * jitter) % (2.0 * PI);
                source[h] += amps[b] * self.trial_gain * self.phase[b][h].sin();
            }
        }

        if self.rng.random::<f64>() < cfg.blink_rate / 60.0 / fs {
            let hz = self.rng.random_range(0.5..2.0);
            let amp = cfg.blink_amp * self.rng.random_range(0.7..1.3);
            self.blinks.push(Blink { t0: self.t, hz, amp });
        }
        let t = self.t;
        let mut blink = 0.0;
        self.blinks.retain(|b| {
            let dt = (t - b.t0) as f64 / fs;
            if dt * b.hz >= 1.0 {
                return false;
            }
            blink += b.amp * (2.0 * PI * b.hz * dt).sin();
            true
        });

        let mut frame = [0.0; 12];
        for (c, v) in frame.iter_mut().enumerate() {
            let rhythm = self.params.weights[0][c] * source[0] + self.params.weights[1][c] * source[1];
            let noise = cfg.noise_rms * self.pink[c].next(&mut self.rng);
            *v = self.params.gain * (noise + rhythm + BLINK_WEIGHTS[c] * blink);
        }
        self.t += 1;
        frame
    }
}

/// One recording per subject following [`SynthConfig::schedule`].
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<(usize, Recording)>, DataError> {
    cfg.validate()?;
    let n = cfg.n_samples();
    let events = cfg.schedule();
    (0..cfg.n_subjects)
        .map(|s| {
            let mut gen = SynthSubject::new(cfg, s)?;
            let mut data = Array2::zeros((12, n));
            let mut ev = events.iter().peekable();
            for t in 0..n {
                while ev.peek().is_some_and(|e| e.end <= t) {
                    ev.next();
                }
                let moving = ev.peek().is_some_and(|e| e.start <= t);
                let frame = gen.next_frame(moving);
                for (c, v) in frame.iter().enumerate() {
                    data[[c, t]] = *v;
                }
            }
            let channels = MONTAGE.iter().map(|s| s.to_string()).collect();
            Ok((s, Recording::new(channels, cfg.fs, data, events.clone())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pink_variance_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PinkNoise::new(&mut rng);
        let n = 400_000;
        let v: f64 = (0..n).map(|_| p.next(&mut rng).powi(2)).sum::<f64>() / n as f64;
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn schedule_shape() {
        let cfg = SynthConfig::default();
        let ev = cfg.schedule();
        assert_eq!(ev.len(), 15);
        assert_eq!((ev[0].start, ev[0].end), (1500, 2500));
        assert_eq!(ev[14].end + 1500, cfg.n_samples());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = SynthConfig { mu_erd: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = SynthConfig { move_s: 0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = SynthConfig { fs: 500.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
