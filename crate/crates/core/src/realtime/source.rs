use std::path::Path;
use std::time::{Duration, Instant};

use super::RealtimeError;
use crate::dataio::{extract_rest_epochs, read_recording, SynthConfig, SynthSubject};
use crate::dsp::{resample, select_channels, Label, Recording, MONTAGE, TARGET_FS};

/// Frames in montage order at 250 Hz. `cue` is what the participant is
/// being asked to do; recorded sources ignore it.
pub trait SampleSource: Send {
    fn next_frame(&mut self, cue: Option<Label>) -> Option<[f64; 12]>;

    fn describe(&self) -> String;

    /// Labeled `[start, end)` sample intervals when the source carries its
    /// own task timeline.
    fn timeline(&self) -> Option<Vec<(Label, usize, usize)>> {
        None
    }
}

/// Plays a recording back frame by frame.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    rec: Recording,
    pos: usize,
    name: String,
}

impl ReplaySource {
    /// Reorders to the montage and resamples to 250 Hz when needed.
    pub fn new(rec: &Recording, name: impl Into<String>) -> Result<Self, RealtimeError> {
        let mut rec = select_channels(rec, &MONTAGE).map_err(|e| RealtimeError::Invalid(e.to_string()))?;
        if rec.sample_rate != TARGET_FS {
            let ratio = TARGET_FS / rec.sample_rate;
            let rows: Vec<Vec<f64>> = rec
                .data
                .rows()
                .into_iter()
                .map(|r| resample(&r.to_vec(), rec.sample_rate, TARGET_FS))
                .collect::<Result<_, _>>()
                .map_err(|e| RealtimeError::Invalid(e.to_string()))?;
            let n = rows[0].len();
            rec.data = ndarray::Array2::from_shape_fn((rows.len(), n), |(c, t)| rows[c][t]);
            rec.sample_rate = TARGET_FS;
            for e in &mut rec.events {
                e.start = ((e.start as f64 * ratio).round() as usize).min(n);
                e.end = ((e.end as f64 * ratio).round() as usize).min(n);
            }
            rec.events.retain(|e| e.start < e.end);
        }
        Ok(Self { rec, pos: 0, name: name.into() })
    }

    pub fn from_path(path: &Path) -> Result<Self, RealtimeError> {
        let rec = read_recording(path)?;
        Self::new(&rec, path.display().to_string())
    }

    pub fn recording(&self) -> &Recording {
        &self.rec
    }
}

impl SampleSource for ReplaySource {
    fn next_frame(&mut self, _cue: Option<Label>) -> Option<[f64; 12]> {
        if self.pos >= self.rec.n_samples() {
            return None;
        }
        let mut f = [0.0; 12];
        for (c, v) in f.iter_mut().enumerate() {
            *v = self.rec.data[[c, self.pos]];
        }
        self.pos += 1;
        Some(f)
    }

    fn describe(&self) -> String {
        format!("replay:{}", self.name)
    }

    fn timeline(&self) -> Option<Vec<(Label, usize, usize)>> {
        let mut t: Vec<(Label, usize, usize)> = self
            .rec
            .events
            .iter()
            .filter(|e| e.label == Label::Move)
            .map(|e| (Label::Move, e.start, e.end))
            .collect();
        t.extend(extract_rest_epochs(&self.rec, 0.0).into_iter().map(|(s, e)| (Label::Rest, s, e)));
        t.sort_by_key(|x| x.1);
        Some(t)
    }
}

/// Synthetic participant that desynchronizes while cued to move.
#[derive(Debug, Clone)]
pub struct SynthLiveSource {
    gen: SynthSubject,
}

impl SynthLiveSource {
    pub fn new(cfg: &SynthConfig, subject: usize) -> Result<Self, RealtimeError> {
        Ok(Self { gen: SynthSubject::new(cfg, subject)? })
    }
}

impl SampleSource for SynthLiveSource {
    fn next_frame(&mut self, cue: Option<Label>) -> Option<[f64; 12]> {
        Some(self.gen.next_frame(cue == Some(Label::Move)))
    }

    fn describe(&self) -> String {
        "synth-live".to_string()
    }
}

/// Wall-clock pacing at a fixed sample rate.
#[derive(Debug, Clone, Copy)]
pub struct Pacer {
    start: Instant,
    fs: f64,
}

impl Pacer {
    pub fn new(fs: f64) -> Self {
        Self { start: Instant::now(), fs }
    }

    /// Sleeps until sample `n` is due.
    pub fn wait_for(&self, n: usize) {
        let due = self.start + Duration::from_secs_f64(n as f64 / self.fs);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
    }
}
