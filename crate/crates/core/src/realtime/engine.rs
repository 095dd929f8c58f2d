use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::meter::thread_cpu_seconds;
use super::RealtimeError;
use crate::dsp::{
    apply_filter, design_bandpass, epoch_stream, select_channels, zscore_window, FilterCoeffs, FilterMode,
    FilterState, Label, Labeling, Recording, MONTAGE, TARGET_FS, WINDOW_LEN,
};
use crate::pipeline::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Accepted,
    LowConfidence,
    Artifact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub stride: usize,
    /// Minimum |margin| for an accepted decision.
    pub theta: f64,
    /// Peak-to-peak limit per channel in microvolts.
    pub amp_limit: f64,
    /// Channels with variance below this (uV^2) count as flat.
    pub flat_var: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { stride: crate::dsp::DEFAULT_STRIDE, theta: 0.6, amp_limit: 100.0, flat_var: 1e-3 }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), RealtimeError> {
        if self.stride == 0 {
            return Err(RealtimeError::Invalid("stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(RealtimeError::Invalid("theta must be in [0, 1]".into()));
        }
        if !(self.amp_limit > 0.0) || !(self.flat_var >= 0.0) {
            return Err(RealtimeError::Invalid("amp_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatedDecision {
    pub raw_label: Label,
    pub margin: f64,
    pub gate: Gate,
    /// Window span in samples, `[start, end)`.
    pub start_sample: usize,
    pub end_sample: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// Arrival of the window's last sample to emission.
    pub latency_ms: f64,
    /// Thread CPU time spent on the decision.
    pub cpu_ms: f64,
}

impl GatedDecision {
    pub fn accepted(&self) -> bool {
        self.gate == Gate::Accepted
    }
}

fn is_artifact(window: ArrayView2<f64>, amp_limit: f64, flat_var: f64) -> bool {
    window.rows().into_iter().any(|row| {
        let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        hi - lo > amp_limit || var < flat_var
    })
}

/// Artifact (any channel above `amp_limit` peak-to-peak or flat) overrides
/// the confidence check `|margin| >= theta`.
pub fn gate(window: ArrayView2<f64>, margin: f64, theta: f64, amp_limit: f64) -> Gate {
    if is_artifact(window, amp_limit, EngineConfig::default().flat_var) {
        Gate::Artifact
    } else if margin.abs() < theta {
        Gate::LowConfidence
    } else {
        Gate::Accepted
    }
}

/// Classifies one causally filtered window.
fn decide(pipe: &Pipeline, cfg: &EngineConfig, window: ArrayView2<f64>) -> Result<(Label, f64, Gate), RealtimeError> {
    if is_artifact(window, cfg.amp_limit, cfg.flat_var) {
        return Ok((Label::Rest, 0.0, Gate::Artifact));
    }
    let (label, margin) = pipe.predict(zscore_window(window).view())?;
    let g = if margin.abs() < cfg.theta { Gate::LowConfidence } else { Gate::Accepted };
    Ok((label, margin, g))
}

fn filter_for(pipe: &Pipeline) -> Result<FilterCoeffs, RealtimeError> {
    let p = &pipe.meta.prep;
    design_bandpass(p.low_hz, p.high_hz, p.order, TARGET_FS)
        .map_err(|e| RealtimeError::Invalid(format!("model band: {e}")))
}

/// Streaming decoder over 12-channel 250 Hz frames in montage order.
#[derive(Debug, Clone)]
pub struct Engine {
    pipe: Pipeline,
    cfg: EngineConfig,
    filters: Vec<FilterState>,
    /// Filtered samples, `[channel x WINDOW_LEN]` circular.
    ring: Array2<f64>,
    head: usize,
    seen: usize,
}

impl Engine {
    pub fn new(pipe: Pipeline, cfg: EngineConfig) -> Result<Self, RealtimeError> {
        cfg.validate()?;
        let coeffs = filter_for(&pipe)?;
        let n_ch = pipe.cae.arch.in_channels;
        Ok(Self {
            filters: (0..n_ch).map(|_| FilterState::new(&coeffs)).collect(),
            ring: Array2::zeros((n_ch, WINDOW_LEN)),
            head: 0,
            seen: 0,
            pipe,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipe
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }

    pub fn n_channels(&self) -> usize {
        self.filters.len()
    }

    /// Filters one frame; returns a decision when it completes a window on
    /// the stride grid (`end = WINDOW_LEN + i * stride`).
    pub fn push_frame(&mut self, frame: &[f64], arrival: Instant) -> Result<Option<GatedDecision>, RealtimeError> {
        if frame.len() != self.filters.len() {
            return Err(RealtimeError::Shape { got: frame.len(), expected: self.filters.len() });
        }
        let cpu0 = thread_cpu_seconds();
        for (c, (f, &x)) in self.filters.iter_mut().zip(frame).enumerate() {
            self.ring[[c, self.head]] = f.step(x);
        }
        self.head = (self.head + 1) % WINDOW_LEN;
        self.seen += 1;
        if self.seen < WINDOW_LEN || (self.seen - WINDOW_LEN) % self.cfg.stride != 0 {
            return Ok(None);
        }
        let mut window = Array2::zeros(self.ring.dim());
        for t in 0..WINDOW_LEN {
            let src = (self.head + t) % WINDOW_LEN;
            for c in 0..self.ring.nrows() {
                window[[c, t]] = self.ring[[c, src]];
            }
        }
        let (raw_label, margin, gate) = decide(&self.pipe, &self.cfg, window.view())?;
        let start = self.seen - WINDOW_LEN;
        Ok(Some(GatedDecision {
            raw_label,
            margin,
            gate,
            start_sample: start,
            end_sample: self.seen,
            start_s: start as f64 / TARGET_FS,
            end_s: self.seen as f64 / TARGET_FS,
            latency_ms: arrival.elapsed().as_secs_f64() * 1e3,
            cpu_ms: (thread_cpu_seconds() - cpu0) * 1e3,
        }))
    }

    /// Pushes a `[channels x k]` chunk that arrived now.
    pub fn push_samples(&mut self, chunk: ArrayView2<f64>) -> Result<Vec<GatedDecision>, RealtimeError> {
        if chunk.nrows() != self.filters.len() {
            return Err(RealtimeError::Shape { got: chunk.nrows(), expected: self.filters.len() });
        }
        if chunk.ncols() == 0 {
            return Err(RealtimeError::EmptyChunk);
        }
        let arrival = Instant::now();
        let mut out = Vec::new();
        let mut frame = vec![0.0; chunk.nrows()];
        for col in chunk.columns() {
            frame.iter_mut().zip(col.iter()).for_each(|(f, v)| *f = *v);
            out.extend(self.push_frame(&frame, arrival)?);
        }
        Ok(out)
    }
}

/// Reference path: whole-recording causal filter, `epoch_stream` windows
/// and the same gate and classifier. Returns `(start_sample, label, margin,
/// gate)` per window.
pub fn offline_decisions(
    pipe: &Pipeline,
    rec: &Recording,
    cfg: &EngineConfig,
) -> Result<Vec<(usize, Label, f64, Gate)>, RealtimeError> {
    cfg.validate()?;
    if rec.sample_rate != TARGET_FS {
        return Err(RealtimeError::Invalid(format!("expected {TARGET_FS} Hz, got {}", rec.sample_rate)));
    }
    let mut rec = select_channels(rec, &MONTAGE).map_err(|e| RealtimeError::Invalid(e.to_string()))?;
    let coeffs = filter_for(pipe)?;
    for mut row in rec.data.rows_mut() {
        let y = apply_filter(&coeffs, &row.to_vec(), FilterMode::Causal).expect("causal filtering is total");
        row.iter_mut().zip(y).for_each(|(o, v)| *o = v);
    }
    epoch_stream(&rec, 0, WINDOW_LEN, cfg.stride, Labeling::Unlabeled)
        .into_iter()
        .map(|w| {
            let (l, m, g) = decide(pipe, cfg, w.samples.view())?;
            Ok((w.start_sample, l, m, g))
        })
        .collect()
}
