//! Signal conditioning: band-pass design and filtering, rational resampling,
//! channel selection and fixed-size windowing.

mod epoch;
mod filter;
mod resample;
mod spectrum;

pub use epoch::{epoch_stream, select_channels, zscore_window, EpochWindow, Labeling};
pub use filter::{
    apply_filter, design_bandpass, BandDesign, FilterCoeffs, FilterMode, FilterState,
    STABILITY_MARGIN,
};
pub use resample::{rational_ratio, resample};
pub use spectrum::{band_power, welch_psd};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Electrodes shared by the training montage and the 14-channel headset, in
/// the canonical row order used everywhere downstream.
pub const MONTAGE: [&str; 12] = [
    "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8",
];

pub const WINDOW_LEN: usize = 250;
pub const TARGET_FS: f64 = 250.0;
pub const DEFAULT_STRIDE: usize = 125;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid band {low_hz}-{high_hz} Hz, order {order} at fs {fs} Hz")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        order: usize,
        fs: f64,
    },
    #[error("designed filter has a pole on or outside the unit circle")]
    UnstableDesign,
    #[error("signal of {len} samples too short, need at least {required}")]
    TooShort { len: usize, required: usize },
    #[error("rate ratio {to_hz}/{from_hz} is not a rational with denominator <= 1000")]
    IrrationalRatio { from_hz: f64, to_hz: f64 },
    #[error("channel {0} missing from recording")]
    MissingChannel(String),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
}

/// Binary class label; `Rest` is the safe default everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Rest = 0,
    Move = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Move
        } else {
            Label::Rest
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Rest => "rest",
            Label::Move => "move",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "rest" | "0" => Ok(Label::Rest),
            "move" | "1" => Ok(Label::Move),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Half-open labeled sample interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

impl Event {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, start: usize, end: usize) -> usize {
        self.end.min(end).saturating_sub(self.start.max(start))
    }
}

/// Multi-channel recording, rows are channels, values in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channels: Vec<String>,
    pub sample_rate: f64,
    pub data: Array2<f64>,
    pub events: Vec<Event>,
}

impl Recording {
    /// Builds a recording and checks every structural invariant.
    pub fn new(
        channels: Vec<String>,
        sample_rate: f64,
        data: Array2<f64>,
        events: Vec<Event>,
    ) -> Result<Self, DspError> {
        let rec = Self {
            channels,
            sample_rate,
            data,
            events,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::InvalidRecording(m));
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample rate {}", self.sample_rate));
        }
        if self.channels.len() != self.data.nrows() {
            return bad(format!(
                "{} channel names for {} rows",
                self.channels.len(),
                self.data.nrows()
            ));
        }
        let mut names: Vec<&str> = self.channels.iter().map(String::as_str).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate channel names".into());
        }
        let n = self.n_samples();
        for ev in &self.events {
            if ev.start >= ev.end || ev.end > n {
                return bad(format!("event [{}, {}) outside [0, {n})", ev.start, ev.end));
            }
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return bad("non-finite sample".into());
        }
        Ok(())
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// Label of a single sample: move if inside a move event, rest otherwise.
    pub fn label_at(&self, sample: usize) -> Label {
        if self
            .events
            .iter()
            .any(|e| e.label == Label::Move && e.start <= sample && sample < e.end)
        {
            Label::Move
        } else {
            Label::Rest
        }
    }
}
