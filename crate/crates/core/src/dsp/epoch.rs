use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{DspError, Label, Recording};

/// One analysis window (channels x samples).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochWindow {
    pub samples: Array2<f64>,
    pub label: Option<Label>,
    pub recording_id: usize,
    pub start_sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Labeling {
    /// Label covering more than half of the window, otherwise none.
    EventMajority,
    Unlabeled,
}

/// Subsets and reorders rows so they follow `wanted` exactly.
pub fn select_channels<S: AsRef<str>>(
    rec: &Recording,
    wanted: &[S],
) -> Result<Recording, DspError> {
    let rows = wanted
        .iter()
        .map(|name| {
            rec.channel_index(name.as_ref())
                .ok_or_else(|| DspError::MissingChannel(name.as_ref().to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut data = Array2::zeros((rows.len(), rec.n_samples()));
    for (dst, &src) in rows.iter().enumerate() {
        data.row_mut(dst).assign(&rec.data.row(src));
    }
    Ok(Recording {
        channels: wanted.iter().map(|s| s.as_ref().to_string()).collect(),
        sample_rate: rec.sample_rate,
        data,
        events: rec.events.clone(),
    })
}

fn majority_label(rec: &Recording, start: usize, len: usize) -> Option<Label> {
    let end = start + len;
    let moving: usize = rec
        .events
        .iter()
        .filter(|e| e.label == Label::Move)
        .map(|e| e.overlap(start, end))
        .sum::<usize>()
        .min(len);
    let resting = len - moving;
    if 2 * moving > len {
        Some(Label::Move)
    } else if 2 * resting > len {
        Some(Label::Rest)
    } else {
        None
    }
}

/// Cuts windows at `0, stride, 2*stride, ...`, dropping the trailing
/// partial window. Samples outside move events count as rest.
pub fn epoch_stream(
    rec: &Recording,
    recording_id: usize,
    window_len: usize,
    stride: usize,
    labeling: Labeling,
) -> Vec<EpochWindow> {
    assert!(stride >= 1 && window_len >= 1, "stride and window must be positive");
    let n = rec.n_samples();
    if n < window_len {
        return Vec::new();
    }
    (0..=(n - window_len) / stride)
        .map(|i| {
            let start = i * stride;
            EpochWindow {
                samples: rec.data.slice(s![.., start..start + window_len]).to_owned(),
                label: match labeling {
                    Labeling::EventMajority => majority_label(rec, start, window_len),
                    Labeling::Unlabeled => None,
                },
                recording_id,
                start_sample: start,
            }
        })
        .collect()
}

/// Per-channel z-score; near-constant channels are only centred.
pub fn zscore_window(window: ArrayView2<f64>) -> Array2<f64> {
    let mut out = window.to_owned();
    let n = window.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let inv = if sd > 1e-6 { 1.0 / sd } else { 1.0 };
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}
