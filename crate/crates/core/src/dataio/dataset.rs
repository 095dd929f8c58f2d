use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{extract_rest_epochs, read_recording, subject_rng, DataError};
use crate::dsp::{
    apply_filter, design_bandpass, resample, select_channels, zscore_window, Event, FilterMode, Label, Recording,
    MONTAGE, TARGET_FS, WINDOW_LEN,
};
use crate::ica::{clean_recording, CleanReport, IcaConfig};

/// Offline preprocessing and windowing settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    /// `None` skips ICA cleaning.
    pub ica: Option<IcaConfig>,
    pub guard_s: f64,
    pub stride: usize,
    /// Subsample rest windows to the move-window count per subject.
    pub balance: bool,
    pub seed: u64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            low_hz: 8.0,
            high_hz: 40.0,
            order: 4,
            ica: Some(IcaConfig { tol: 1e-4, max_iter: 200, decim: 4, ..IcaConfig::default() }),
            guard_s: 1.0,
            stride: crate::dsp::DEFAULT_STRIDE,
            balance: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedRecording {
    pub rec: Recording,
    pub clean: Option<CleanReport>,
}

/// Labeled, z-scored windows with their provenance.
#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub windows: Vec<Array2<f64>>,
    pub labels: Vec<Label>,
    pub subjects: Vec<usize>,
    /// Dataset-wide id of the move event or rest interval a window came from.
    pub trials: Vec<usize>,
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> WindowSet {
        WindowSet {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
            trials: idx.iter().map(|&i| self.trials[i]).collect(),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
        }
    }

    fn extend(&mut self, other: WindowSet) {
        self.windows.extend(other.windows);
        self.labels.extend(other.labels);
        self.subjects.extend(other.subjects);
        self.trials.extend(other.trials);
        self.starts.extend(other.starts);
    }

    /// Windows flattened row-wise into `[n x 12*250]`.
    pub fn flattened(&self) -> Array2<f64> {
        let d = self.windows.first().map_or(0, |w| w.len());
        let mut out = Array2::zeros((self.len(), d));
        for (mut row, w) in out.rows_mut().into_iter().zip(&self.windows) {
            row.iter_mut().zip(w.iter()).for_each(|(o, v)| *o = *v);
        }
        out
    }
}

/// Resample to 250 Hz, keep the 12-channel montage, ICA-clean, then apply
/// the zero-phase band-pass.
pub fn prepare_recording(rec: &Recording, cfg: &PrepConfig) -> Result<PreparedRecording, DataError> {
    let mut rec = select_channels(rec, &MONTAGE)?;
    if rec.sample_rate != TARGET_FS {
        let ratio = TARGET_FS / rec.sample_rate;
        let rows: Vec<Vec<f64>> = rec
            .data
            .rows()
            .into_iter()
            .map(|r| resample(&r.to_vec(), rec.sample_rate, TARGET_FS))
            .collect::<Result<_, _>>()?;
        let n = rows.first().map_or(0, Vec::len);
        let data = Array2::from_shape_fn((rows.len(), n), |(c, t)| rows[c][t]);
        let events = rec
            .events
            .iter()
            .map(|e| Event {
                start: ((e.start as f64 * ratio).round() as usize).min(n),
                end: ((e.end as f64 * ratio).round() as usize).min(n),
                label: e.label,
            })
            .filter(|e| e.start < e.end)
            .collect();
        rec = Recording::new(rec.channels, TARGET_FS, data, events)?;
    }
    let clean = match &cfg.ica {
        Some(ica) => {
            let (cleaned, report) = clean_recording(&rec, ica)?;
            rec = cleaned;
            Some(report)
        }
        None => None,
    };
    let coeffs = design_bandpass(cfg.low_hz, cfg.high_hz, cfg.order, TARGET_FS)?;
    for mut row in rec.data.rows_mut() {
        let y = apply_filter(&coeffs, &row.to_vec(), FilterMode::ZeroPhase)?;
        row.iter_mut().zip(y).for_each(|(o, v)| *o = v);
    }
    Ok(PreparedRecording { rec, clean })
}

fn windows_in(start: usize, end: usize, stride: usize) -> impl Iterator<Item = usize> {
    let count = if end >= start + WINDOW_LEN { (end - start - WINDOW_LEN) / stride + 1 } else { 0 };
    (0..count).map(move |i| start + i * stride)
}

/// All windows lying fully inside a move event or a guarded rest interval,
/// each interval stepped from its own start. Trial ids start at
/// `trial_offset`.
pub fn recording_windows(rec: &Recording, subject: usize, trial_offset: usize, cfg: &PrepConfig) -> WindowSet {
    let mut intervals: Vec<(usize, usize, Label)> = rec
        .events
        .iter()
        .filter(|e| e.label == Label::Move)
        .map(|e| (e.start, e.end, Label::Move))
        .collect();
    intervals.extend(extract_rest_epochs(rec, cfg.guard_s).into_iter().map(|(s, e)| (s, e, Label::Rest)));
    intervals.sort_by_key(|&(s, _, _)| s);
    let mut out = WindowSet::default();
    for (k, &(start, end, label)) in intervals.iter().enumerate() {
        for w in windows_in(start, end, cfg.stride.max(1)) {
            out.windows.push(zscore_window(rec.data.slice(s![.., w..w + WINDOW_LEN])));
            out.labels.push(label);
            out.subjects.push(subject);
            out.trials.push(trial_offset + k);
            out.starts.push(w);
        }
    }
    out
}

/// Prepares every recording and collects windows; with `balance` set the
/// rest windows of each subject are subsampled to its move count.
pub fn build_dataset(recs: &[(usize, Recording)], cfg: &PrepConfig) -> Result<WindowSet, DataError> {
    let mut out = WindowSet::default();
    let mut trial_offset = 0;
    for (subject, rec) in recs {
        let prepared = prepare_recording(rec, cfg)?;
        let set = recording_windows(&prepared.rec, *subject, trial_offset, cfg);
        trial_offset = set.trials.iter().max().map_or(trial_offset, |m| m + 1);
        let set = if cfg.balance {
            let moves: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == Label::Move).collect();
            let rests: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == Label::Rest).collect();
            let mut keep = moves.clone();
            if rests.len() > moves.len() {
                let mut rng = subject_rng(cfg.seed, *subject);
                keep.extend(sample(&mut rng, rests.len(), moves.len()).into_iter().map(|i| rests[i]));
            } else {
                keep.extend(&rests);
            }
            keep.sort_unstable();
            set.subset(&keep)
        } else {
            set
        };
        out.extend(set);
    }
    Ok(out)
}

/// Loads every `*.eeg` file of a directory in file-name order; subject ids
/// follow that order.
pub fn load_dir(dir: &Path) -> Result<Vec<(usize, String, Recording)>, DataError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "eeg"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::Invalid(format!("no .eeg recordings in {}", dir.display())));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((i, name, read_recording(p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_placement() {
        assert_eq!(windows_in(0, 1000, 125).collect::<Vec<_>>(), vec![0, 125, 250, 375, 500, 625, 750]);
        assert_eq!(windows_in(10, 259, 125).count(), 0);
        assert_eq!(windows_in(10, 260, 125).collect::<Vec<_>>(), vec![10]);
    }
}
