//! Recording files, rest-interval harvesting, the synthetic ERD generator
//! and dataset assembly for training.

mod dataset;
mod recording;
mod rest;
mod synth;

pub use dataset::{
    build_dataset, load_dir, prepare_recording, recording_windows, PrepConfig, PreparedRecording, WindowSet,
};
pub use recording::{
    events_path, format_events, parse_events, read_recording, read_recording_from, write_recording,
    write_recording_to, EVENTS_HEADER,
};
pub use rest::extract_rest_epochs;
pub use synth::{generate_synthetic, subject_rng, PinkNoise, SubjectParams, SynthConfig, SynthSubject};

use thiserror::Error;

use crate::dsp::DspError;
use crate::ica::IcaError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not an EEG1 recording")]
    BadMagic,
    #[error("recording payload is truncated")]
    TruncatedPayload,
    #[error("bad event row at line {line}: {reason}")]
    BadEventRow { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Ica(#[from] IcaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
