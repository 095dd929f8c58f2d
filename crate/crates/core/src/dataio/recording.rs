//! `EEG1` recording files with a sibling events CSV.
//!
//! ```text
//! "EEG1" u16 version=1 u16 n_channels f32 sample_rate u64 n_samples
//! n_channels x (u16 len, ASCII name)
//! n_samples x n_channels f32 little-endian, time-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::DataError;
use crate::dsp::{Event, Label, Recording};

const MAGIC: &[u8; 4] = b"EEG1";
const VERSION: u16 = 1;
pub const EVENTS_HEADER: &str = "start_sample,end_sample,label";

/// `foo.eeg` -> `foo.csv`
pub fn events_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

pub fn write_recording_to<W: Write>(mut w: W, rec: &Recording) -> Result<(), DataError> {
    let n_ch = u16::try_from(rec.n_channels()).map_err(|_| DataError::Invalid("too many channels".into()))?;
    let mut buf = Vec::with_capacity(32 + rec.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&n_ch.to_le_bytes());
    buf.extend_from_slice(&(rec.sample_rate as f32).to_le_bytes());
    buf.extend_from_slice(&(rec.n_samples() as u64).to_le_bytes());
    for name in &rec.channels {
        if !name.is_ascii() {
            return Err(DataError::Invalid(format!("channel name {name:?} is not ASCII")));
        }
        let len = u16::try_from(name.len()).map_err(|_| DataError::Invalid("channel name too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for t in 0..rec.n_samples() {
        for c in 0..rec.n_channels() {
            buf.extend_from_slice(&(rec.data[[c, t]] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, DataError> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() < n {
        return Err(DataError::TruncatedPayload);
    }
    Ok(v)
}

/// Reads samples and channel table; events are left empty.
pub fn read_recording_from<R: Read>(mut r: R) -> Result<Recording, DataError> {
    let head = read_exact(&mut r, 20).map_err(|e| match e {
        DataError::TruncatedPayload => DataError::BadMagic,
        e => e,
    })?;
    if &head[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(DataError::Invalid(format!("unsupported version {version}")));
    }
    let n_ch = u16::from_le_bytes([head[6], head[7]]) as usize;
    let fs = f32::from_le_bytes(head[8..12].try_into().unwrap()) as f64;
    let n = u64::from_le_bytes(head[12..20].try_into().unwrap());
    let mut channels = Vec::with_capacity(n_ch);
    for _ in 0..n_ch {
        let len = read_exact(&mut r, 2)?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = read_exact(&mut r, len)?;
        if !name.is_ascii() {
            return Err(DataError::Invalid("channel name is not ASCII".into()));
        }
        channels.push(String::from_utf8(name).expect("ascii"));
    }
    let n = usize::try_from(n).map_err(|_| DataError::TruncatedPayload)?;
    let bytes = n
        .checked_mul(n_ch)
        .and_then(|v| v.checked_mul(4))
        .ok_or(DataError::TruncatedPayload)?;
    let payload = read_exact(&mut r, bytes)?;
    let mut data = Array2::zeros((n_ch, n));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        data[[i % n_ch, i / n_ch]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DataError::Invalid("trailing bytes after payload".into()));
    }
    Ok(Recording::new(channels, fs, data, Vec::new())?)
}

pub fn format_events(events: &[Event]) -> String {
    let mut s = String::from(EVENTS_HEADER);
    s.push('\n');
    for e in events {
        s.push_str(&format!("{},{},{}\n", e.start, e.end, e.label.as_str()));
    }
    s
}

/// Parses `start_sample,end_sample,label` rows; an optional header line and
/// blank lines are skipped. Line numbers in errors are 1-based.
pub fn parse_events(text: &str) -> Result<Vec<Event>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line == EVENTS_HEADER) {
            continue;
        }
        let bad = |reason: &str| DataError::BadEventRow { line: i + 1, reason: reason.to_string() };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        let start: usize = fields[0].parse().map_err(|_| bad("bad start"))?;
        let end: usize = fields[1].parse().map_err(|_| bad("bad end"))?;
        let label: Label = fields[2].parse().map_err(|_| bad("bad label"))?;
        if start >= end {
            return Err(bad("start must be before end"));
        }
        out.push(Event { start, end, label });
    }
    Ok(out)
}

pub fn write_recording(path: &Path, rec: &Recording) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_recording_to(&mut w, rec)?;
    w.flush()?;
    std::fs::write(events_path(path), format_events(&rec.events))?;
    Ok(())
}

/// Reads a recording and, when present, its sibling events CSV.
pub fn read_recording(path: &Path) -> Result<Recording, DataError> {
    let mut rec = read_recording_from(BufReader::new(File::open(path)?))?;
    let ev = events_path(path);
    if ev.exists() {
        let events = parse_events(&std::fs::read_to_string(ev)?)?;
        rec = Recording::new(rec.channels, rec.sample_rate, rec.data, events)?;
    }
    Ok(rec)
}
