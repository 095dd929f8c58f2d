//! Live decoding: causal streaming engine, gating, the hand state machine,
//! the actuator line protocol, trial protocols and the session service.

mod actuator;
mod engine;
mod machine;
mod meter;
mod queue;
mod service;
mod session;
mod source;

pub use actuator::{
    encode_command, parse_ack, parse_command, spawn_actuator, Ack, ActuatorCommand, ActuatorHandle, ActuatorLink,
    AckResult, SimulatedEndpoint, SimulatedPort, MAX_ANGLE,
};
pub use engine::{gate, offline_decisions, Engine, EngineConfig, Gate, GatedDecision};
pub use machine::{step_state_machine, Hand, HandMachine, Mode};
pub use meter::{decode_path_bytes, measure, thread_cpu_seconds, DEFAULT_DEVICE_WATTS};
pub use queue::SampleQueue;
pub use service::{serve, ServiceHandle};
pub use session::{
    run_trial_protocol, ClientMessage, ProtocolOutcome, Schedule, RunStats, ScheduledTrial, ServerMessage, Session, SessionConfig,
    SessionSnapshot, TrialRecord, SCHEMA_VERSION,
};
pub use source::{Pacer, ReplaySource, SampleSource, SynthLiveSource};

use thiserror::Error;

use crate::dataio::DataError;
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum RealtimeError {
    #[error("chunk has {got} channels, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error("empty chunk")]
    EmptyChunk,
    #[error("angle {0} outside [0, 120] degrees")]
    AngleOutOfRange(f64),
    #[error("malformed actuator reply {0:?}")]
    MalformedAck(String),
    #[error("malformed actuator command {0:?}")]
    MalformedCommand(String),
    #[error("actuator sequence mismatch: sent {sent}, acknowledged {got}")]
    SeqMismatch { sent: u64, got: u64 },
    #[error("actuator rejected command {seq}: {code}")]
    Rejected { seq: u64, code: String },
    #[error("no decisions recorded")]
    EmptyTrace,
    #[error("no trials to run")]
    EmptyInput,
    #[error("protocol aborted after {} trials", ledger.len())]
    Aborted { ledger: Vec<TrialRecord> },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
