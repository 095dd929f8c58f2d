//! Decode loop, operator control and the cued trial protocol.
//!
//! Every message on the session socket is a JSON object with a `type` tag.
//! The first server message is always `hello`, carrying [`SCHEMA_VERSION`].

use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actuator::{encode_command, spawn_actuator, AckResult, ActuatorCommand, ActuatorHandle, SimulatedPort};
use super::engine::{Engine, EngineConfig, Gate, GatedDecision};
use super::machine::{step_state_machine, Hand, HandMachine, Mode};
use super::meter::{decode_path_bytes, measure, DEFAULT_DEVICE_WATTS};
use super::queue::SampleQueue;
use super::source::{Pacer, SampleSource};
use super::RealtimeError;
use crate::boost::{evaluate_seeded, EvalReport, LatencyStats, Level};
use crate::dsp::{Label, TARGET_FS};
use crate::pipeline::Pipeline;

pub const SCHEMA_VERSION: &str = "1.0";

fn default_cue_s() -> f64 {
    4.0
}

fn default_rest_s() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetMode {
        mode: Mode,
    },
    StartProtocol {
        trials: usize,
        #[serde(default = "default_cue_s")]
        cue_s: f64,
        #[serde(default = "default_rest_s")]
        rest_s: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Aborts a running protocol.
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub cued: Label,
    pub decoded: Label,
    pub correct: bool,
    pub start_sample: usize,
    pub end_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub t_s: f64,
    pub samples: usize,
    pub mode: Mode,
    pub hand: Hand,
    pub label: Option<Label>,
    pub margin: Option<f64>,
    pub gate: Option<Gate>,
    pub latency_ms: Option<f64>,
    pub decisions: usize,
    pub accepted: usize,
    pub commands: u64,
    pub drops: u64,
    pub cue: Option<Label>,
    pub trial: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        schema_version: String,
        source: String,
        mode: Mode,
        sample_rate: f64,
        stride: usize,
        theta: f64,
        debounce: usize,
    },
    State(SessionSnapshot),
    Decision(GatedDecision),
    /// A command handed to the actuator.
    Command { seq: u64, line: String, t_s: f64 },
    Ack { seq: u64, ok: bool, code: Option<String> },
    Cue { trial: usize, label: Label, start_s: f64, duration_s: f64 },
    TrialResult(TrialRecord),
    Summary {
        aborted: bool,
        trials: Vec<TrialRecord>,
        tp_rate: f64,
        fp_rate: f64,
        report: Option<EvalReport>,
    },
    Error { message: String },
    /// Last message of a session.
    End { reason: String, stats: RunStats },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub samples: usize,
    pub decisions: usize,
    pub accepted: usize,
    pub commands: u64,
    pub drops: u64,
    pub latency: Option<LatencyStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTrial {
    pub label: Label,
    /// Cue window `[start, end)` in samples since session start.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub trials: Vec<ScheduledTrial>,
}

impl Schedule {
    /// Balanced shuffled cues (the odd one out is a move), each preceded by
    /// `rest_s` of uncued rest.
    pub fn randomized(n: usize, cue_s: f64, rest_s: f64, seed: u64, from: usize) -> Result<Self, RealtimeError> {
        if n == 0 {
            return Err(RealtimeError::EmptyInput);
        }
        if !(cue_s >= 1.0) || !(rest_s >= 0.0) || !cue_s.is_finite() || !rest_s.is_finite() {
            return Err(RealtimeError::Invalid("cue_s must be >= 1 s and rest_s >= 0".into()));
        }
        let mut labels: Vec<Label> = (0..n).map(|i| if i < n.div_ceil(2) { Label::Move } else { Label::Rest }).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cue = (cue_s * TARGET_FS).round() as usize;
        let rest = (rest_s * TARGET_FS).round() as usize;
        let trials = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let start = from + rest + i * (cue + rest);
                ScheduledTrial { label, start, end: start + cue }
            })
            .collect();
        Ok(Self { trials })
    }

    /// The first `n` labeled intervals that start at or after `from`.
    pub fn from_timeline(timeline: &[(Label, usize, usize)], n: usize, from: usize) -> Result<Self, RealtimeError> {
        if n == 0 {
            return Err(RealtimeError::EmptyInput);
        }
        let trials: Vec<ScheduledTrial> = timeline
            .iter()
            .filter(|t| t.1 >= from && t.2 > t.1)
            .take(n)
            .map(|&(label, start, end)| ScheduledTrial { label, start, end })
            .collect();
        if trials.is_empty() {
            return Err(RealtimeError::EmptyInput);
        }
        Ok(Self { trials })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub engine: EngineConfig,
    /// Consecutive agreeing decisions before a command.
    pub debounce: usize,
    pub mode: Mode,
    /// Full open/close cycle in passive mode.
    pub passive_period_s: f64,
    /// Samples between state messages (25 = 10 Hz at 250 Hz).
    pub state_every: usize,
    pub watts: f64,
    /// Process samples as fast as possible instead of at 250 Hz.
    pub max_speed: bool,
    pub queue_capacity: usize,
    pub report_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            debounce: 3,
            mode: Mode::Active,
            passive_period_s: 4.0,
            state_every: 25,
            watts: DEFAULT_DEVICE_WATTS,
            max_speed: false,
            queue_capacity: 2 * TARGET_FS as usize,
            report_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ProtocolRun {
    schedule: Schedule,
    next: usize,
    first_command: Option<Label>,
    ledger: Vec<TrialRecord>,
}

impl ProtocolRun {
    fn current(&self) -> Option<&ScheduledTrial> {
        self.schedule.trials.get(self.next)
    }
}

fn rates(ledger: &[TrialRecord]) -> (f64, f64) {
    let frac = |cued: Label| {
        let of: Vec<_> = ledger.iter().filter(|r| r.cued == cued).collect();
        if of.is_empty() {
            0.0
        } else {
            of.iter().filter(|r| r.decoded == Label::Move).count() as f64 / of.len() as f64
        }
    };
    (frac(Label::Move), frac(Label::Rest))
}

/// Decoder, debounce, actuator and protocol state for one participant.
#[derive(Debug)]
pub struct Session {
    engine: Engine,
    cfg: SessionConfig,
    machine: HandMachine,
    mode: Mode,
    actuator: ActuatorHandle,
    /// Posture last commanded to the actuator.
    posture_closed: bool,
    protocol: Option<ProtocolRun>,
    timeline: Option<Vec<(Label, usize, usize)>>,
    source_name: String,
    last: Option<GatedDecision>,
    latencies: Vec<f64>,
    cpu: Vec<f64>,
    accepted: usize,
    drops: u64,
    memory: usize,
}

impl Session {
    pub fn new(
        pipe: Pipeline,
        cfg: SessionConfig,
        actuator: ActuatorHandle,
        source_name: impl Into<String>,
        timeline: Option<Vec<(Label, usize, usize)>>,
    ) -> Result<Self, RealtimeError> {
        if cfg.debounce == 0 || cfg.state_every == 0 || !(cfg.passive_period_s > 0.0) {
            return Err(RealtimeError::Invalid("debounce, state_every and passive_period_s must be positive".into()));
        }
        let memory = decode_path_bytes(&pipe);
        Ok(Self {
            engine: Engine::new(pipe, cfg.engine)?,
            machine: HandMachine::default(),
            mode: cfg.mode,
            cfg,
            actuator,
            posture_closed: false,
            protocol: None,
            timeline,
            source_name: source_name.into(),
            last: None,
            latencies: Vec::new(),
            cpu: Vec::new(),
            accepted: 0,
            drops: 0,
            memory,
        })
    }

    /// Session with an in-process actuator that acknowledges after `delay`.
    pub fn simulated(
        pipe: Pipeline,
        cfg: SessionConfig,
        source: &dyn SampleSource,
        delay: Duration,
    ) -> Result<Self, RealtimeError> {
        let act = spawn_actuator(SimulatedPort::new(delay));
        Self::new(pipe, cfg, act, source.describe(), source.timeline())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn machine(&self) -> HandMachine {
        self.machine
    }

    pub fn samples(&self) -> usize {
        self.engine.samples_seen()
    }

    pub fn protocol_running(&self) -> bool {
        self.protocol.is_some()
    }

    /// The cue shown for the next sample.
    pub fn cue(&self) -> Option<Label> {
        let t = self.samples();
        let p = self.protocol.as_ref()?;
        let tr = p.current()?;
        (tr.start <= t && t < tr.end).then_some(tr.label)
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            schema_version: SCHEMA_VERSION.to_string(),
            source: self.source_name.clone(),
            mode: self.mode,
            sample_rate: TARGET_FS,
            stride: self.cfg.engine.stride,
            theta: self.cfg.engine.theta,
            debounce: self.cfg.debounce,
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let t = self.samples();
        SessionSnapshot {
            t_s: t as f64 / TARGET_FS,
            samples: t,
            mode: self.mode,
            hand: if self.actuator.in_flight() > 0 {
                Hand::Moving
            } else if self.posture_closed {
                Hand::Closed
            } else {
                Hand::Open
            },
            label: self.last.map(|d| d.raw_label),
            margin: self.last.map(|d| d.margin),
            gate: self.last.map(|d| d.gate),
            latency_ms: self.last.map(|d| d.latency_ms),
            decisions: self.latencies.len(),
            accepted: self.accepted,
            commands: self.actuator.last_seq(),
            drops: self.drops,
            cue: self.cue(),
            trial: self.protocol.as_ref().filter(|_| self.cue().is_some()).map(|p| p.next),
        }
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            samples: self.samples(),
            decisions: self.latencies.len(),
            accepted: self.accepted,
            commands: self.actuator.last_seq(),
            drops: self.drops,
            latency: measure(&self.latencies, &self.cpu, self.cfg.watts, self.memory).ok(),
        }
    }

    pub fn add_drops(&mut self, n: u64) {
        self.drops += n;
    }

    fn actuate(&mut self, cmd: ActuatorCommand, out: &mut Vec<ServerMessage>) -> Result<(), RealtimeError> {
        let seq = self.actuator.submit(cmd)?;
        self.posture_closed = cmd == ActuatorCommand::Close;
        out.push(ServerMessage::Command {
            seq,
            line: encode_command(&cmd, seq)?.trim_end().to_string(),
            t_s: self.samples() as f64 / TARGET_FS,
        });
        Ok(())
    }

    fn summary(&self, p: &ProtocolRun, aborted: bool) -> ServerMessage {
        let (tp_rate, fp_rate) = rates(&p.ledger);
        let decoded: Vec<Label> = p.ledger.iter().map(|r| r.decoded).collect();
        let cued: Vec<Label> = p.ledger.iter().map(|r| r.cued).collect();
        let report = evaluate_seeded(&decoded, &cued, Level::Window, None, self.cfg.report_seed).ok().map(|mut r| {
            r.level = Level::Trial;
            r.latency = measure(&self.latencies, &self.cpu, self.cfg.watts, self.memory).ok();
            r
        });
        ServerMessage::Summary { aborted, trials: p.ledger.clone(), tp_rate, fp_rate, report }
    }

    /// Applies one operator message.
    pub fn handle(&mut self, msg: ClientMessage, out: &mut Vec<ServerMessage>) {
        match msg {
            ClientMessage::SetMode { mode } => {
                if mode != self.mode {
                    self.mode = mode;
                    self.machine = HandMachine { closed: self.posture_closed, ..Default::default() };
                }
                out.push(ServerMessage::State(self.snapshot()));
            }
            ClientMessage::StartProtocol { trials, cue_s, rest_s, seed } => {
                if self.protocol.is_some() {
                    out.push(ServerMessage::Error { message: "a protocol is already running".into() });
                    return;
                }
                let from = self.samples();
                let schedule = match &self.timeline {
                    Some(tl) => Schedule::from_timeline(tl, trials, from),
                    None => Schedule::randomized(trials, cue_s, rest_s, seed, from),
                };
                match schedule {
                    Ok(schedule) => {
                        self.protocol = Some(ProtocolRun { schedule, next: 0, first_command: None, ledger: Vec::new() })
                    }
                    Err(e) => out.push(ServerMessage::Error { message: e.to_string() }),
                }
            }
            ClientMessage::Stop => {
                if let Some(p) = self.protocol.take() {
                    out.push(self.summary(&p, true));
                }
            }
        }
    }

    /// Processes one 12-channel frame.
    pub fn step(&mut self, frame: &[f64], arrival: Instant, out: &mut Vec<ServerMessage>) -> Result<(), RealtimeError> {
        let t = self.samples();
        if let Some(tr) = self.protocol.as_ref().and_then(|p| p.current()).copied() {
            if tr.start == t {
                out.push(ServerMessage::Cue {
                    trial: self.protocol.as_ref().map(|p| p.next).unwrap_or(0),
                    label: tr.label,
                    start_s: t as f64 / TARGET_FS,
                    duration_s: (tr.end - tr.start) as f64 / TARGET_FS,
                });
            }
        }
        if let Some(d) = self.engine.push_frame(frame, arrival)? {
            self.latencies.push(d.latency_ms);
            self.cpu.push(d.cpu_ms);
            self.accepted += d.accepted() as usize;
            self.last = Some(d);
            out.push(ServerMessage::Decision(d));
            if let Some(cmd) = step_state_machine(&mut self.machine, &d, self.cfg.debounce) {
                if let Some(p) = self.protocol.as_mut() {
                    if let Some(tr) = p.current() {
                        if tr.start < d.end_sample && d.end_sample <= tr.end && p.first_command.is_none() {
                            p.first_command = Some(if cmd == ActuatorCommand::Close { Label::Move } else { Label::Rest });
                        }
                    }
                }
                if self.mode == Mode::Active && (cmd == ActuatorCommand::Close) != self.posture_closed {
                    self.actuate(cmd, out)?;
                }
            }
        }
        let now = t + 1;
        if self.mode == Mode::Passive {
            let half = ((self.cfg.passive_period_s * TARGET_FS / 2.0).round() as usize).max(1);
            if now % half == 0 {
                let cmd = if self.posture_closed { ActuatorCommand::Open } else { ActuatorCommand::Close };
                self.actuate(cmd, out)?;
            }
        }
        for ev in self.actuator.poll() {
            let (ok, code) = match ev.result {
                Ok(ack) => match ack.result {
                    AckResult::Ok => (true, None),
                    AckResult::Err(c) => (false, Some(c)),
                },
                Err(e) => (false, Some(e.to_string())),
            };
            out.push(ServerMessage::Ack { seq: ev.seq, ok, code });
        }
        let finished = match self.protocol.as_mut() {
            Some(p) => match p.current().copied() {
                Some(tr) if tr.end == now => {
                    let decoded = match p.first_command.take() {
                        Some(l) => l,
                        None if self.machine.closed => Label::Move,
                        None => Label::Rest,
                    };
                    let rec = TrialRecord {
                        trial: p.next,
                        cued: tr.label,
                        decoded,
                        correct: decoded == tr.label,
                        start_sample: tr.start,
                        end_sample: tr.end,
                    };
                    p.ledger.push(rec.clone());
                    p.next += 1;
                    out.push(ServerMessage::TrialResult(rec));
                    p.current().is_none()
                }
                Some(_) => false,
                None => true,
            },
            None => false,
        };
        if finished {
            let p = self.protocol.take().expect("protocol present");
            out.push(self.summary(&p, false));
        }
        if now % self.cfg.state_every == 0 {
            out.push(ServerMessage::State(self.snapshot()));
        }
        Ok(())
    }

    /// Waits for outstanding acknowledgements.
    pub fn flush_actuator(&mut self, out: &mut Vec<ServerMessage>) {
        for ev in self.actuator.drain() {
            let ok = matches!(&ev.result, Ok(a) if a.result == AckResult::Ok);
            let code = match ev.result {
                Ok(a) => match a.result {
                    AckResult::Ok => None,
                    AckResult::Err(c) => Some(c),
                },
                Err(e) => Some(e.to_string()),
            };
            out.push(ServerMessage::Ack { seq: ev.seq, ok, code });
        }
    }

    /// Runs until the source ends or `stop` is set. Paced runs read frames
    /// from a producer thread through a bounded queue; max-speed runs pull
    /// frames inline. Control messages are applied between frames.
    pub fn run(
        &mut self,
        mut source: Box<dyn SampleSource>,
        control: &Receiver<ClientMessage>,
        stop: &AtomicBool,
        emit: &mut dyn FnMut(&ServerMessage),
    ) -> Result<RunStats, RealtimeError> {
        emit(&self.hello());
        let mut out = Vec::new();
        let flush = |out: &mut Vec<ServerMessage>, emit: &mut dyn FnMut(&ServerMessage)| {
            out.drain(..).for_each(|m| emit(&m));
        };
        let reason;
        if self.cfg.max_speed {
            loop {
                if stop.load(Ordering::Relaxed) {
                    reason = "stopped";
                    break;
                }
                for msg in control.try_iter() {
                    self.handle(msg, &mut out);
                }
                let Some(frame) = source.next_frame(self.cue()) else {
                    reason = "source ended";
                    break;
                };
                self.step(&frame, Instant::now(), &mut out)?;
                flush(&mut out, emit);
            }
        } else {
            let queue = Arc::new(SampleQueue::new(self.cfg.queue_capacity));
            let cue = Arc::new(AtomicU8::new(0));
            let halt = Arc::new(AtomicBool::new(false));
            let producer = {
                let (queue, cue, halt) = (queue.clone(), cue.clone(), halt.clone());
                std::thread::spawn(move || {
                    let pacer = Pacer::new(TARGET_FS);
                    let mut n = 0;
                    while !halt.load(Ordering::Relaxed) {
                        pacer.wait_for(n);
                        let c = match cue.load(Ordering::Relaxed) {
                            1 => Some(Label::Rest),
                            2 => Some(Label::Move),
                            _ => None,
                        };
                        match source.next_frame(c) {
                            Some(f) => queue.push(f, Instant::now()),
                            None => break,
                        }
                        n += 1;
                    }
                    queue.close();
                })
            };
            let mut seen_drops = 0;
            let result = loop {
                if stop.load(Ordering::Relaxed) {
                    break Ok("stopped");
                }
                for msg in control.try_iter() {
                    self.handle(msg, &mut out);
                }
                let Some(batch) = queue.pop_all(Duration::from_millis(20)) else {
                    break Ok("source ended");
                };
                let d = queue.drops();
                self.add_drops(d - seen_drops);
                seen_drops = d;
                let mut err = None;
                for (frame, arrival) in batch {
                    if let Err(e) = self.step(&frame, arrival, &mut out) {
                        err = Some(e);
                        break;
                    }
                    let c = match self.cue() {
                        None => 0,
                        Some(Label::Rest) => 1,
                        Some(Label::Move) => 2,
                    };
                    cue.store(c, Ordering::Relaxed);
                }
                flush(&mut out, emit);
                if let Some(e) = err {
                    break Err(e);
                }
            };
            halt.store(true, Ordering::Relaxed);
            let _ = producer.join();
            reason = result?;
        }
        if let Some(p) = self.protocol.take() {
            out.push(self.summary(&p, true));
        }
        self.flush_actuator(&mut out);
        let stats = self.stats();
        out.push(ServerMessage::End { reason: reason.to_string(), stats: stats.clone() });
        flush(&mut out, emit);
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub ledger: Vec<TrialRecord>,
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub report: EvalReport,
    pub latency: LatencyStats,
    /// Actuator lines in the order they were sent.
    pub commands: Vec<String>,
}

/// Runs a cued protocol headless at full speed against a simulated
/// actuator. Setting `stop` aborts with the partial ledger.
pub fn run_trial_protocol(
    pipe: &Pipeline,
    source: &mut dyn SampleSource,
    trials: usize,
    cue_s: f64,
    rest_s: f64,
    seed: u64,
    cfg: &SessionConfig,
    stop: Option<&AtomicBool>,
) -> Result<ProtocolOutcome, RealtimeError> {
    if trials == 0 {
        return Err(RealtimeError::EmptyInput);
    }
    let mut s = Session::simulated(pipe.clone(), *cfg, source, Duration::ZERO)?;
    let mut out = Vec::new();
    s.handle(ClientMessage::StartProtocol { trials, cue_s, rest_s, seed }, &mut out);
    if let Some(ServerMessage::Error { message }) = out.first() {
        return Err(RealtimeError::Invalid(message.clone()));
    }
    let mut commands = Vec::new();
    let mut partial = Vec::new();
    loop {
        if stop.is_some_and(|f| f.load(Ordering::Relaxed)) {
            s.handle(ClientMessage::Stop, &mut out);
            return Err(RealtimeError::Aborted { ledger: partial });
        }
        let Some(frame) = source.next_frame(s.cue()) else {
            return Err(RealtimeError::Aborted { ledger: partial });
        };
        out.clear();
        s.step(&frame, Instant::now(), &mut out)?;
        for m in out.drain(..) {
            match m {
                ServerMessage::Command { line, .. } => commands.push(line),
                ServerMessage::TrialResult(r) => partial.push(r),
                ServerMessage::Summary { trials, tp_rate, fp_rate, report, .. } => {
                    let mut tail = Vec::new();
                    s.flush_actuator(&mut tail);
                    let report = report.ok_or(RealtimeError::EmptyInput)?;
                    let latency = report.latency.clone().ok_or(RealtimeError::EmptyTrace)?;
                    return Ok(ProtocolOutcome { ledger: trials, tp_rate, fp_rate, report, latency, commands });
                }
                _ => {}
            }
        }
    }
}
