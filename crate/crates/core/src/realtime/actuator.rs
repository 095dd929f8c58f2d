//! ASCII line protocol to the hand controller.
//!
//! ```text
//! OPEN <seq>\n | CLOSE <seq>\n | SET <seq> <a1> .. <a5>\n
//! ACK <seq>\n  | ERR <seq> <code>\n
//! ```

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RealtimeError;

/// Finger range of motion in degrees.
pub const MAX_ANGLE: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", content = "angles", rename_all = "UPPERCASE")]
pub enum ActuatorCommand {
    Open,
    Close,
    Set([f64; 5]),
}

pub fn encode_command(cmd: &ActuatorCommand, seq: u64) -> Result<String, RealtimeError> {
    Ok(match cmd {
        ActuatorCommand::Open => format!("OPEN {seq}\n"),
        ActuatorCommand::Close => format!("CLOSE {seq}\n"),
        ActuatorCommand::Set(angles) => {
            if let Some(a) = angles.iter().find(|a| !(0.0..=MAX_ANGLE).contains(*a)) {
                return Err(RealtimeError::AngleOutOfRange(*a));
            }
            let parts: Vec<String> = angles.iter().map(|a| a.to_string()).collect();
            format!("SET {seq} {}\n", parts.join(" "))
        }
    })
}

pub fn parse_command(line: &str) -> Result<(ActuatorCommand, u64), RealtimeError> {
    let bad = || RealtimeError::MalformedCommand(line.to_string());
    let body = line.strip_suffix('\n').ok_or_else(bad)?;
    let mut parts = body.split(' ');
    let verb = parts.next().ok_or_else(bad)?;
    let seq: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let rest: Vec<&str> = parts.collect();
    let cmd = match (verb, rest.len()) {
        ("OPEN", 0) => ActuatorCommand::Open,
        ("CLOSE", 0) => ActuatorCommand::Close,
        ("SET", 5) => {
            let mut angles = [0.0; 5];
            for (a, s) in angles.iter_mut().zip(&rest) {
                *a = s.parse().map_err(|_| bad())?;
            }
            if let Some(a) = angles.iter().find(|a| !(0.0..=MAX_ANGLE).contains(*a)) {
                return Err(RealtimeError::AngleOutOfRange(*a));
            }
            ActuatorCommand::Set(angles)
        }
        _ => return Err(bad()),
    };
    Ok((cmd, seq))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AckResult {
    Ok,
    Err(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub seq: u64,
    pub result: AckResult,
}

pub fn parse_ack(line: &str) -> Result<Ack, RealtimeError> {
    let bad = || RealtimeError::MalformedAck(line.to_string());
    let body = line.strip_suffix('\n').ok_or_else(bad)?;
    let parts: Vec<&str> = body.split(' ').collect();
    match parts.as_slice() {
        ["ACK", seq] => Ok(Ack { seq: seq.parse().map_err(|_| bad())?, result: AckResult::Ok }),
        ["ERR", seq, code] if !code.is_empty() => {
            Ok(Ack { seq: seq.parse().map_err(|_| bad())?, result: AckResult::Err(code.to_string()) })
        }
        _ => Err(bad()),
    }
}

/// In-process controller: answers each well-formed command with `ACK` after
/// `delay`, malformed lines with `ERR <seq|0> <code>`.
#[derive(Debug, Clone)]
pub struct SimulatedEndpoint {
    pub delay: Duration,
    pub posture: [f64; 5],
    pub log: Vec<String>,
}

impl SimulatedEndpoint {
    pub fn new(delay: Duration) -> Self {
        Self { delay, posture: [0.0; 5], log: Vec::new() }
    }

    pub fn handle(&mut self, line: &str) -> String {
        self.log.push(line.to_string());
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        match parse_command(line) {
            Ok((cmd, seq)) => {
                self.posture = match cmd {
                    ActuatorCommand::Open => [0.0; 5],
                    ActuatorCommand::Close => [MAX_ANGLE; 5],
                    ActuatorCommand::Set(a) => a,
                };
                format!("ACK {seq}\n")
            }
            Err(RealtimeError::AngleOutOfRange(_)) => {
                let seq = line.split(' ').nth(1).and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
                format!("ERR {seq} range\n")
            }
            Err(_) => "ERR 0 parse\n".to_string(),
        }
    }
}

/// Byte-stream face of [`SimulatedEndpoint`]: written lines are answered
/// into the read side.
#[derive(Debug)]
pub struct SimulatedPort {
    pub endpoint: SimulatedEndpoint,
    pending: Vec<u8>,
    replies: VecDeque<u8>,
}

impl SimulatedPort {
    pub fn new(delay: Duration) -> Self {
        Self { endpoint: SimulatedEndpoint::new(delay), pending: Vec::new(), replies: VecDeque::new() }
    }
}

impl Write for SimulatedPort {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        for &b in buf {
            self.pending.push(b);
            if b == b'\n' {
                let line = String::from_utf8_lossy(&self.pending).into_owned();
                self.pending.clear();
                let reply = self.endpoint.handle(&line);
                self.replies.extend(reply.as_bytes());
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for SimulatedPort {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = buf.len().min(self.replies.len());
        for (dst, src) in buf.iter_mut().zip(self.replies.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

/// Sequenced request/acknowledge over any byte stream.
#[derive(Debug)]
pub struct ActuatorLink<S: Read + Write> {
    reader: BufReader<S>,
    next_seq: u64,
}

impl<S: Read + Write> ActuatorLink<S> {
    pub fn new(stream: S) -> Self {
        Self { reader: BufReader::new(stream), next_seq: 1 }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Sends one command and waits for its reply line. The sequence number
    /// advances even when the controller rejects the command.
    pub fn send(&mut self, cmd: &ActuatorCommand) -> Result<Ack, RealtimeError> {
        let seq = self.next_seq;
        let line = encode_command(cmd, seq)?;
        self.next_seq += 1;
        let stream = self.reader.get_mut();
        stream.write_all(line.as_bytes())?;
        stream.flush()?;
        let mut reply = String::new();
        self.reader.read_line(&mut reply)?;
        let ack = parse_ack(&reply)?;
        match &ack.result {
            AckResult::Ok if ack.seq != seq => Err(RealtimeError::SeqMismatch { sent: seq, got: ack.seq }),
            AckResult::Ok => Ok(ack),
            AckResult::Err(code) => Err(RealtimeError::Rejected { seq, code: code.clone() }),
        }
    }

    pub fn into_inner(self) -> S {
        self.reader.into_inner()
    }
}

/// Outcome of one command sent by the actuator thread.
#[derive(Debug)]
pub struct ActuatorEvent {
    pub command: ActuatorCommand,
    pub seq: u64,
    pub result: Result<Ack, RealtimeError>,
}

/// Single owner of the link, running on its own thread so waiting for an
/// acknowledgement never stalls decoding.
#[derive(Debug)]
pub struct ActuatorHandle {
    tx: Option<Sender<(ActuatorCommand, u64)>>,
    rx: Receiver<ActuatorEvent>,
    thread: Option<JoinHandle<()>>,
    next_seq: u64,
    in_flight: usize,
}

pub fn spawn_actuator<S: Read + Write + Send + 'static>(stream: S) -> ActuatorHandle {
    let (tx, cmd_rx) = mpsc::channel::<(ActuatorCommand, u64)>();
    let (ev_tx, rx) = mpsc::channel();
    let thread = std::thread::spawn(move || {
        let mut link = ActuatorLink::new(stream);
        for (command, seq) in cmd_rx {
            debug_assert_eq!(seq, link.next_seq());
            let result = link.send(&command);
            if ev_tx.send(ActuatorEvent { command, seq, result }).is_err() {
                break;
            }
        }
    });
    ActuatorHandle { tx: Some(tx), rx, thread: Some(thread), next_seq: 1, in_flight: 0 }
}

impl ActuatorHandle {
    /// Queues a command and returns the sequence number it will carry.
    pub fn submit(&mut self, cmd: ActuatorCommand) -> Result<u64, RealtimeError> {
        encode_command(&cmd, self.next_seq)?;
        let seq = self.next_seq;
        self.tx
            .as_ref()
            .expect("actuator running")
            .send((cmd, seq))
            .map_err(|_| RealtimeError::Invalid("actuator thread stopped".into()))?;
        self.next_seq += 1;
        self.in_flight += 1;
        Ok(seq)
    }

    /// Completed commands since the last poll.
    pub fn poll(&mut self) -> Vec<ActuatorEvent> {
        let out: Vec<ActuatorEvent> = self.rx.try_iter().collect();
        self.in_flight -= out.len();
        out
    }

    /// Blocks until every queued command has been answered.
    pub fn drain(&mut self) -> Vec<ActuatorEvent> {
        let mut out = Vec::new();
        while self.in_flight > 0 {
            match self.rx.recv() {
                Ok(ev) => {
                    self.in_flight -= 1;
                    out.push(ev);
                }
                Err(_) => break,
            }
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }
}

impl Drop for ActuatorHandle {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodings() {
        assert_eq!(encode_command(&ActuatorCommand::Close, 7).unwrap(), "CLOSE 7\n");
        assert_eq!(encode_command(&ActuatorCommand::Open, 1).unwrap(), "OPEN 1\n");
        assert_eq!(encode_command(&ActuatorCommand::Set([0.0; 5]), 8).unwrap(), "SET 8 0 0 0 0 0\n");
        assert_eq!(
            encode_command(&ActuatorCommand::Set([0.0, 30.5, 60.0, 90.0, 120.0]), 9).unwrap(),
            "SET 9 0 30.5 60 90 120\n"
        );
        assert!(matches!(
            encode_command(&ActuatorCommand::Set([0.0, 0.0, 130.0, 0.0, 0.0]), 8),
            Err(RealtimeError::AngleOutOfRange(a)) if a == 130.0
        ));
        assert!(encode_command(&ActuatorCommand::Set([-1.0, 0.0, 0.0, 0.0, 0.0]), 8).is_err());
    }

    #[test]
    fn command_round_trip() {
        for cmd in [ActuatorCommand::Open, ActuatorCommand::Close, ActuatorCommand::Set([1.0, 2.5, 3.0, 4.0, 120.0])] {
            let line = encode_command(&cmd, 42).unwrap();
            assert_eq!(parse_command(&line).unwrap(), (cmd, 42));
        }
        assert!(parse_command("OPEN 1").is_err());
        assert!(parse_command("SET 1 0 0\n").is_err());
    }

    #[test]
    fn ack_parsing() {
        assert_eq!(parse_ack("ACK 7\n").unwrap(), Ack { seq: 7, result: AckResult::Ok });
        assert_eq!(parse_ack("ERR 7 range\n").unwrap(), Ack { seq: 7, result: AckResult::Err("range".into()) });
        for bad in ["ACK\n", "ACK 7", "ACK x\n", "NAK 7\n", "ERR 7\n", "ACK 7 8\n", ""] {
            assert!(matches!(parse_ack(bad), Err(RealtimeError::MalformedAck(_))), "{bad:?}");
        }
    }

    #[test]
    fn link_against_simulated_port() {
        let mut link = ActuatorLink::new(SimulatedPort::new(Duration::ZERO));
        assert_eq!(link.send(&ActuatorCommand::Close).unwrap().seq, 1);
        assert_eq!(link.send(&ActuatorCommand::Set([10.0; 5])).unwrap().seq, 2);
        assert!(link.send(&ActuatorCommand::Set([121.0; 5])).is_err());
        let port = link.into_inner();
        assert_eq!(port.endpoint.log, vec!["CLOSE 1\n", "SET 2 10 10 10 10 10\n"]);
        assert_eq!(port.endpoint.posture, [10.0; 5]);
    }

    #[test]
    fn threaded_handle_keeps_order() {
        let mut h = spawn_actuator(SimulatedPort::new(Duration::from_millis(1)));
        for cmd in [ActuatorCommand::Close, ActuatorCommand::Open, ActuatorCommand::Close] {
            h.submit(cmd).unwrap();
        }
        let seqs: Vec<u64> = h.drain().iter().map(|e| e.result.as_ref().unwrap().seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(h.in_flight(), 0);
    }
}
