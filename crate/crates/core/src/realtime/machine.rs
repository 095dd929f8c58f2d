use serde::{Deserialize, Serialize};

use super::actuator::ActuatorCommand;
use super::engine::GatedDecision;
use crate::dsp::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Active,
    Passive,
    Idle,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(Mode::Active),
            "passive" => Ok(Mode::Passive),
            "idle" => Ok(Mode::Idle),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Open,
    Closed,
    /// A command is in flight and not yet acknowledged.
    Moving,
}

/// Debounce counters and the commanded hand posture. Streaks saturate at
/// `k`, which keeps the state space finite without changing behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HandMachine {
    pub closed: bool,
    pub move_streak: usize,
    pub rest_streak: usize,
}

impl Default for HandMachine {
    fn default() -> Self {
        Self { closed: false, move_streak: 0, rest_streak: 0 }
    }
}

impl HandMachine {
    pub fn hand(&self) -> Hand {
        if self.closed {
            Hand::Closed
        } else {
            Hand::Open
        }
    }
}

/// Advances the debounce counters with one decision. Only accepted
/// decisions move the counters; gated ones freeze both. At most one command
/// is returned, and only when it changes the posture.
pub fn step_state_machine(m: &mut HandMachine, d: &GatedDecision, k: usize) -> Option<ActuatorCommand> {
    let k = k.max(1);
    if !d.accepted() {
        return None;
    }
    match d.raw_label {
        Label::Move => {
            m.move_streak = (m.move_streak + 1).min(k);
            m.rest_streak = 0;
            if m.move_streak >= k && !m.closed {
                m.closed = true;
                return Some(ActuatorCommand::Close);
            }
        }
        Label::Rest => {
            m.rest_streak = (m.rest_streak + 1).min(k);
            m.move_streak = 0;
            if m.rest_streak >= k && m.closed {
                m.closed = false;
                return Some(ActuatorCommand::Open);
            }
        }
    }
    None
}
