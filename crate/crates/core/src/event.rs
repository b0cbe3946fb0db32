//! The event journal: a sequence-numbered, tick-stamped record of every
//! state change in a run.
//!
//! Every module writes into the same [`Journal`], so the log order is the
//! true causal order inside the tick loop. Payloads are canonical JSON:
//! object keys are always sorted, so identical runs produce byte-identical
//! lines.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::Observation;
use crate::digest::RollingDigest;
use crate::ids::Tick;

/// Module that produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Machine,
    Ports,
    Isolation,
    Console,
    Detector,
    Netid,
    Guests,
    Simrun,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Source::Machine => "machine",
            Source::Ports => "ports",
            Source::Isolation => "isolation",
            Source::Console => "console",
            Source::Detector => "detector",
            Source::Netid => "netid",
            Source::Guests => "guests",
            Source::Simrun => "simrun",
        };
        f.write_str(s)
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub tick: Tick,
    pub source: Source,
    pub kind: String,
    pub payload: Value,
}

impl EventRecord {
    /// The canonical JSON Lines encoding of this record (no trailing newline).
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }

    pub fn field(&self, key: &str) -> Option<&Value> {
        self.payload.get(key)
    }

    pub fn u64_field(&self, key: &str) -> Option<u64> {
        self.field(key).and_then(Value::as_u64)
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.field(key).and_then(Value::as_str)
    }
}

/// Append-only event log plus the pending detector observation queue.
#[derive(Debug, Default)]
pub struct Journal {
    tick: Tick,
    records: Vec<EventRecord>,
    observations: VecDeque<Observation>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Tick {
        self.tick
    }

    pub fn set_tick(&mut self, tick: Tick) {
        debug_assert!(tick >= self.tick, "time never runs backwards");
        self.tick = tick;
    }

    /// Appends an event and returns its sequence number.
    pub fn emit<P: Serialize>(&mut self, source: Source, kind: &str, payload: P) -> u64 {
        let seq = self.records.len() as u64;
        let payload = serde_json::to_value(payload).expect("event payloads always serialize");
        self.records.push(EventRecord { seq, tick: self.tick, source, kind: kind.to_owned(), payload });
        seq
    }

    /// Queues an observation for asynchronous delivery to the detectors.
    pub fn observe(&mut self, obs: Observation) {
        self.observations.push_back(obs);
    }

    pub fn take_observation(&mut self) -> Option<Observation> {
        self.observations.pop_front()
    }

    pub fn pending_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of a given kind, in log order.
    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a EventRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.of_kind(kind).count()
    }

    /// The whole log in JSON Lines form, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the JSON Lines encoding.
    pub fn digest(&self) -> String {
        log_digest(&self.records)
    }
}

/// SHA-256 over the JSON Lines encoding of `records`.
pub fn log_digest(records: &[EventRecord]) -> String {
    let mut d = RollingDigest::new();
    for r in records {
        d.update(r.to_line().as_bytes());
        d.update(b"\n");
    }
    d.finish_hex()
}

/// Parses a JSON Lines event log.
pub fn parse_jsonl(text: &str) -> Result<Vec<EventRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
