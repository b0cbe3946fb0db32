use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::deploy::Deployment;
use super::scenario::{Command, Scenario};
use crate::event::{log_digest, EventRecord};
use crate::ids::Tick;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("first record is {0:?}, not run_start")]
    NoHeader(String),
    #[error("run_start header is malformed: {0}")]
    BadHeader(String),
    #[error("client command at seq {seq} is malformed: {reason}")]
    BadCommand { seq: u64, reason: String },
    #[error(transparent)]
    Scenario(#[from] super::scenario::ScenarioError),
}

/// Result of re-executing a log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayOutcome {
    pub matched: bool,
    /// Records compared.
    pub compared: usize,
    /// Sequence number of the first record that differs.
    pub first_divergence: Option<u64>,
    pub original_digest: String,
    pub replay_digest: String,
    pub original_len: usize,
    pub replay_len: usize,
}

/// Rebuilds the deployment a log describes and re-runs it. Scenario and
/// seed come from the `run_start` header; client commands are re-injected
/// at the ticks the log recorded them.
pub fn replay(records: &[EventRecord]) -> Result<(Deployment, ReplayOutcome), ReplayError> {
    let head = records.first().ok_or(ReplayError::Empty)?;
    if head.kind != "run_start" {
        return Err(ReplayError::NoHeader(head.kind.clone()));
    }
    let scenario: Scenario = head
        .field("scenario")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| ReplayError::BadHeader(e.to_string()))?
        .ok_or_else(|| ReplayError::BadHeader("missing scenario".into()))?;
    let seed = head.u64_field("seed").ok_or_else(|| ReplayError::BadHeader("missing seed".into()))?;

    let mut client: BTreeMap<Tick, Vec<Command>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == "command" && r.str_field("origin") == Some("client")) {
        let cmd = r
            .field("command")
            .cloned()
            .map(serde_json::from_value::<Command>)
            .transpose()
            .map_err(|e| ReplayError::BadCommand { seq: r.seq, reason: e.to_string() })?
            .ok_or_else(|| ReplayError::BadCommand { seq: r.seq, reason: "missing command".into() })?;
        client.entry(r.tick).or_default().push(cmd);
    }

    let end = records.iter().rev().find(|r| r.kind == "run_end");
    let until = match end {
        Some(e) => e.u64_field("final_tick").ok_or_else(|| ReplayError::BadHeader("run_end lacks final_tick".into()))?,
        None => records.last().map_or(0, |r| r.tick + 1),
    };

    let mut d = Deployment::new(&scenario, seed)?;
    while d.tick() < until {
        for cmd in client.remove(&d.tick()).unwrap_or_default() {
            d.enqueue(cmd);
        }
        d.step();
    }
    if end.is_some() {
        d.finish();
    }

    let replayed = d.journal().records();
    let compared = if end.is_some() { records.len().max(replayed.len()) } else { records.len() };
    let first_divergence =
        (0..compared).find(|&i| records.get(i) != replayed.get(i)).map(|i| records.get(i).or(replayed.get(i)).map_or(i as u64, |r| r.seq));
    let outcome = ReplayOutcome {
        matched: first_divergence.is_none(),
        compared,
        first_divergence,
        original_digest: log_digest(records),
        replay_digest: log_digest(&replayed[..records.len().min(replayed.len())]),
        original_len: records.len(),
        replay_len: replayed.len(),
    };
    Ok((d, outcome))
}
