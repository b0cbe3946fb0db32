//! The misbehavior-detector boundary.
//!
//! The hypervisor hands [`Observation`]s to a set of black-box
//! [`DetectorPlugin`]s and acts on the [`Verdict`]s they return. Port
//! traffic is screened synchronously inside the broker path, so a verdict
//! can still rewrite or block a message before delivery. Faults, interrupt
//! floods and snapshots are queued on the journal and screened once per
//! tick.
//!
//! Verdicts can only push a deployment toward stricter isolation. A plugin
//! that panics or returns an error is treated as an alarm to `Offline`.

mod plugins;

use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::event::{Journal, Source};
use crate::ids::{CoreId, ModelId, PortId, Tick};
use crate::isolation::IsolationLevel;
use crate::machine::{Machine, MachineError, RegionKind};

pub use plugins::{
    build_plugin, FaultMonitor, InputShield, OutputSanitizer, PluginConfig, PluginDefaults, RateMonitor, SnapshotAuditor, Tripwire,
};

/// Observations carry at most this many payload bytes.
pub const OBSERVATION_PAYLOAD_CAP: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    PortIngress,
    PortEgress,
    MmuFault,
    BusFault,
    InterruptFlood,
    MemorySnapshotDigest,
    RegisterSnapshot,
    WatchpointHit,
    /// A port-level rejection: revoked or forged capability, restricted
    /// operation, or a refused network peer.
    PortFault,
}

impl ObservationKind {
    pub const ALL: [ObservationKind; 9] = [
        ObservationKind::PortIngress,
        ObservationKind::PortEgress,
        ObservationKind::MmuFault,
        ObservationKind::BusFault,
        ObservationKind::InterruptFlood,
        ObservationKind::MemorySnapshotDigest,
        ObservationKind::RegisterSnapshot,
        ObservationKind::WatchpointHit,
        ObservationKind::PortFault,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Subject {
    Model(ModelId),
    Core(CoreId),
    Port(PortId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub tick: Tick,
    pub subject: Subject,
    /// Leading bytes of the observed data, capped at
    /// [`OBSERVATION_PAYLOAD_CAP`].
    pub payload: Vec<u8>,
    pub truncated: bool,
    /// Digest of the complete observed data.
    pub digest: String,
}

impl Observation {
    pub fn new(kind: ObservationKind, tick: Tick, subject: Subject, data: &[u8]) -> Self {
        let truncated = data.len() > OBSERVATION_PAYLOAD_CAP;
        Self { kind, tick, subject, payload: data[..data.len().min(OBSERVATION_PAYLOAD_CAP)].to_vec(), truncated, digest: sha256_hex(data) }
    }

    pub fn payload_text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum VerdictAction {
    NoAction,
    Sanitize { replacement: Vec<u8> },
    BlockRequest,
    Alarm { target: IsolationLevel },
    HaltAndInspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(flatten)]
    pub action: VerdictAction,
    pub reason: String,
}

impl Verdict {
    pub fn no_action() -> Self {
        Self { action: VerdictAction::NoAction, reason: String::new() }
    }

    pub fn new(action: VerdictAction, reason: impl Into<String>) -> Self {
        Self { action, reason: reason.into() }
    }

    fn label(&self) -> &'static str {
        match self.action {
            VerdictAction::NoAction => "no_action",
            VerdictAction::Sanitize { .. } => "sanitize",
            VerdictAction::BlockRequest => "block_request",
            VerdictAction::Alarm { .. } => "alarm",
            VerdictAction::HaltAndInspect => "halt_and_inspect",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectorError {
    #[error("plugin failure: {0}")]
    PluginFailure(String),
    #[error("unknown detector plugin {0:?}")]
    UnknownPlugin(String),
    #[error("bad parameters for plugin {plugin:?}: {reason}")]
    BadParams { plugin: String, reason: String },
}

/// A black-box detector.
///
/// Implementations must be deterministic: the same sequence of
/// observations always yields the same verdicts.
pub trait DetectorPlugin: Send {
    fn name(&self) -> &str;
    fn subscriptions(&self) -> &[ObservationKind];
    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError>;
}

/// A verdict that must be acted on outside the screening call site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Escalation {
    pub plugin: String,
    pub subject: Subject,
    pub verdict: Verdict,
}

/// Outcome of synchronously screening one port message.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Screening {
    /// Rewritten payload when a plugin sanitized the message.
    pub replacement: Option<Vec<u8>>,
    /// Set when a plugin blocked the message.
    pub blocked: Option<String>,
    pub escalations: Vec<Escalation>,
}

struct Slot {
    plugin: Box<dyn DetectorPlugin>,
    failed: bool,
}

/// All configured detector plugins, consulted in configuration order.
#[derive(Default)]
pub struct DetectorBank {
    slots: Vec<Slot>,
}

impl DetectorBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_plugins(plugins: Vec<Box<dyn DetectorPlugin>>) -> Self {
        Self { slots: plugins.into_iter().map(|plugin| Slot { plugin, failed: false }).collect() }
    }

    pub fn add(&mut self, plugin: Box<dyn DetectorPlugin>) {
        self.slots.push(Slot { plugin, failed: false });
    }

    pub fn plugin_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.plugin.name().to_owned()).collect()
    }

    /// Whether any plugin consumes observations of `kind`.
    pub fn consumes(&self, kind: ObservationKind) -> bool {
        self.slots.iter().any(|s| s.plugin.subscriptions().contains(&kind))
    }

    /// Runs every subscribed plugin on `obs` and returns their non-trivial
    /// verdicts. Alarms that would not raise the level above `level` are
    /// dropped; plugin failures become alarms to `Offline`.
    pub fn observe(&mut self, journal: &mut Journal, obs: &Observation, level: IsolationLevel) -> Vec<(String, Verdict)> {
        self.slots.iter_mut().filter_map(|slot| run_slot(slot, journal, obs, level)).collect()
    }

    /// Synchronous screening of a port message. Sanitizations chain: each
    /// later plugin sees the payload as rewritten by earlier ones.
    pub fn screen(&mut self, journal: &mut Journal, obs: &Observation, level: IsolationLevel) -> Screening {
        let mut screening = Screening::default();
        let mut current = obs.clone();
        for slot in &mut self.slots {
            let Some((plugin, verdict)) = run_slot(slot, journal, &current, level) else {
                continue;
            };
            match verdict.action {
                VerdictAction::Sanitize { replacement } => {
                    current = Observation::new(obs.kind, obs.tick, obs.subject, &replacement);
                    screening.replacement = Some(replacement);
                }
                VerdictAction::BlockRequest => {
                    screening.blocked.get_or_insert(format!("{plugin}: {}", verdict.reason));
                }
                VerdictAction::Alarm { .. } | VerdictAction::HaltAndInspect => {
                    screening.escalations.push(Escalation { plugin, subject: obs.subject, verdict });
                }
                VerdictAction::NoAction => {}
            }
        }
        screening
    }

    /// Asynchronous screening: only escalating verdicts are meaningful.
    pub fn screen_async(&mut self, journal: &mut Journal, obs: &Observation, level: IsolationLevel) -> Vec<Escalation> {
        self.observe(journal, obs, level)
            .into_iter()
            .filter_map(|(plugin, verdict)| match verdict.action {
                VerdictAction::Alarm { .. } | VerdictAction::HaltAndInspect => Some(Escalation { plugin, subject: obs.subject, verdict }),
                _ => None,
            })
            .collect()
    }
}

fn run_slot(slot: &mut Slot, journal: &mut Journal, obs: &Observation, level: IsolationLevel) -> Option<(String, Verdict)> {
    if slot.failed || !slot.plugin.subscriptions().contains(&obs.kind) {
        return None;
    }
    let name = slot.plugin.name().to_owned();
    let verdict = match catch_unwind(AssertUnwindSafe(|| slot.plugin.observe(obs))) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => {
            slot.failed = true;
            fail_closed(&name, &e.to_string())
        }
        Err(panic) => {
            slot.failed = true;
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_owned());
            fail_closed(&name, &msg)
        }
    };
    if slot.failed {
        journal.emit(Source::Detector, "plugin_failure", json!({"plugin": name, "observation": obs.kind, "reason": verdict.reason}));
    }
    if let VerdictAction::Alarm { target } = verdict.action {
        if target <= level {
            journal.emit(
                Source::Detector,
                "alarm_dropped",
                json!({
                    "plugin": name,
                    "target": target,
                    "level": level,
                    "reason": "alarms may only raise the isolation level",
                }),
            );
            return None;
        }
    }
    if verdict.action == VerdictAction::NoAction {
        return None;
    }
    journal.emit(
        Source::Detector,
        "verdict",
        json!({
            "plugin": name,
            "observation": obs.kind,
            "subject": obs.subject,
            "verdict": verdict.label(),
            "detail": verdict,
        }),
    );
    Some((name, verdict))
}

fn fail_closed(plugin: &str, msg: &str) -> Verdict {
    Verdict::new(VerdictAction::Alarm { target: IsolationLevel::Offline }, format!("plugin_failure in {plugin}: {msg}"))
}

/// Snapshots a halted model: one observation with the digest of its DRAM
/// and one with the register file of every model core.
pub fn snapshot_model(machine: &Machine, journal: &mut Journal, issuer: CoreId, model: ModelId) -> Result<[Observation; 2], MachineError> {
    let region = machine.topology().region_of_kind(RegionKind::ModelDram);
    let size = machine.region_size(region);
    let dram = machine.read_model_dram(journal, issuer, region, 0, size)?;
    let mut registers = serde_json::Map::new();
    for core in machine.topology().model_cores() {
        let snap = machine.snapshot_core(*core);
        registers.insert(core.to_string(), json!({"pc": snap.pc, "registers": snap.registers}));
    }
    let reg_bytes = serde_json::to_vec(&registers).expect("registers serialize");
    let mem_digest = sha256_hex(&dram);
    let tick = journal.now();
    let mem = Observation::new(ObservationKind::MemorySnapshotDigest, tick, Subject::Model(model), mem_digest.as_bytes());
    let regs = Observation::new(ObservationKind::RegisterSnapshot, tick, Subject::Model(model), &reg_bytes);
    journal.emit(Source::Detector, "snapshot", json!({"model": model, "dram_digest": mem_digest, "register_digest": regs.digest}));
    journal.observe(mem.clone());
    journal.observe(regs.clone());
    Ok([mem, regs])
}
