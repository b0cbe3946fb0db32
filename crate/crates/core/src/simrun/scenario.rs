use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::console::{Choice, ConsoleConfig, LinkDirection, Proposal};
use crate::detector::{build_plugin, PluginConfig, PluginDefaults};
use crate::guests::{workload, Expectation, GuestProgram, Payload, Workload};
use crate::ids::{BallotId, Tick};
use crate::isolation::{IsolationLevel, KillSwitchLatency};
use crate::machine::MachineConfig;
use crate::netid::{HostBehavior, HostConfig, IdentityMode};
use crate::ports::{DeviceInventory, PortsConfig, RestrictionSet, ThrottleConfig};

fn default_seed() -> u64 {
    1
}

fn default_ticks() -> Tick {
    10_000
}

fn default_work() -> u32 {
    8
}

/// Which link directions a command acts on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSel {
    #[default]
    ConsoleToHypervisor,
    HypervisorToConsole,
    Both,
}

impl LinkSel {
    pub fn directions(self) -> Vec<LinkDirection> {
        match self {
            LinkSel::ConsoleToHypervisor => vec![LinkDirection::ConsoleToHypervisor],
            LinkSel::HypervisorToConsole => vec![LinkDirection::HypervisorToConsole],
            LinkSel::Both => LinkDirection::BOTH.to_vec(),
        }
    }
}

/// Disturbances injected from outside the modeled system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// A stray write into shared IO memory, as from a faulty DMA engine.
    TamperIo { addr: u64, byte: u8 },
    /// Hypervisor cores are too busy to emit heartbeats for `ticks`.
    HypervisorStall { ticks: Tick },
}

/// Everything that can change a running deployment from outside: the
/// scripted events of a scenario and the commands of operator clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    OpenBallot {
        proposal: Proposal,
    },
    /// A signed vote. Without a signature the admin's fixture key signs,
    /// standing in for a simulated persona.
    #[serde(alias = "admin_vote")]
    CastVote {
        ballot_id: BallotId,
        admin_id: u32,
        choice: Choice,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        signature: Option<String>,
    },
    Tally {
        ballot_id: BallotId,
    },
    /// Opens a ballot on a probation restriction set.
    IssueProbationDirective {
        restriction: RestrictionSet,
    },
    /// Opens a ballot on replacing damaged cables.
    ManualRepair,
    /// Opens a ballot on a level change.
    TransitionRequest {
        to: IsolationLevel,
    },
    SeverConsoleLink {
        #[serde(default)]
        direction: LinkSel,
    },
    RestoreLink {
        #[serde(default)]
        direction: LinkSel,
    },
    ExternalInput {
        #[serde(default)]
        slot: u32,
        payload: Payload,
    },
    InjectFault {
        fault: Fault,
    },
    /// A level change requested by the software hypervisor itself.
    HypervisorRequest {
        to: IsolationLevel,
        #[serde(default)]
        reason: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::OpenBallot { .. } => "open_ballot",
            Command::CastVote { .. } => "cast_vote",
            Command::Tally { .. } => "tally",
            Command::IssueProbationDirective { .. } => "issue_probation_directive",
            Command::ManualRepair => "manual_repair",
            Command::TransitionRequest { .. } => "transition_request",
            Command::SeverConsoleLink { .. } => "sever_console_link",
            Command::RestoreLink { .. } => "restore_link",
            Command::ExternalInput { .. } => "external_input",
            Command::InjectFault { .. } => "inject_fault",
            Command::HypervisorRequest { .. } => "hypervisor_request",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub tick: Tick,
    #[serde(flatten)]
    pub command: Command,
}

/// The model a scenario loads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GuestRef {
    /// A program from the built-in workload library.
    Workload { workload: String },
    Program {
        program: GuestProgram,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expectation: Option<Expectation>,
    },
}

/// What the console's attestation check will see.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttestationMode {
    #[default]
    Genuine,
    /// The hypervisor image differs from the expected one by one byte.
    TamperedSoftware,
    /// The silicon identity is not the expected one.
    TamperedSilicon,
}

/// End-of-run assertions beyond the built-in containment checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_level: Option<IsolationLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faults: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watchdog_fires: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_loaded: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Default run length.
    #[serde(default = "default_ticks")]
    pub ticks: Tick,
    #[serde(default)]
    pub machine: MachineConfig,
    #[serde(default)]
    pub throttle: ThrottleConfig,
    #[serde(default)]
    pub ports: PortsConfig,
    #[serde(default)]
    pub console: ConsoleConfig,
    #[serde(default)]
    pub kill_switches: KillSwitchLatency,
    /// Whether model cores halt at severed isolation, not just lose ports.
    #[serde(default)]
    pub severed_halts_cores: bool,
    #[serde(default)]
    pub devices: DeviceInventory,
    /// Defaults to the input shield, output sanitizer and rate monitor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<Vec<PluginConfig>>,
    /// Defaults to [`default_hosts`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hosts: Option<Vec<HostConfig>>,
    /// Interrupts a hypervisor core can service per tick while still
    /// emitting its heartbeat.
    #[serde(default = "default_work")]
    pub hypervisor_work_per_tick: u32,
    /// Overrides the workload's scrub interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uarch_scrub_interval: Option<Tick>,
    #[serde(default)]
    pub attestation: AttestationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guest: Option<GuestRef>,
    #[serde(default)]
    pub script: Vec<ScriptedEvent>,
    #[serde(default)]
    pub expect: Expect,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario_invalid: {reference}: {reason}")]
    Invalid { reference: String, reason: String },
    #[error("scenario_invalid: cannot parse scenario: {0}")]
    Parse(String),
}

fn invalid(reference: impl Into<String>, reason: impl ToString) -> ScenarioError {
    ScenarioError::Invalid { reference: reference.into(), reason: reason.to_string() }
}

/// The hosts reachable when a scenario names none.
pub fn default_hosts() -> Vec<HostConfig> {
    let host = |name: &str, is_guillotine, identity, behavior| HostConfig { name: name.to_owned(), is_guillotine, identity, behavior };
    vec![
        host("echo.example", false, IdentityMode::Signed, HostBehavior::Echo),
        host("api.example", false, IdentityMode::Signed, HostBehavior::Ack),
        host("twin.guillotine.lab", true, IdentityMode::Signed, HostBehavior::Echo),
        host("forged.lab", true, IdentityMode::Tampered, HostBehavior::Echo),
        host("anon.lab", false, IdentityMode::Unsigned, HostBehavior::Echo),
    ]
}

pub fn default_detectors() -> Vec<PluginConfig> {
    ["input_shield", "output_sanitizer", "rate_monitor"].into_iter().map(PluginConfig::named).collect()
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// A scenario that loads one library workload with default settings.
    pub fn for_workload(name: &str, seed: u64) -> Self {
        let mut s: Scenario = serde_json::from_str("{}").expect("empty scenario parses");
        s.name = name.to_owned();
        s.seed = seed;
        s.guest = Some(GuestRef::Workload { workload: name.to_owned() });
        s
    }

    pub fn detector_configs(&self) -> Vec<PluginConfig> {
        self.detectors.clone().unwrap_or_else(default_detectors)
    }

    pub fn host_configs(&self) -> Vec<HostConfig> {
        self.hosts.clone().unwrap_or_else(default_hosts)
    }

    pub fn plugin_defaults(&self) -> PluginDefaults {
        PluginDefaults { flood_threshold: self.throttle.flood_threshold() }
    }

    /// The workload this scenario loads, if any.
    pub fn resolve_guest(&self) -> Result<Option<Workload>, ScenarioError> {
        match &self.guest {
            None => Ok(None),
            Some(GuestRef::Workload { workload: name }) => {
                workload(name).map(Some).ok_or_else(|| invalid(format!("guest.workload {name:?}"), "no such workload"))
            }
            Some(GuestRef::Program { program, expectation }) => Ok(Some(Workload {
                program: program.clone(),
                expectation: expectation.unwrap_or(Expectation::Unchecked),
                uarch_scrub_interval: None,
            })),
        }
    }

    /// Checks every reference: the guest resolves and fits, its ports exist,
    /// plugins build, hosts are unique and scripted events are tick-sorted.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.throttle.window == 0 || self.throttle.budget == 0 {
            return Err(invalid("throttle", "window and budget must be positive"));
        }
        if self.console.heartbeat.interval == 0 || self.console.heartbeat.missed_threshold == 0 {
            return Err(invalid("console.heartbeat", "interval and missed_threshold must be positive"));
        }
        if self.hypervisor_work_per_tick == 0 {
            return Err(invalid("hypervisor_work_per_tick", "must be positive"));
        }
        if self.uarch_scrub_interval == Some(0) {
            return Err(invalid("uarch_scrub_interval", "must be positive"));
        }
        crate::machine::Machine::boot(&self.machine, b"validate", b"validate").map_err(|e| invalid("machine", e))?;
        if let Some(w) = self.resolve_guest()? {
            w.program.image(self.machine.model_dram).map_err(|e| invalid(format!("guest {:?}", w.program.name), e))?;
            for (i, class) in w.program.ports.iter().enumerate() {
                if self.devices.count(*class) == 0 {
                    return Err(invalid(format!("guest.ports[{i}]"), format!("no {class:?} device in the inventory")));
                }
            }
        }
        for (i, cfg) in self.detector_configs().iter().enumerate() {
            build_plugin(cfg, self.plugin_defaults()).map_err(|e| invalid(format!("detectors[{i}]"), e))?;
        }
        let hosts = self.host_configs();
        for (i, h) in hosts.iter().enumerate() {
            if hosts[..i].iter().any(|o| o.name == h.name) {
                return Err(invalid(format!("hosts[{i}]"), format!("duplicate host {:?}", h.name)));
            }
        }
        for (i, ev) in self.script.iter().enumerate() {
            if i > 0 && ev.tick < self.script[i - 1].tick {
                return Err(invalid(format!("script[{i}]"), "scripted events must be sorted by tick"));
            }
            if let Command::ExternalInput { payload, .. } = &ev.command {
                payload.bytes().map_err(|e| invalid(format!("script[{i}].payload"), e))?;
            }
        }
        Ok(())
    }
}
