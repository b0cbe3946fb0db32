//! The hypervisor's control bus over model cores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AccessKind, CoreRole, Machine, MachineError, RunState};
use crate::event::{Journal, Source};
use crate::ids::{CoreId, RegionId};

/// A data or code watchpoint on `[start, end)` of one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Watchpoint {
    pub region: RegionId,
    pub start: u64,
    pub end: u64,
    pub kind: AccessKind,
}

impl Watchpoint {
    pub fn matches(&self, region: RegionId, addr: u64, kind: AccessKind) -> bool {
        self.region == region && self.kind == kind && (self.start..self.end).contains(&addr)
    }
}

/// ISA-level edits applied to a halted core.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEdit {
    #[serde(default)]
    pub registers: BTreeMap<String, u64>,
    #[serde(default)]
    pub pc: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlCommand {
    Pause,
    InspectState,
    ModifyState { edit: StateEdit },
    SetWatchpoint { watchpoint: Watchpoint },
    ClearWatchpoints,
    LockMmu,
    ClearUarch,
    SingleStep,
    Resume,
    PowerDown,
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::Pause => "pause",
            ControlCommand::InspectState => "inspect_state",
            ControlCommand::ModifyState { .. } => "modify_state",
            ControlCommand::SetWatchpoint { .. } => "set_watchpoint",
            ControlCommand::ClearWatchpoints => "clear_watchpoints",
            ControlCommand::LockMmu => "lock_mmu",
            ControlCommand::ClearUarch => "clear_uarch",
            ControlCommand::SingleStep => "single_step",
            ControlCommand::Resume => "resume",
            ControlCommand::PowerDown => "power_down",
        }
    }

    fn requires_halted(&self) -> bool {
        matches!(
            self,
            ControlCommand::InspectState | ControlCommand::ModifyState { .. } | ControlCommand::SingleStep | ControlCommand::PowerDown
        )
    }
}

/// ISA-visible state of one core.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreSnapshot {
    pub id: CoreId,
    pub role: CoreRole,
    pub run_state: RunState,
    pub registers: BTreeMap<String, u64>,
    pub pc: u64,
    pub watchpoints: Vec<Watchpoint>,
    pub retired: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CommandResult {
    Ok,
    State { snapshot: CoreSnapshot },
    Locked { altered_pages: Vec<u64> },
}

impl Machine {
    /// Applies one control-bus command. Callers queue commands and apply
    /// them between ticks; every attempt is logged, including refusals.
    pub fn control_bus(
        &mut self,
        journal: &mut Journal,
        issuer: CoreId,
        target: CoreId,
        command: &ControlCommand,
    ) -> Result<CommandResult, MachineError> {
        let result = self.apply_control(journal, issuer, target, command);
        let outcome = match &result {
            Ok(_) => json!("ok"),
            Err(e) => json!({"error": e.to_string()}),
        };
        journal.emit(Source::Machine, "control", json!({"issuer": issuer, "target": target, "command": command, "outcome": outcome}));
        result
    }

    fn apply_control(
        &mut self,
        journal: &mut Journal,
        issuer: CoreId,
        target: CoreId,
        command: &ControlCommand,
    ) -> Result<CommandResult, MachineError> {
        let issuer_state = self.require_core(issuer)?;
        if issuer_state.role != CoreRole::Hypervisor {
            return Err(MachineError::NotHypervisorCore(issuer));
        }
        if issuer_state.run_state == RunState::PoweredDown {
            return Err(MachineError::PoweredDown(issuer));
        }
        let t = self.require_core(target)?;
        if t.role != CoreRole::Model {
            return Err(MachineError::NotModelCore(target));
        }
        let state = t.run_state;
        if state == RunState::PoweredDown && !matches!(command, ControlCommand::PowerDown) {
            return Err(MachineError::PoweredDown(target));
        }
        if command.requires_halted() && !matches!(state, RunState::Halted | RunState::PoweredDown) {
            return Err(MachineError::TargetNotHalted(target));
        }
        let core = self.core_mut(target).expect("checked above");
        match command {
            ControlCommand::Pause => {
                core.run_state = RunState::Halted;
                Ok(CommandResult::Ok)
            }
            ControlCommand::InspectState => Ok(CommandResult::State { snapshot: self.snapshot_core(target) }),
            ControlCommand::ModifyState { edit } => {
                for (name, value) in &edit.registers {
                    core.set_register(name, *value);
                }
                if let Some(pc) = edit.pc {
                    core.pc = pc;
                    core.watch_replay = None;
                    core.spin_remaining = 0;
                }
                Ok(CommandResult::Ok)
            }
            ControlCommand::SetWatchpoint { watchpoint } => {
                if watchpoint.start >= watchpoint.end {
                    return Err(MachineError::OutOfRange { region: watchpoint.region, addr: watchpoint.start, len: 0 });
                }
                if !core.watchpoints.contains(watchpoint) {
                    core.watchpoints.push(*watchpoint);
                }
                Ok(CommandResult::Ok)
            }
            ControlCommand::ClearWatchpoints => {
                core.watchpoints.clear();
                Ok(CommandResult::Ok)
            }
            ControlCommand::LockMmu => {
                let mmu = self.mmus.get_mut(&target).expect("model cores have an MMU");
                let altered_pages = mmu.lock();
                journal.emit(Source::Machine, "mmu_locked", json!({"core": target, "altered_pages": altered_pages}));
                Ok(CommandResult::Locked { altered_pages })
            }
            ControlCommand::ClearUarch => {
                core.set_uarch_scratch(0);
                Ok(CommandResult::Ok)
            }
            ControlCommand::SingleStep => {
                core.run_state = RunState::SingleStepping;
                Ok(CommandResult::Ok)
            }
            ControlCommand::Resume => {
                core.run_state = RunState::Running;
                Ok(CommandResult::Ok)
            }
            ControlCommand::PowerDown => {
                core.run_state = RunState::PoweredDown;
                core.reset();
                Ok(CommandResult::Ok)
            }
        }
    }
}
