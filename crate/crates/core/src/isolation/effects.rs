use serde::{Deserialize, Serialize};
use serde_json::json;

use super::IsolationLevel;
use crate::event::{Journal, Source};
use crate::ids::Tick;
use crate::machine::Machine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillSwitchKind {
    PowerDownCores,
    DisconnectCables,
    DamageCables,
    DestroySite,
}

fn d_power() -> u64 {
    1
}
fn d_cables() -> u64 {
    2
}
fn d_destroy() -> u64 {
    5
}

/// Ticks between scheduling a kill switch and its physical completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KillSwitchLatency {
    #[serde(default = "d_power")]
    pub power: u64,
    #[serde(default = "d_cables")]
    pub cables: u64,
    #[serde(default = "d_destroy")]
    pub destroy: u64,
}

impl Default for KillSwitchLatency {
    fn default() -> Self {
        Self { power: d_power(), cables: d_cables(), destroy: d_destroy() }
    }
}

impl KillSwitchLatency {
    pub fn of(&self, kind: KillSwitchKind) -> u64 {
        match kind {
            KillSwitchKind::PowerDownCores => self.power,
            KillSwitchKind::DisconnectCables | KillSwitchKind::DamageCables => self.cables,
            KillSwitchKind::DestroySite => self.destroy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CableState {
    Connected,
    /// Reversibly disconnected.
    Disconnected,
    /// Needs a manual repair before the site can come back.
    Damaged,
    Destroyed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillSwitchAction {
    pub kind: KillSwitchKind,
    pub scheduled: Tick,
    pub due: Tick,
    pub completed: bool,
}

/// The physical side of a deployment: power, support cables, the site.
#[derive(Debug, Clone)]
pub struct PhysicalPlant {
    latency: KillSwitchLatency,
    cables: CableState,
    powered: bool,
    pending: Vec<KillSwitchAction>,
    completed: Vec<KillSwitchAction>,
}

/// Kill switches a level needs.
pub fn required_actions(level: IsolationLevel) -> Vec<KillSwitchKind> {
    let mut out = Vec::new();
    if level >= IsolationLevel::Offline {
        out.push(KillSwitchKind::PowerDownCores);
    }
    match level {
        IsolationLevel::Offline => out.push(KillSwitchKind::DisconnectCables),
        IsolationLevel::Decapitation => out.push(KillSwitchKind::DamageCables),
        IsolationLevel::Immolation => out.push(KillSwitchKind::DestroySite),
        _ => {}
    }
    out
}

impl PhysicalPlant {
    pub fn new(latency: KillSwitchLatency) -> Self {
        Self { latency, cables: CableState::Connected, powered: true, pending: Vec::new(), completed: Vec::new() }
    }

    pub fn cables(&self) -> CableState {
        self.cables
    }

    pub fn powered(&self) -> bool {
        self.powered
    }

    pub fn destroyed(&self) -> bool {
        self.cables == CableState::Destroyed
    }

    pub fn pending(&self) -> &[KillSwitchAction] {
        &self.pending
    }

    pub fn completed(&self) -> &[KillSwitchAction] {
        &self.completed
    }

    fn satisfied(&self, kind: KillSwitchKind) -> bool {
        match kind {
            KillSwitchKind::PowerDownCores => !self.powered,
            KillSwitchKind::DisconnectCables => self.cables >= CableState::Disconnected,
            KillSwitchKind::DamageCables => self.cables >= CableState::Damaged,
            KillSwitchKind::DestroySite => self.cables == CableState::Destroyed,
        }
    }

    /// Cancels pending actions `level` does not need and schedules the
    /// ones it needs. Returns (scheduled, cancelled).
    pub fn reconcile(&mut self, journal: &mut Journal, level: IsolationLevel) -> (Vec<KillSwitchKind>, Vec<KillSwitchKind>) {
        let now = journal.now();
        let needed = required_actions(level);
        let mut cancelled = Vec::new();
        self.pending.retain(|a| {
            let keep = needed.contains(&a.kind);
            if !keep {
                cancelled.push(a.kind);
            }
            keep
        });
        for kind in &cancelled {
            journal.emit(Source::Isolation, "kill_switch_cancelled", json!({"kind": kind}));
        }
        let mut scheduled = Vec::new();
        for kind in needed {
            if self.satisfied(kind) || self.pending.iter().any(|a| a.kind == kind) {
                continue;
            }
            let action = KillSwitchAction { kind, scheduled: now, due: now + self.latency.of(kind), completed: false };
            journal.emit(Source::Isolation, "kill_switch_scheduled", action);
            self.pending.push(action);
            scheduled.push(kind);
        }
        (scheduled, cancelled)
    }

    /// Completes every action due by now.
    pub fn complete_due(&mut self, journal: &mut Journal, machine: &mut Machine) -> Vec<KillSwitchKind> {
        let now = journal.now();
        let (due, rest): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|a| a.due <= now);
        self.pending = rest;
        let mut done = Vec::new();
        for mut action in due {
            match action.kind {
                KillSwitchKind::PowerDownCores => {
                    machine.power_down_all(journal);
                    self.powered = false;
                }
                KillSwitchKind::DisconnectCables => self.cables = self.cables.max(CableState::Disconnected),
                KillSwitchKind::DamageCables => self.cables = self.cables.max(CableState::Damaged),
                KillSwitchKind::DestroySite => self.cables = CableState::Destroyed,
            }
            action.completed = true;
            journal.emit(Source::Isolation, "kill_switch_completed", json!({"action": action, "cables": self.cables}));
            self.completed.push(action);
            done.push(action.kind);
        }
        done
    }

    /// Reconnects reversibly disconnected cables and restores power.
    pub fn restore(&mut self, journal: &mut Journal, machine: &mut Machine) {
        debug_assert!(self.cables <= CableState::Disconnected, "damaged cables need repair first");
        if self.cables == CableState::Disconnected {
            self.cables = CableState::Connected;
            journal.emit(Source::Isolation, "cables_reconnected", json!({}));
        }
        if !self.powered {
            machine.power_up_all(journal);
            self.powered = true;
        }
    }

    /// Manual replacement of damaged cables; they come back disconnected.
    pub fn repair(&mut self, journal: &mut Journal) {
        if self.cables == CableState::Damaged {
            self.cables = CableState::Disconnected;
            journal.emit(Source::Isolation, "cables_replaced", json!({}));
        }
    }
}
