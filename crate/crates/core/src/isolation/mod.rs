//! The six ordered isolation levels and who may move between them.
//!
//! Requests are queued during a tick and at most one commits at the end of
//! it, chosen by authority priority (watchdog, then console, then software
//! hypervisor). The software hypervisor and the watchdog can only tighten
//! isolation; relaxing needs a console ballot with the relax quorum.
//! Physical effects (power, cables, the site) are kill switches with a
//! latency: they are scheduled and logged when a level commits and
//! complete a few ticks later.

mod effects;
mod fsm;
mod level;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use effects::{required_actions, CableState, KillSwitchAction, KillSwitchKind, KillSwitchLatency, PhysicalPlant};
pub use fsm::{
    console_threshold, evaluate, evaluate_repair, Authority, Rejection, TransitionRequest, ADMIN_COUNT, RELAX_THRESHOLD, RESTRICT_THRESHOLD,
};
pub use level::IsolationLevel;

use crate::event::{Journal, Source};
use crate::ids::{CoreId, Tick};
use crate::machine::{ControlCommand, Machine, RunState};
use crate::ports::PortBroker;

/// One line of the transition log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub tick: Tick,
    pub from: IsolationLevel,
    pub to: IsolationLevel,
    pub authority: Authority,
    pub reason: String,
    pub effects: Vec<String>,
}

/// What a committed level did to the deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EffectReport {
    pub level: IsolationLevel,
    pub ports: &'static str,
    pub cores: &'static str,
    pub scheduled: Vec<KillSwitchKind>,
    pub cancelled: Vec<KillSwitchKind>,
}

impl EffectReport {
    fn lines(&self) -> Vec<String> {
        let mut out = vec![format!("ports:{}", self.ports), format!("cores:{}", self.cores)];
        out.extend(self.scheduled.iter().map(|k| format!("schedule:{}", kind_name(*k))));
        out.extend(self.cancelled.iter().map(|k| format!("cancel:{}", kind_name(*k))));
        out
    }
}

fn kind_name(k: KillSwitchKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// State the level effects act on.
pub struct EffectCtx<'a> {
    pub machine: &'a mut Machine,
    pub ports: &'a mut PortBroker,
    pub journal: &'a mut Journal,
    /// Whether a model has been loaded and started.
    pub model_loaded: bool,
}

/// Result of one end-of-tick commit.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct CommitOutcome {
    pub accepted: Option<TransitionRecord>,
    pub rejected: Vec<(TransitionRequest, Rejection)>,
}

pub struct Isolation {
    level: IsolationLevel,
    pending: Vec<TransitionRequest>,
    plant: PhysicalPlant,
    log: Vec<TransitionRecord>,
    severed_halts_cores: bool,
}

impl Isolation {
    pub fn new(latency: KillSwitchLatency, severed_halts_cores: bool) -> Self {
        Self {
            level: IsolationLevel::Standard,
            pending: Vec::new(),
            plant: PhysicalPlant::new(latency),
            log: Vec::new(),
            severed_halts_cores,
        }
    }

    pub fn level(&self) -> IsolationLevel {
        self.level
    }

    pub fn plant(&self) -> &PhysicalPlant {
        &self.plant
    }

    pub fn log(&self) -> &[TransitionRecord] {
        &self.log
    }

    pub fn transition_log_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("transition records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn pending(&self) -> &[TransitionRequest] {
        &self.pending
    }

    /// Queues a transition from the current level for the end-of-tick commit.
    pub fn request(&mut self, journal: &mut Journal, to: IsolationLevel, authority: Authority, reason: &str) {
        let req = TransitionRequest { from: self.level, to, authority, tick: journal.now(), reason: reason.to_owned(), repair: false };
        self.submit(journal, req);
    }

    /// Queues a manual cable repair approved by a console ballot.
    pub fn request_repair(&mut self, journal: &mut Journal, authority: Authority, reason: &str) {
        let req = TransitionRequest {
            from: self.level,
            to: IsolationLevel::Offline,
            authority,
            tick: journal.now(),
            reason: reason.to_owned(),
            repair: true,
        };
        self.submit(journal, req);
    }

    pub fn submit(&mut self, journal: &mut Journal, req: TransitionRequest) {
        journal.emit(Source::Isolation, "transition_requested", &req);
        self.pending.push(req);
    }

    /// Completes kill switches that are due.
    pub fn tick_kill_switches(&mut self, journal: &mut Journal, machine: &mut Machine) -> Vec<KillSwitchKind> {
        self.plant.complete_due(journal, machine)
    }

    /// Commits at most one queued request, highest priority first; every
    /// other queued request is rejected.
    pub fn commit(&mut self, ctx: &mut EffectCtx<'_>) -> CommitOutcome {
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by_key(|r| r.authority.priority());
        let mut out = CommitOutcome::default();
        let mut winner = None;
        for req in pending {
            let verdict = if winner.is_some() { Err(Rejection::Superseded) } else { evaluate(self.level, &req) };
            match verdict {
                Ok(to) => winner = Some((req, to)),
                Err(rejection) => {
                    ctx.journal.emit(
                        Source::Isolation,
                        "transition_rejected",
                        json!({"request": req, "rejection": rejection, "message": rejection.to_string()}),
                    );
                    out.rejected.push((req, rejection));
                }
            }
        }
        if let Some((req, to)) = winner {
            let from = self.level;
            if req.repair {
                self.plant.repair(ctx.journal);
            }
            let report = self.apply_level_effects(from, to, ctx);
            self.level = to;
            let record = TransitionRecord {
                tick: ctx.journal.now(),
                from,
                to,
                authority: req.authority,
                reason: req.reason.clone(),
                effects: report.lines(),
            };
            ctx.journal.emit(Source::Isolation, "transition", &record);
            self.log.push(record.clone());
            out.accepted = Some(record);
        }
        out
    }

    /// Applies the ports, cores and kill-switch effects of entering `to`.
    pub fn apply_level_effects(&mut self, from: IsolationLevel, to: IsolationLevel, ctx: &mut EffectCtx<'_>) -> EffectReport {
        if to.cores_powered() {
            self.plant.restore(ctx.journal, ctx.machine);
        }
        let (scheduled, cancelled) = self.plant.reconcile(ctx.journal, to);
        let ports = match to {
            IsolationLevel::Standard => {
                ctx.ports.reinstate(ctx.journal, false);
                "granted"
            }
            IsolationLevel::Probation => {
                ctx.ports.reinstate(ctx.journal, true);
                "restricted"
            }
            _ => {
                ctx.ports.revoke_all(ctx.journal);
                "revoked"
            }
        };
        let runs = |l: IsolationLevel| l <= IsolationLevel::Probation || (l == IsolationLevel::Severed && !self.severed_halts_cores);
        let cores = if to >= IsolationLevel::Offline {
            pause_models(ctx);
            "halted_for_power_down"
        } else if !runs(to) {
            pause_models(ctx);
            "halted_powered"
        } else if !runs(from) && ctx.model_loaded {
            resume_models(ctx);
            "running"
        } else {
            "unchanged"
        };
        EffectReport { level: to, ports, cores, scheduled, cancelled }
    }
}

fn issuer(machine: &Machine) -> Option<CoreId> {
    machine.topology().hypervisor_cores().iter().copied().find(|c| machine.core(*c).is_some_and(|s| s.run_state != RunState::PoweredDown))
}

fn pause_models(ctx: &mut EffectCtx<'_>) {
    let Some(hyp) = issuer(ctx.machine) else { return };
    for core in ctx.machine.topology().model_cores().to_vec() {
        if matches!(ctx.machine.core(core).map(|c| c.run_state), Some(RunState::Running | RunState::SingleStepping)) {
            let _ = ctx.machine.control_bus(ctx.journal, hyp, core, &ControlCommand::Pause);
        }
    }
}

fn resume_models(ctx: &mut EffectCtx<'_>) {
    let Some(hyp) = issuer(ctx.machine) else { return };
    for core in ctx.machine.topology().model_cores().to_vec() {
        if ctx.machine.core(core).map(|c| c.run_state) == Some(RunState::Halted) {
            let _ = ctx.machine.control_bus(ctx.journal, hyp, core, &ControlCommand::Resume);
        }
    }
}
