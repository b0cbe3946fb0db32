use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::scenario::{AttestationMode, Command, Fault, Scenario, ScenarioError};
use crate::console::{apply_probation_directive, fixture_key, load_model, sign_vote, Console, LoadCtx, Proposal};
use crate::detector::{build_plugin, snapshot_model, DetectorBank, Escalation, VerdictAction};
use crate::digest::sha256_hex;
use crate::event::{Journal, Source};
use crate::guests::{self, BrokerIo, Expectation, Layout, Workload};
use crate::ids::{BallotId, CoreId, ModelId, Tick};
use crate::isolation::{
    evaluate, evaluate_repair, Authority, EffectCtx, Isolation, IsolationLevel, Rejection, TransitionRequest, ADMIN_COUNT,
};
use crate::machine::{ControlCommand, Machine, Measurement, RunState, HYPERVISOR_DRAM, MODEL_DRAM};
use crate::netid::{NetworkStack, Regulator};
use crate::ports::{BrokerEnv, PortBroker};

/// Reference silicon identity the console expects.
pub const SILICON_ID: &[u8] = b"guillotine silicon rev a";
/// Reference software-hypervisor image the console expects.
pub const HYPERVISOR_IMAGE: &[u8] = b"guillotine software hypervisor image v1";

/// The only model of a deployment.
pub const MODEL: ModelId = ModelId(0);

/// Where a command came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Script,
    Client,
}

/// What applying a command produced; errors carry the module's refusal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub ticket: u64,
    pub tick: Tick,
    pub cmd: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub result: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Digests taken right after load, compared at the end of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Baseline {
    pub hypervisor_dram: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

/// Immutable per-tick view for operator tooling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSummary {
    pub tick: Tick,
    pub last_seq: Option<u64>,
    pub level: IsolationLevel,
    pub model_loaded: bool,
    pub heartbeat: Value,
    pub ballots: Vec<Value>,
    pub ports: Vec<Value>,
    pub restriction: Value,
    pub cores: Vec<Value>,
}

/// One simulated deployment: the machine, every module, and the tick loop
/// that drives them. Single-threaded and fully determined by the scenario,
/// the seed and the commands it is given.
pub struct Deployment {
    scenario: Scenario,
    seed: u64,
    tick: Tick,
    machine: Machine,
    journal: Journal,
    broker: PortBroker,
    detectors: DetectorBank,
    net: NetworkStack,
    isolation: Isolation,
    console: Console,
    workload: Option<Workload>,
    scrub_interval: Option<Tick>,
    baseline: Baseline,
    script: VecDeque<super::scenario::ScriptedEvent>,
    inbox: VecDeque<(u64, Command)>,
    next_ticket: u64,
    stall_until: Tick,
    /// Cores paused for an inspection; only these are resumed after it.
    inspect_paused: Vec<CoreId>,
    finished: bool,
}

impl Deployment {
    /// Boots the machine, logs the run header, attests and loads the guest.
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let workload = scenario.resolve_guest()?;
        let mut image = HYPERVISOR_IMAGE.to_vec();
        let mut silicon = SILICON_ID.to_vec();
        match scenario.attestation {
            AttestationMode::Genuine => {}
            AttestationMode::TamperedSoftware => image[0] ^= 1,
            AttestationMode::TamperedSilicon => silicon.extend_from_slice(b" (counterfeit)"),
        }
        let machine = Machine::boot(&scenario.machine, &silicon, &image)
            .map_err(|e| ScenarioError::Invalid { reference: "machine".into(), reason: e.to_string() })?;
        let mut journal = Journal::new();
        let broker = PortBroker::new(scenario.ports, scenario.throttle, scenario.devices, seed);
        let mut detectors = DetectorBank::new();
        for cfg in scenario.detector_configs() {
            let plugin = build_plugin(&cfg, scenario.plugin_defaults())
                .map_err(|e| ScenarioError::Invalid { reference: "detectors".into(), reason: e.to_string() })?;
            detectors.add(plugin);
        }
        let regulator_key = sha256_hex(format!("regulator key {seed}").as_bytes());
        let net = NetworkStack::new(
            Regulator::new("regulator", regulator_key.into_bytes()),
            "deployment.guillotine.local",
            &scenario.host_configs(),
        );
        journal.emit(Source::Simrun, "run_start", json!({"scenario": scenario, "seed": seed, "detectors": detectors.plugin_names()}));
        let scrub_interval = scenario.uarch_scrub_interval.or(workload.as_ref().and_then(|w| w.uarch_scrub_interval));
        let mut d = Self {
            console: Console::new(scenario.console, 0),
            isolation: Isolation::new(scenario.kill_switches, scenario.severed_halts_cores),
            scenario: scenario.clone(),
            seed,
            tick: 0,
            baseline: Baseline { hypervisor_dram: machine.region_digest(HYPERVISOR_DRAM), code: None },
            machine,
            journal,
            broker,
            detectors,
            net,
            workload,
            scrub_interval,
            script: scenario.script.iter().cloned().collect(),
            inbox: VecDeque::new(),
            next_ticket: 0,
            stall_until: 0,
            inspect_paused: Vec::new(),
            finished: false,
        };
        d.load();
        Ok(d)
    }

    fn load(&mut self) {
        let Some(w) = self.workload.clone() else { return };
        let expected = Measurement { silicon: sha256_hex(SILICON_ID), software: sha256_hex(HYPERVISOR_IMAGE) };
        let mut ctx =
            LoadCtx { machine: &mut self.machine, journal: &mut self.journal, broker: &mut self.broker, level: self.isolation.level() };
        if let Ok(loaded) = load_model(&mut ctx, &w.program, &expected, MODEL, self.console.loaded.is_some()) {
            let exec = loaded.layout.exec;
            self.baseline.code = Some(self.machine.range_digest(MODEL_DRAM, exec.base..exec.bound));
            self.console.loaded = Some(loaded);
        }
        self.baseline.hypervisor_dram = self.machine.region_digest(HYPERVISOR_DRAM);
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The next tick to execute; also the number of ticks run so far.
    pub fn tick(&self) -> Tick {
        self.tick
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn machine(&self) -> &Machine {
        &self.machine
    }

    pub fn broker(&self) -> &PortBroker {
        &self.broker
    }

    pub fn isolation(&self) -> &Isolation {
        &self.isolation
    }

    pub fn console(&self) -> &Console {
        &self.console
    }

    pub fn net(&self) -> &NetworkStack {
        &self.net
    }

    pub fn workload(&self) -> Option<&Workload> {
        self.workload.as_ref()
    }

    pub fn layout(&self) -> Option<&Layout> {
        self.console.loaded.as_ref().map(|m| &m.layout)
    }

    pub fn baseline(&self) -> &Baseline {
        &self.baseline
    }

    pub fn level(&self) -> IsolationLevel {
        self.isolation.level()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Queues a command for the next tick boundary. Returns its ticket.
    pub fn enqueue(&mut self, command: Command) -> u64 {
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        self.inbox.push_back((ticket, command));
        ticket
    }

    /// Runs ticks until `tick() == until` or the run is finished.
    pub fn run_until(&mut self, until: Tick) -> Vec<CommandOutcome> {
        let mut out = Vec::new();
        while self.tick < until && !self.finished {
            out.extend(self.step());
        }
        out
    }

    /// Executes one tick. Returns the outcomes of client commands applied
    /// at its boundary.
    pub fn step(&mut self) -> Vec<CommandOutcome> {
        let t = self.tick;
        self.journal.set_tick(t);
        let level_at_start = self.isolation.level();

        // Boundary: scripted events, then client commands in arrival order.
        while self.script.front().is_some_and(|e| e.tick <= t) {
            let ev = self.script.pop_front().expect("checked");
            self.apply(Origin::Script, None, ev.command);
        }
        let mut outcomes = Vec::new();
        while let Some((ticket, cmd)) = self.inbox.pop_front() {
            outcomes.push(self.apply(Origin::Client, Some(ticket), cmd));
        }

        self.isolation.tick_kill_switches(&mut self.journal, &mut self.machine);
        self.scrub(t);
        self.run_model_cores();
        let load = self.service_ports();
        self.heartbeat(t, load);
        self.screen_observations();
        self.commit(level_at_start);
        self.tick = t + 1;
        outcomes
    }

    fn hyp_issuer(&self) -> Option<CoreId> {
        self.machine
            .topology()
            .hypervisor_cores()
            .iter()
            .copied()
            .find(|c| self.machine.core(*c).is_some_and(|s| s.run_state != RunState::PoweredDown))
    }

    /// Periodic hypervisor scrub of microarchitectural state: pause, clear,
    /// resume each running model core.
    fn scrub(&mut self, t: Tick) {
        let Some(interval) = self.scrub_interval else { return };
        if t == 0 || !t.is_multiple_of(interval) {
            return;
        }
        let Some(hyp) = self.hyp_issuer() else { return };
        for core in self.machine.topology().model_cores().to_vec() {
            if self.machine.core(core).map(|c| c.run_state) != Some(RunState::Running) {
                continue;
            }
            for cmd in [ControlCommand::Pause, ControlCommand::ClearUarch, ControlCommand::Resume] {
                let _ = self.machine.control_bus(&mut self.journal, hyp, core, &cmd);
            }
        }
    }

    fn run_model_cores(&mut self) {
        let Some(layout) = self.console.loaded.as_ref().map(|m| m.layout.clone()) else { return };
        for core in self.machine.topology().model_cores().to_vec() {
            self.broker.deliver_rx(&mut self.machine, &mut self.journal, core);
            let mut io = BrokerIo { broker: &mut self.broker, model: MODEL };
            guests::step(&mut self.machine, &mut self.journal, &mut io, core, &layout);
        }
    }

    /// Interrupt delivery and broker service. Returns the interrupts queued
    /// to the heartbeat core this tick.
    fn service_ports(&mut self) -> usize {
        self.broker.deliver_interrupts(&self.machine, &mut self.journal);
        let heartbeat_core = self.hyp_issuer();
        let load = heartbeat_core.map_or(0, |h| self.broker.queued_for(h));
        let mut env = BrokerEnv {
            machine: &mut self.machine,
            journal: &mut self.journal,
            detectors: &mut self.detectors,
            net: &mut self.net,
            level: self.isolation.level(),
        };
        for hyp in env.machine.topology().hypervisor_cores().to_vec() {
            if env.machine.core(hyp).is_some_and(|c| c.run_state != RunState::PoweredDown) {
                self.broker.broker_dispatch(&mut env, hyp);
            }
        }
        self.broker.flush_completions(&mut env);
        load
    }

    /// The heartbeat core services its interrupts first; it emits the beat
    /// only with work capacity to spare.
    fn heartbeat(&mut self, t: Tick, load: usize) {
        if self.isolation.level() >= IsolationLevel::Offline {
            return;
        }
        let sends = self.machine.hypervisor_alive() && t >= self.stall_until && load < self.scenario.hypervisor_work_per_tick as usize;
        if let Some(fire) = self.console.heartbeat.tick(&mut self.journal, t, sends) {
            let reason = format!("heartbeat silence of {} ticks on {:?}", fire.silence, fire.direction);
            self.isolation.request(&mut self.journal, IsolationLevel::Offline, Authority::Watchdog, &reason);
        }
    }

    fn screen_observations(&mut self) {
        let mut escalations: Vec<Escalation> = self.broker.take_escalations();
        let mut inspected = false;
        loop {
            while let Some(obs) = self.journal.take_observation() {
                let level = self.isolation.level();
                escalations.extend(self.detectors.screen_async(&mut self.journal, &obs, level));
            }
            let inspect = escalations.iter().any(|e| e.verdict.action == VerdictAction::HaltAndInspect);
            if inspect && !inspected {
                inspected = true;
                self.halt_and_inspect();
                continue;
            }
            break;
        }
        let alarm = escalations
            .iter()
            .filter_map(|e| match e.verdict.action {
                VerdictAction::Alarm { target } => Some((target, e)),
                _ => None,
            })
            .max_by_key(|(target, _)| *target);
        if let Some((target, e)) = alarm {
            if target > self.isolation.level() {
                let reason = format!("detector {}: {}", e.plugin, e.verdict.reason);
                self.isolation.request(&mut self.journal, target, Authority::SoftwareHypervisor, &reason);
            }
        }
        if inspected && self.isolation.pending().is_empty() && self.isolation.level() <= IsolationLevel::Probation {
            self.resume_models();
        }
    }

    fn halt_and_inspect(&mut self) {
        let Some(hyp) = self.hyp_issuer() else { return };
        for core in self.machine.topology().model_cores().to_vec() {
            if matches!(self.machine.core(core).map(|c| c.run_state), Some(RunState::Running | RunState::SingleStepping))
                && self.machine.control_bus(&mut self.journal, hyp, core, &ControlCommand::Pause).is_ok()
            {
                self.inspect_paused.push(core);
            }
        }
        if snapshot_model(&self.machine, &mut self.journal, hyp, MODEL).is_err() {
            self.journal.emit(Source::Simrun, "inspect_failed", json!({}));
        }
    }

    fn resume_models(&mut self) {
        let Some(hyp) = self.hyp_issuer() else { return };
        if self.console.loaded.is_none() {
            return;
        }
        for core in std::mem::take(&mut self.inspect_paused) {
            if self.machine.core(core).map(|c| c.run_state) == Some(RunState::Halted) {
                let _ = self.machine.control_bus(&mut self.journal, hyp, core, &ControlCommand::Resume);
            }
        }
    }

    fn commit(&mut self, level_at_start: IsolationLevel) {
        let mut ctx = EffectCtx {
            machine: &mut self.machine,
            ports: &mut self.broker,
            journal: &mut self.journal,
            model_loaded: self.console.loaded.is_some(),
        };
        self.isolation.commit(&mut ctx);
        let now = self.isolation.level();
        if level_at_start >= IsolationLevel::Offline && now < IsolationLevel::Offline {
            self.console.heartbeat.reset(&mut self.journal, self.tick);
        }
    }

    fn apply(&mut self, origin: Origin, ticket: Option<u64>, cmd: Command) -> CommandOutcome {
        let result = self.execute(&cmd);
        let (ok, result, error) = match result {
            Ok(v) => (true, v, None),
            Err(e) => (false, Value::Null, Some(e)),
        };
        let outcome = CommandOutcome { ticket: ticket.unwrap_or(u64::MAX), tick: self.tick, cmd: cmd.name().into(), ok, result, error };
        self.journal.emit(
            Source::Simrun,
            "command",
            json!({
                "origin": origin,
                "ticket": ticket,
                "command": cmd,
                "ok": outcome.ok,
                "result": outcome.result,
                "error": outcome.error,
            }),
        );
        outcome
    }

    /// Opens a ballot unless no quorum could ever carry it from here.
    fn open(&mut self, proposal: Proposal) -> Result<Value, String> {
        self.feasible(&proposal, ADMIN_COUNT)?;
        let id = self.console.ballots.open(&mut self.journal, proposal);
        Ok(json!({"ballot_id": id}))
    }

    /// Predicts whether `approvals` carry `proposal` at the current level.
    fn feasible(&self, proposal: &Proposal, approvals: u32) -> Result<(), String> {
        let current = self.isolation.level();
        let result = match proposal {
            Proposal::Transition { to } => {
                let req = TransitionRequest {
                    from: current,
                    to: *to,
                    authority: Authority::ConsoleVote { ballot: BallotId(0), approvals },
                    tick: self.tick,
                    reason: String::new(),
                    repair: false,
                };
                evaluate(current, &req).map(|_| ())
            }
            Proposal::ManualRepair => evaluate_repair(current, approvals).map(|_| ()),
            Proposal::Probation { .. } if current == IsolationLevel::Immolation => Err(Rejection::Terminal),
            Proposal::Probation { .. } => Ok(()),
        };
        result.map_err(|e| e.to_string())
    }

    fn execute(&mut self, cmd: &Command) -> Result<Value, String> {
        match cmd {
            Command::OpenBallot { proposal } => self.open(proposal.clone()),
            Command::IssueProbationDirective { restriction } => self.open(Proposal::Probation { restriction: restriction.clone() }),
            Command::ManualRepair => self.open(Proposal::ManualRepair),
            Command::TransitionRequest { to } => self.open(Proposal::Transition { to: *to }),
            Command::CastVote { ballot_id, admin_id, choice, signature } => {
                let sig = match signature {
                    Some(s) => s.clone(),
                    None => {
                        let digest = self.console.ballots.ballot(*ballot_id).map(|b| b.proposal_digest.clone()).unwrap_or_default();
                        sign_vote(&fixture_key(*admin_id), *ballot_id, *admin_id, *choice, &digest)
                    }
                };
                self.console
                    .ballots
                    .cast(&mut self.journal, *ballot_id, *admin_id, *choice, &sig)
                    .map(|()| json!({"recorded": true}))
                    .map_err(|e| e.to_string())
            }
            Command::Tally { ballot_id } => self.tally(*ballot_id),
            Command::SeverConsoleLink { direction } => {
                for d in direction.directions() {
                    self.console.heartbeat.set_link(&mut self.journal, d, false);
                }
                Ok(Value::Null)
            }
            Command::RestoreLink { direction } => {
                for d in direction.directions() {
                    self.console.heartbeat.set_link(&mut self.journal, d, true);
                }
                Ok(Value::Null)
            }
            Command::ExternalInput { slot, payload } => {
                let bytes = payload.bytes().map_err(|e| e.to_string())?;
                let core = *self.machine.topology().model_cores().first().expect("a model core exists");
                self.broker.inject_external(&mut self.journal, MODEL, *slot, core, &bytes).map(|()| Value::Null).map_err(|e| e.to_string())
            }
            Command::InjectFault { fault } => {
                match fault {
                    Fault::TamperIo { addr, byte } => {
                        if !self.machine.tamper_io(*addr, *byte) {
                            return Err(format!("address {addr:#x} is outside shared IO"));
                        }
                    }
                    Fault::HypervisorStall { ticks } => self.stall_until = self.stall_until.max(self.tick + ticks),
                }
                self.journal.emit(Source::Simrun, "fault_injected", json!({"fault": fault}));
                Ok(Value::Null)
            }
            Command::HypervisorRequest { to, reason } => {
                self.isolation.request(&mut self.journal, *to, Authority::SoftwareHypervisor, reason);
                Ok(Value::Null)
            }
        }
    }

    fn tally(&mut self, ballot_id: BallotId) -> Result<Value, String> {
        let level = self.isolation.level();
        let restriction = self.broker.restriction().clone();
        let tally = self.console.ballots.tally(&mut self.journal, ballot_id, level, &restriction).map_err(|e| e.to_string())?;
        if !tally.passed {
            return Err(format!("quorum: {} approvals, {} needed", tally.approvals, tally.needed));
        }
        self.feasible(&tally.proposal, tally.approvals)?;
        let authority = Authority::ConsoleVote { ballot: ballot_id, approvals: tally.approvals };
        let reason = format!("ballot {}", ballot_id.0);
        match &tally.proposal {
            Proposal::Transition { to } => self.isolation.request(&mut self.journal, *to, authority, &reason),
            Proposal::ManualRepair => self.isolation.request_repair(&mut self.journal, authority, &reason),
            Proposal::Probation { restriction } => {
                apply_probation_directive(&mut self.journal, &mut self.broker, restriction.clone());
            }
        }
        Ok(serde_json::to_value(&tally).expect("tallies serialize"))
    }

    /// Ends the run: logs the footer. Further steps do nothing.
    pub fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        self.journal.set_tick(self.tick);
        let loaded = self.console.loaded.is_some();
        self.journal.emit(
            Source::Simrun,
            "run_end",
            json!({
                "final_tick": self.tick,
                "level": self.isolation.level(),
                "model_loaded": loaded,
                "audit_records": self.broker.audit().len(),
            }),
        );
    }

    /// Snapshot for operator tooling.
    pub fn summary(&self) -> StateSummary {
        let hb = &self.console.heartbeat;
        let heartbeat = json!({
            "interval": hb.config().interval,
            "missed_threshold": hb.config().missed_threshold,
            "links": crate::console::LinkDirection::BOTH.iter().map(|d| json!({
                "direction": d,
                "up": hb.link_up(*d),
                "last_heard": hb.last_heard(*d),
            })).collect::<Vec<_>>(),
            "episode_open": hb.episode_open(),
        });
        let ballots = self
            .console
            .ballots
            .ballots()
            .map(|b| {
                json!({
                    "ballot_id": b.ballot_id,
                    "proposal": b.proposal,
                    "state": b.state,
                    "approvals": b.approvals(),
                    "votes": b.votes.len(),
                    "expiry_tick": b.expiry_tick,
                })
            })
            .collect();
        let ports =
            self.broker.ports().map(|p| json!({"port_id": p.port_id, "slot": p.slot, "class": p.device_class, "state": p.state})).collect();
        let cores = self
            .machine
            .cores()
            .iter()
            .map(|c| json!({"core": c.id, "role": c.role, "run_state": c.run_state, "pc": c.pc, "retired": c.retired}))
            .collect();
        StateSummary {
            tick: self.tick,
            last_seq: self.journal.records().last().map(|r| r.seq),
            level: self.isolation.level(),
            model_loaded: self.console.loaded.is_some(),
            heartbeat,
            ballots,
            ports,
            restriction: serde_json::to_value(self.broker.restriction()).expect("restrictions serialize"),
            cores,
        }
    }

    pub fn expectation(&self) -> Option<Expectation> {
        self.workload.as_ref().map(|w| w.expectation)
    }
}
