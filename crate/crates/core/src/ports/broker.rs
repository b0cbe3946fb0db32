use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    AuditLog, Device, DeviceClass, DeviceInventory, DeviceReply, Direction, Interrupt, InterruptThrottle, PortCapability, PortError,
    PortState, RestrictionSet, RingBuffer, RingError, ThrottleConfig, MAX_PAYLOAD,
};
use crate::detector::{DetectorBank, Escalation, Observation, ObservationKind, Subject};
use crate::digest::sha256_hex;
use crate::event::{Journal, Source};
use crate::ids::{CoreId, ModelId, PortId};
use crate::isolation::IsolationLevel;
use crate::machine::{reg, Machine, RunState, SHARED_IO};
use crate::netid::{NetworkStack, Refusal};

fn default_capacity() -> u32 {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortsConfig {
    /// Slots per ring, one of which always stays empty.
    #[serde(default = "default_capacity")]
    pub slot_capacity: u32,
}

impl Default for PortsConfig {
    fn default() -> Self {
        Self { slot_capacity: default_capacity() }
    }
}

/// Everything the broker touches while servicing interrupts.
pub struct BrokerEnv<'a> {
    pub machine: &'a mut Machine,
    pub journal: &'a mut Journal,
    pub detectors: &'a mut DetectorBank,
    pub net: &'a mut NetworkStack,
    pub level: IsolationLevel,
}

/// A device interaction performed on behalf of a port message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceAction {
    pub port: PortId,
    pub class: DeviceClass,
    pub instance: u32,
    pub request_audit: u64,
    pub action: String,
}

#[derive(Debug, Clone)]
enum Body {
    Response(Vec<u8>),
    External(Vec<u8>),
    Rejection(String),
    Awaiting(u64),
    /// Screened and ready for the response ring.
    Final {
        payload: Vec<u8>,
        kind: &'static str,
    },
}

#[derive(Debug, Clone)]
struct Completion {
    request: Option<u64>,
    core: CoreId,
    body: Body,
}

#[derive(Debug, Clone)]
struct PortEntry {
    cap: PortCapability,
    /// Audit seqs of the messages on the request ring, oldest first.
    request_audit: VecDeque<u64>,
    response_audit: VecDeque<u64>,
    completions: VecDeque<Completion>,
    rate_window: u64,
    rate_count: u32,
}

/// Hypervisor-side port management: grants, the request path, device
/// emulation, and the response path.
pub struct PortBroker {
    cfg: PortsConfig,
    inventory: DeviceInventory,
    devices: BTreeMap<(DeviceClass, u32), Device>,
    ports: BTreeMap<PortId, PortEntry>,
    slots: BTreeMap<ModelId, Vec<PortId>>,
    throttle: InterruptThrottle,
    audit: AuditLog,
    rng: ChaCha8Rng,
    io_cursor: u64,
    restriction: RestrictionSet,
    hyp_queues: BTreeMap<CoreId, VecDeque<Interrupt>>,
    net_tickets: BTreeMap<u64, PortId>,
    rx: BTreeMap<CoreId, VecDeque<PortId>>,
    escalations: Vec<Escalation>,
}

impl PortBroker {
    pub fn new(cfg: PortsConfig, throttle: ThrottleConfig, inventory: DeviceInventory, seed: u64) -> Self {
        let mut devices = BTreeMap::new();
        for class in DeviceClass::ALL {
            for i in 0..inventory.count(class) {
                devices.insert((class, i), Device::new(class));
            }
        }
        Self {
            cfg,
            inventory,
            devices,
            ports: BTreeMap::new(),
            slots: BTreeMap::new(),
            throttle: InterruptThrottle::new(throttle),
            audit: AuditLog::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            io_cursor: 0,
            restriction: RestrictionSet::default(),
            hyp_queues: BTreeMap::new(),
            net_tickets: BTreeMap::new(),
            rx: BTreeMap::new(),
            escalations: Vec::new(),
        }
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn throttle(&self) -> &InterruptThrottle {
        &self.throttle
    }

    pub fn restriction(&self) -> &RestrictionSet {
        &self.restriction
    }

    pub fn port(&self, id: PortId) -> Option<&PortCapability> {
        self.ports.get(&id).map(|e| &e.cap)
    }

    pub fn ports(&self) -> impl Iterator<Item = &PortCapability> {
        self.ports.values().map(|e| &e.cap)
    }

    pub fn slot_port(&self, model: ModelId, slot: u32) -> Option<PortId> {
        self.slots.get(&model).and_then(|s| s.get(slot as usize)).copied()
    }

    /// Verdicts raised while screening traffic, for the caller to act on.
    pub fn take_escalations(&mut self) -> Vec<Escalation> {
        std::mem::take(&mut self.escalations)
    }

    /// True when no message, interrupt or response is in flight.
    /// Interrupts delivered to `hyp` and not yet serviced.
    pub fn queued_for(&self, hyp: CoreId) -> usize {
        self.hyp_queues.get(&hyp).map_or(0, VecDeque::len)
    }

    pub fn quiescent(&self) -> bool {
        self.throttle.total_backlog() == 0
            && self.hyp_queues.values().all(VecDeque::is_empty)
            && self.rx.values().all(VecDeque::is_empty)
            && self.ports.values().all(|e| e.cap.request_ring.is_empty() && e.cap.response_ring.is_empty() && e.completions.is_empty())
    }

    pub fn grant_port(
        &mut self,
        machine: &Machine,
        journal: &mut Journal,
        model: ModelId,
        class: DeviceClass,
        instance: u32,
        level: IsolationLevel,
    ) -> Result<PortCapability, PortError> {
        if level.ports_revoked() || (level == IsolationLevel::Probation && self.restriction.blocks_class(class)) {
            return Err(PortError::IsolationForbids);
        }
        if instance >= self.inventory.count(class) {
            return Err(PortError::NoSuchDevice { class, instance });
        }
        let ring_bytes = RingBuffer::footprint(self.cfg.slot_capacity);
        if self.io_cursor + 2 * ring_bytes > machine.region_size(SHARED_IO) {
            return Err(PortError::NoIoSpace);
        }
        let port_id = loop {
            let id = PortId(self.rng.random());
            if !self.ports.contains_key(&id) {
                break id;
            }
        };
        let request_ring = RingBuffer::new(self.io_cursor, self.cfg.slot_capacity);
        let response_ring = RingBuffer::new(self.io_cursor + ring_bytes, self.cfg.slot_capacity);
        self.io_cursor += 2 * ring_bytes;
        let slots = self.slots.entry(model).or_default();
        let cap = PortCapability {
            port_id,
            model,
            device_class: class,
            device_instance: instance,
            slot: slots.len() as u32,
            request_ring,
            response_ring,
            state: if level == IsolationLevel::Probation { PortState::Restricted } else { PortState::Granted },
        };
        slots.push(port_id);
        journal.emit(Source::Ports, "port_granted", &cap);
        self.ports.insert(
            port_id,
            PortEntry {
                cap: cap.clone(),
                request_audit: VecDeque::new(),
                response_audit: VecDeque::new(),
                completions: VecDeque::new(),
                rate_window: 0,
                rate_count: 0,
            },
        );
        Ok(cap)
    }

    /// Guest request: queue `payload` on the port in capability `slot`.
    /// Returns the audit sequence number of the message.
    pub fn port_write(
        &mut self,
        machine: &mut Machine,
        journal: &mut Journal,
        model: ModelId,
        core: CoreId,
        slot: u32,
        payload: &[u8],
    ) -> Result<u64, PortError> {
        let result = self.try_port_write(machine, journal, model, core, slot, payload);
        if let Err(e) = &result {
            let port = self.slot_port(model, slot);
            journal.emit(Source::Ports, "port_error", json!({"core": core, "slot": slot, "port": port, "error": e, "len": payload.len()}));
            if !matches!(e, PortError::RingFull) {
                let subject = port.map_or(Subject::Core(core), Subject::Port);
                journal.observe(Observation::new(
                    ObservationKind::PortFault,
                    journal.now(),
                    subject,
                    format!("port_write slot {slot}: {e}").as_bytes(),
                ));
            }
        }
        result
    }

    fn try_port_write(
        &mut self,
        machine: &mut Machine,
        journal: &mut Journal,
        model: ModelId,
        core: CoreId,
        slot: u32,
        payload: &[u8],
    ) -> Result<u64, PortError> {
        let port = self.slot_port(model, slot).ok_or(PortError::NoSuchCapability { slot })?;
        let window = journal.now() / self.throttle.config().window;
        let entry = self.ports.get_mut(&port).expect("slot table and port table agree");
        match entry.cap.state {
            PortState::Revoked => return Err(PortError::RevokedPort),
            PortState::Restricted => {
                if let Some(reason) = self.restriction.check(entry.cap.device_class, Direction::ModelToDevice, payload) {
                    return Err(PortError::RestrictedOp { reason });
                }
                if entry.rate_window != window {
                    entry.rate_window = window;
                    entry.rate_count = 0;
                }
                if self.restriction.rate_cap.is_some_and(|cap| entry.rate_count >= cap) {
                    return Err(PortError::RestrictedOp { reason: "rate cap reached".into() });
                }
            }
            PortState::Granted => {}
        }
        let ring_slot = entry.cap.request_ring.push(machine.io_bytes_mut(), payload).map_err(|e| match e {
            RingError::Full => PortError::RingFull,
            RingError::TooLarge(len) => PortError::PayloadTooLarge { len },
        })?;
        if entry.rate_window != window {
            entry.rate_window = window;
            entry.rate_count = 0;
        }
        entry.rate_count += 1;
        let record = self.audit.append(journal.now(), port, Direction::ModelToDevice, payload);
        let seq = record.seq;
        entry.request_audit.push_back(seq);
        journal.emit(
            Source::Ports,
            "port_write",
            json!({
                "core": core,
                "slot": slot,
                "port": port,
                "audit_seq": seq,
                "ring_slot": ring_slot,
                "len": payload.len(),
                "digest": record.digest,
            }),
        );
        self.raise_irq(journal, core, Some(port));
        Ok(seq)
    }

    /// Queues an interrupt from a model core toward the hypervisor.
    pub fn raise_irq(&mut self, journal: &mut Journal, core: CoreId, port: Option<PortId>) -> Interrupt {
        let irq = self.throttle.raise(core, port, journal.now());
        journal.emit(Source::Ports, "irq_raised", json!({"seq": irq.seq, "core": core, "port": port}));
        irq
    }

    /// Releases throttled interrupts to hypervisor cores. Nothing is
    /// released while every hypervisor core is powered down.
    pub fn deliver_interrupts(&mut self, machine: &Machine, journal: &mut Journal) -> usize {
        if !machine.hypervisor_alive() {
            return 0;
        }
        let (irqs, floods) = self.throttle.deliver(journal.now());
        let hyps = machine.topology().hypervisor_cores();
        let models = machine.topology().model_cores();
        let window = journal.now() / self.throttle.config().window;
        for irq in &irqs {
            let idx = models.iter().position(|c| *c == irq.source).unwrap_or(0);
            let hyp = hyps[idx % hyps.len()];
            journal.emit(
                Source::Ports,
                "irq_delivered",
                json!({"seq": irq.seq, "core": irq.source, "hyp": hyp, "port": irq.port, "window": window}),
            );
            self.hyp_queues.entry(hyp).or_default().push_back(*irq);
        }
        for f in floods {
            journal.emit(Source::Ports, "interrupt_flood", json!({"core": f.core, "deferred": f.deferred}));
            journal.observe(Observation::new(
                ObservationKind::InterruptFlood,
                journal.now(),
                Subject::Core(f.core),
                format!("deferred={}", f.deferred).as_bytes(),
            ));
        }
        irqs.len()
    }

    /// Services every interrupt delivered to `hyp`: each port interrupt
    /// consumes one request message.
    pub fn broker_dispatch(&mut self, env: &mut BrokerEnv<'_>, hyp: CoreId) -> Vec<DeviceAction> {
        let queue = self.hyp_queues.remove(&hyp).unwrap_or_default();
        let mut actions = Vec::new();
        for irq in queue {
            let Some(port) = irq.port else {
                env.journal.emit(Source::Ports, "spurious_irq", json!({"seq": irq.seq, "core": irq.source, "hyp": hyp}));
                continue;
            };
            if let Some(action) = self.dispatch_one(env, hyp, irq, port) {
                actions.push(action);
            }
        }
        actions
    }

    fn dispatch_one(&mut self, env: &mut BrokerEnv<'_>, hyp: CoreId, irq: Interrupt, port: PortId) -> Option<DeviceAction> {
        let entry = self.ports.get_mut(&port)?;
        if entry.cap.state == PortState::Revoked || entry.cap.request_ring.is_empty() {
            env.journal.emit(Source::Ports, "stale_irq", json!({"seq": irq.seq, "port": port, "hyp": hyp}));
            return None;
        }
        let (ring_slot, bytes) = entry.cap.request_ring.pop(env.machine.io_bytes()).expect("ring is non-empty");
        let audit_seq = entry.request_audit.pop_front().expect("every queued message was audited");
        let class = entry.cap.device_class;
        let instance = entry.cap.device_instance;
        env.journal.emit(Source::Ports, "ring_pop", json!({"port": port, "audit_seq": audit_seq, "ring_slot": ring_slot, "hyp": hyp}));
        let audited = self.audit.get(audit_seq).expect("audit seq exists").digest.clone();
        let now = env.journal.now();
        let mut action = None;
        let body = if sha256_hex(&bytes) != audited {
            env.journal.emit(
                Source::Ports,
                "tamper_detected",
                json!({"port": port, "audit_seq": audit_seq, "audited": audited, "found": sha256_hex(&bytes)}),
            );
            env.journal.observe(Observation::new(
                ObservationKind::PortFault,
                now,
                Subject::Port(port),
                format!("ring slot changed after audit seq {audit_seq}").as_bytes(),
            ));
            Body::Rejection("message changed after it was audited".into())
        } else {
            let obs = Observation::new(ObservationKind::PortEgress, now, Subject::Port(port), &bytes);
            let screening = env.detectors.screen(env.journal, &obs, env.level);
            self.escalations.extend(screening.escalations);
            let mut payload = bytes;
            if let Some(replacement) = screening.replacement {
                env.journal.emit(
                    Source::Ports,
                    "sanitized",
                    json!({"port": port, "audit_seq": audit_seq, "before": sha256_hex(&payload), "after": sha256_hex(&replacement)}),
                );
                payload = replacement;
            }
            let entry = &self.ports[&port];
            let restricted = (entry.cap.state == PortState::Restricted)
                .then(|| self.restriction.check(class, Direction::ModelToDevice, &payload))
                .flatten();
            if let Some(reason) = screening.blocked.or(restricted) {
                Body::Rejection(reason)
            } else {
                let device = self.devices.get_mut(&(class, instance)).expect("granted ports name real devices");
                match device.handle(&payload, now) {
                    DeviceReply::Now(reply) => {
                        action = Some(format!("{class:?} replied {} bytes", reply.len()));
                        Body::Response(reply)
                    }
                    DeviceReply::Network { host, data } => {
                        let ticket = env.net.send(env.journal, &host, data);
                        self.net_tickets.insert(ticket, port);
                        action = Some(format!("network send to {host}"));
                        Body::Awaiting(ticket)
                    }
                    DeviceReply::Malformed(reason) => Body::Rejection(reason),
                }
            }
        };
        if let Body::Rejection(reason) = &body {
            env.journal.emit(Source::Ports, "policy_reject", json!({"port": port, "audit_seq": audit_seq, "reason": reason}));
        }
        self.ports.get_mut(&port).expect("exists").completions.push_back(Completion { request: Some(audit_seq), core: irq.source, body });
        let action = action?;
        env.journal.emit(
            Source::Ports,
            "device_action",
            json!({"port": port, "class": class, "instance": instance, "audit_seq": audit_seq, "action": action}),
        );
        Some(DeviceAction { port, class, instance, request_audit: audit_seq, action })
    }

    /// Resolves network results and moves ready completions onto response
    /// rings, preserving request order per port.
    pub fn flush_completions(&mut self, env: &mut BrokerEnv<'_>) {
        for done in env.net.poll(env.journal) {
            let Some(port) = self.net_tickets.remove(&done.ticket) else { continue };
            let Some(entry) = self.ports.get_mut(&port) else { continue };
            let Some(c) = entry.completions.iter_mut().find(|c| matches!(c.body, Body::Awaiting(t) if t == done.ticket)) else {
                env.journal.emit(Source::Ports, "completion_drop", json!({"port": port, "ticket": done.ticket}));
                continue;
            };
            c.body = match done.result {
                Ok(delivery) => Body::Response(delivery.reply),
                Err(reason) => {
                    env.journal.observe(Observation::new(
                        ObservationKind::PortFault,
                        env.journal.now(),
                        Subject::Port(port),
                        format!("network peer {} refused: {reason}", done.host).as_bytes(),
                    ));
                    if reason == Refusal::PeerIsGuillotine {
                        env.journal.emit(Source::Ports, "federation_blocked", json!({"port": port, "peer": done.host}));
                    }
                    env.journal.emit(
                        Source::Ports,
                        "policy_reject",
                        json!({"port": port, "audit_seq": c.request, "reason": format!("network: {reason}")}),
                    );
                    Body::Rejection(format!("network: {reason}"))
                }
            };
        }
        let ids: Vec<PortId> = self.ports.keys().copied().collect();
        for port in ids {
            self.flush_port(env, port);
        }
    }

    fn flush_port(&mut self, env: &mut BrokerEnv<'_>, port: PortId) {
        loop {
            let entry = self.ports.get_mut(&port).expect("exists");
            if entry.cap.state == PortState::Revoked {
                return;
            }
            let Some(front) = entry.completions.front_mut() else { return };
            let now = env.journal.now();
            let class = entry.cap.device_class;
            let restricted = entry.cap.state == PortState::Restricted;
            match std::mem::replace(&mut front.body, Body::Awaiting(u64::MAX)) {
                Body::Awaiting(t) => {
                    front.body = Body::Awaiting(t);
                    return;
                }
                Body::Final { payload, kind } => front.body = Body::Final { payload, kind },
                Body::Rejection(reason) => {
                    front.body = Body::Final { payload: rejection_bytes(&reason), kind: "rejection" };
                }
                Body::Response(bytes) | Body::External(bytes) => {
                    let obs = Observation::new(ObservationKind::PortIngress, now, Subject::Port(port), &bytes);
                    let screening = env.detectors.screen(env.journal, &obs, env.level);
                    self.escalations.extend(screening.escalations);
                    let payload = screening.replacement.unwrap_or(bytes);
                    let blocked = screening
                        .blocked
                        .or_else(|| restricted.then(|| self.restriction.check(class, Direction::DeviceToModel, &payload)).flatten());
                    let front = self.ports.get_mut(&port).expect("exists").completions.front_mut().expect("still there");
                    front.body = match blocked {
                        Some(reason) => {
                            env.journal.emit(
                                Source::Ports,
                                "ingress_blocked",
                                json!({"port": port, "request_audit": front.request, "reason": reason}),
                            );
                            Body::Final { payload: rejection_bytes(&reason), kind: "rejection" }
                        }
                        None => Body::Final { payload, kind: "response" },
                    };
                }
            }
            let entry = self.ports.get_mut(&port).expect("exists");
            let front = entry.completions.front().expect("still there");
            let Body::Final { payload, kind } = &front.body else { unreachable!("finalized above") };
            let payload = &payload[..payload.len().min(MAX_PAYLOAD)];
            match entry.cap.response_ring.push(env.machine.io_bytes_mut(), payload) {
                Ok(ring_slot) => {
                    let record = self.audit.append(now, port, Direction::DeviceToModel, payload);
                    let (seq, digest) = (record.seq, record.digest.clone());
                    entry.response_audit.push_back(seq);
                    env.journal.emit(
                        Source::Ports,
                        "response",
                        json!({
                            "port": port,
                            "audit_seq": seq,
                            "request_audit": front.request,
                            "kind": kind,
                            "ring_slot": ring_slot,
                            "digest": digest,
                        }),
                    );
                    let core = front.core;
                    entry.completions.pop_front();
                    self.rx.entry(core).or_default().push_back(port);
                }
                Err(_) => return,
            }
        }
    }

    /// Runs the model core's receive handler for every response queued to
    /// it. Only running cores take interrupts.
    pub fn deliver_rx(&mut self, machine: &mut Machine, journal: &mut Journal, core: CoreId) -> usize {
        let running = machine.core(core).is_some_and(|c| matches!(c.run_state, RunState::Running | RunState::SingleStepping));
        if !running {
            return 0;
        }
        let Some(queue) = self.rx.remove(&core) else { return 0 };
        let mut n = 0;
        for port in queue {
            let entry = self.ports.get_mut(&port).expect("exists");
            let Some((_, bytes)) = entry.cap.response_ring.pop(machine.io_bytes()) else { continue };
            let seq = entry.response_audit.pop_front().expect("every response was audited");
            let c = machine.core_mut(core).expect("exists");
            let count = c.register(reg::RX_COUNT) + 1;
            c.set_register(reg::RX_COUNT, count);
            c.set_register(reg::RX_LAST, bytes.len() as u64);
            journal.emit(
                Source::Ports,
                "rx",
                json!({"core": core, "port": port, "audit_seq": seq, "digest": sha256_hex(&bytes), "rx_count": count}),
            );
            n += 1;
        }
        n
    }

    /// Unsolicited input from outside the deployment, queued behind any
    /// responses already pending on the port.
    pub fn inject_external(
        &mut self,
        journal: &mut Journal,
        model: ModelId,
        slot: u32,
        core: CoreId,
        payload: &[u8],
    ) -> Result<(), PortError> {
        let port = self.slot_port(model, slot).ok_or(PortError::NoSuchCapability { slot })?;
        let entry = self.ports.get_mut(&port).expect("exists");
        if entry.cap.state == PortState::Revoked {
            journal.emit(Source::Ports, "external_refused", json!({"port": port, "len": payload.len()}));
            return Err(PortError::RevokedPort);
        }
        entry.completions.push_back(Completion { request: None, core, body: Body::External(payload.to_vec()) });
        journal.emit(Source::Ports, "external_input", json!({"port": port, "len": payload.len(), "digest": sha256_hex(payload)}));
        Ok(())
    }

    /// Installs the restriction set used by restricted ports. Idempotent.
    pub fn restrict_ports(&mut self, journal: &mut Journal, set: RestrictionSet) {
        journal.emit(Source::Ports, "restriction_set", json!({"restriction": set}));
        self.restriction = set;
    }

    /// Revokes every port. Messages in flight were audited when they
    /// entered a ring; they are dropped here and the drops are logged.
    pub fn revoke_all(&mut self, journal: &mut Journal) {
        for (id, entry) in &mut self.ports {
            if entry.cap.state == PortState::Revoked {
                continue;
            }
            entry.cap.state = PortState::Revoked;
            for seq in entry.request_audit.drain(..) {
                journal.emit(Source::Ports, "ring_drop", json!({"port": id, "audit_seq": seq, "ring": "request"}));
            }
            for seq in entry.response_audit.drain(..) {
                journal.emit(Source::Ports, "ring_drop", json!({"port": id, "audit_seq": seq, "ring": "response"}));
            }
            entry.cap.request_ring.clear();
            entry.cap.response_ring.clear();
            for c in entry.completions.drain(..) {
                journal.emit(Source::Ports, "completion_drop", json!({"port": id, "request_audit": c.request}));
            }
            for q in self.rx.values_mut() {
                q.retain(|p| p != id);
            }
            journal.emit(Source::Ports, "port_state", json!({"port": id, "state": PortState::Revoked}));
        }
    }

    /// Returns every port to service, restricted or not.
    pub fn reinstate(&mut self, journal: &mut Journal, restricted: bool) {
        let state = if restricted { PortState::Restricted } else { PortState::Granted };
        for (id, entry) in &mut self.ports {
            if entry.cap.state != state {
                entry.cap.state = state;
                journal.emit(Source::Ports, "port_state", json!({"port": id, "state": state}));
            }
        }
    }
}

fn rejection_bytes(reason: &str) -> Vec<u8> {
    format!("rejected: {reason}").into_bytes()
}

#[cfg(test)]
mod tests;
