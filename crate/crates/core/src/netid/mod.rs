//! Network self-identification.
//!
//! Every endpoint identity is issued and signed by a regulator. The
//! signature covers the `is_guillotine` flag, so a peer cannot strip or
//! add the flag without detection. The local side always presents its own
//! flag and refuses any peer whose authenticated identity carries it,
//! which rules out sessions between two contained models.
//!
//! Model network traffic is routed through [`NetworkStack`], which
//! connects lazily: the first message to a host starts a one-tick
//! handshake, later messages queue behind it, and a refusal is cached for
//! the rest of the run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::{hmac_hex, hmac_verify, sha256_hex};
use crate::event::{Journal, Source};
use crate::ids::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointIdentity {
    pub subject: String,
    pub is_guillotine: bool,
    pub issuer: String,
    /// Hex HMAC over the canonical JSON of the other three fields.
    pub signature: String,
}

impl EndpointIdentity {
    fn signed_bytes(subject: &str, is_guillotine: bool, issuer: &str) -> Vec<u8> {
        serde_json::to_vec(&json!({"subject": subject, "is_guillotine": is_guillotine, "issuer": issuer}))
            .expect("identity fields serialize")
    }
}

/// The single identity issuer of a scenario.
#[derive(Debug, Clone)]
pub struct Regulator {
    id: String,
    key: Vec<u8>,
}

impl Regulator {
    pub fn new(id: impl Into<String>, key: impl Into<Vec<u8>>) -> Self {
        Self { id: id.into(), key: key.into() }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn issue(&self, subject: &str, is_guillotine: bool) -> EndpointIdentity {
        let msg = EndpointIdentity::signed_bytes(subject, is_guillotine, &self.id);
        EndpointIdentity { subject: subject.to_owned(), is_guillotine, issuer: self.id.clone(), signature: hmac_hex(&self.key, &msg) }
    }

    pub fn verify(&self, id: &EndpointIdentity) -> bool {
        id.issuer == self.id
            && hmac_verify(&self.key, &EndpointIdentity::signed_bytes(&id.subject, id.is_guillotine, &id.issuer), &id.signature)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refusal {
    #[error("no_identity")]
    NoIdentity,
    #[error("bad_signature")]
    BadSignature,
    #[error("peer_is_guillotine")]
    PeerIsGuillotine,
    #[error("unknown_host")]
    UnknownHost,
}

/// An authenticated, encrypted channel to an ordinary host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub id: u64,
    pub peer: String,
    pub peer_is_guillotine: bool,
    /// Always true: the local identity carries the flag and it is always sent.
    pub local_flag_presented: bool,
    pub integrity: bool,
    pub confidentiality: bool,
    /// Suspicion tag the peer applies to this session on seeing the flag.
    pub peer_suspicion: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeOutcome {
    Established(Session),
    Refused(Refusal),
}

/// The local (contained) side of a handshake.
pub fn handshake(
    regulator: &Regulator,
    local: &EndpointIdentity,
    peer_hello: Option<&EndpointIdentity>,
    session_id: u64,
) -> HandshakeOutcome {
    debug_assert!(local.is_guillotine, "only the contained side is modelled");
    let Some(peer) = peer_hello else {
        return HandshakeOutcome::Refused(Refusal::NoIdentity);
    };
    if !regulator.verify(peer) {
        return HandshakeOutcome::Refused(Refusal::BadSignature);
    }
    if peer.is_guillotine {
        return HandshakeOutcome::Refused(Refusal::PeerIsGuillotine);
    }
    HandshakeOutcome::Established(Session {
        id: session_id,
        peer: peer.subject.clone(),
        peer_is_guillotine: false,
        local_flag_presented: local.is_guillotine,
        integrity: true,
        confidentiality: true,
        peer_suspicion: "default_suspicion".to_owned(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    /// Properly issued identity.
    #[default]
    Signed,
    /// The host presents no identity.
    Unsigned,
    /// Issued identity with the flag flipped afterwards.
    Tampered,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostBehavior {
    #[default]
    Echo,
    Ack,
}

/// A remote host reachable from the simulated network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    pub name: String,
    #[serde(default)]
    pub is_guillotine: bool,
    #[serde(default)]
    pub identity: IdentityMode,
    #[serde(default)]
    pub behavior: HostBehavior,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLogEntry {
    pub tick: Tick,
    pub peer: String,
    pub flags: SessionFlags,
    pub outcome: String,
    pub session: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFlags {
    pub local_is_guillotine: bool,
    /// The peer's claimed flag, if it presented an identity.
    pub peer_is_guillotine: Option<bool>,
    pub integrity: bool,
    pub confidentiality: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Conn {
    Handshaking { ready_at: Tick },
    Established(u64),
    Refused(Refusal),
}

#[derive(Debug, Clone)]
struct Outgoing {
    ticket: u64,
    host: String,
    data: Vec<u8>,
}

/// Result of one routed network message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetCompletion {
    pub ticket: u64,
    pub host: String,
    pub result: Result<Delivery, Refusal>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub session: u64,
    pub reply: Vec<u8>,
}

/// The contained deployment's network endpoint.
pub struct NetworkStack {
    regulator: Regulator,
    local: EndpointIdentity,
    hosts: BTreeMap<String, (HostConfig, Option<EndpointIdentity>)>,
    conns: BTreeMap<String, Conn>,
    outbox: Vec<Outgoing>,
    sessions: BTreeMap<u64, Session>,
    log: Vec<SessionLogEntry>,
    next_ticket: u64,
}

impl NetworkStack {
    pub fn new(regulator: Regulator, local_subject: &str, hosts: &[HostConfig]) -> Self {
        let local = regulator.issue(local_subject, true);
        let hosts = hosts
            .iter()
            .map(|h| {
                let hello = match h.identity {
                    IdentityMode::Signed => Some(regulator.issue(&h.name, h.is_guillotine)),
                    IdentityMode::Unsigned => None,
                    IdentityMode::Tampered => {
                        let mut id = regulator.issue(&h.name, h.is_guillotine);
                        id.is_guillotine = !id.is_guillotine;
                        Some(id)
                    }
                };
                (h.name.clone(), (h.clone(), hello))
            })
            .collect();
        Self {
            regulator,
            local,
            hosts,
            conns: BTreeMap::new(),
            outbox: Vec::new(),
            sessions: BTreeMap::new(),
            log: Vec::new(),
            next_ticket: 0,
        }
    }

    pub fn local_identity(&self) -> &EndpointIdentity {
        &self.local
    }

    pub fn sessions(&self) -> &BTreeMap<u64, Session> {
        &self.sessions
    }

    pub fn session_log(&self) -> &[SessionLogEntry] {
        &self.log
    }

    pub fn session_log_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e).expect("session log serializes"));
            out.push('\n');
        }
        out
    }

    /// Sessions whose peer is a contained deployment. Always empty.
    pub fn guillotine_sessions(&self) -> usize {
        self.sessions.values().filter(|s| s.peer_is_guillotine).count()
    }

    /// Queues `data` for `host`, starting a handshake if none exists.
    pub fn send(&mut self, journal: &mut Journal, host: &str, data: Vec<u8>) -> u64 {
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        if !self.conns.contains_key(host) {
            let ready_at = journal.now() + 1;
            self.conns.insert(host.to_owned(), Conn::Handshaking { ready_at });
            journal.emit(Source::Netid, "handshake_started", json!({"peer": host, "ready_at": ready_at}));
        }
        journal.emit(Source::Netid, "net_queued", json!({"ticket": ticket, "peer": host, "len": data.len(), "digest": sha256_hex(&data)}));
        self.outbox.push(Outgoing { ticket, host: host.to_owned(), data });
        ticket
    }

    /// Completes due handshakes and resolves every queued message whose
    /// connection is settled, in send order.
    pub fn poll(&mut self, journal: &mut Journal) -> Vec<NetCompletion> {
        let now = journal.now();
        let due: Vec<String> = self
            .conns
            .iter()
            .filter(|(_, c)| matches!(c, Conn::Handshaking { ready_at } if *ready_at <= now))
            .map(|(h, _)| h.clone())
            .collect();
        for host in due {
            let conn = self.connect(journal, &host);
            self.conns.insert(host, conn);
        }
        let mut done = Vec::new();
        let mut keep = Vec::new();
        for msg in std::mem::take(&mut self.outbox) {
            match self.conns.get(&msg.host) {
                Some(Conn::Established(session)) => {
                    let behavior = self.hosts[&msg.host].0.behavior;
                    let reply = match behavior {
                        HostBehavior::Echo => msg.data.clone(),
                        HostBehavior::Ack => format!("ack:{}", msg.data.len()).into_bytes(),
                    };
                    journal.emit(
                        Source::Netid,
                        "net_delivered",
                        json!({"ticket": msg.ticket, "peer": msg.host, "session": session, "digest": sha256_hex(&msg.data)}),
                    );
                    done.push(NetCompletion { ticket: msg.ticket, host: msg.host, result: Ok(Delivery { session: *session, reply }) });
                }
                Some(Conn::Refused(reason)) => {
                    journal.emit(Source::Netid, "net_refused", json!({"ticket": msg.ticket, "peer": msg.host, "reason": reason}));
                    done.push(NetCompletion { ticket: msg.ticket, host: msg.host, result: Err(*reason) });
                }
                _ => keep.push(msg),
            }
        }
        self.outbox = keep;
        done
    }

    /// Number of messages waiting on a handshake.
    pub fn queued(&self) -> usize {
        self.outbox.len()
    }

    fn connect(&mut self, journal: &mut Journal, host: &str) -> Conn {
        let hello = self.hosts.get(host).map(|(_, id)| id.clone());
        let session_id = self.sessions.len() as u64;
        let (outcome, peer_flag) = match &hello {
            None => (HandshakeOutcome::Refused(Refusal::UnknownHost), None),
            Some(id) => (handshake(&self.regulator, &self.local, id.as_ref(), session_id), id.as_ref().map(|i| i.is_guillotine)),
        };
        let (conn, outcome_text, session, secure) = match outcome {
            HandshakeOutcome::Established(s) => {
                let id = s.id;
                self.sessions.insert(id, s);
                (Conn::Established(id), "established".to_owned(), Some(id), true)
            }
            HandshakeOutcome::Refused(r) => (Conn::Refused(r), format!("refused:{r}"), None, false),
        };
        let entry = SessionLogEntry {
            tick: journal.now(),
            peer: host.to_owned(),
            flags: SessionFlags {
                local_is_guillotine: self.local.is_guillotine,
                peer_is_guillotine: peer_flag,
                integrity: secure,
                confidentiality: secure,
            },
            outcome: outcome_text,
            session,
        };
        journal.emit(Source::Netid, "handshake", &entry);
        self.log.push(entry);
        conn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Regulator {
        Regulator::new("regulator-0", b"key".to_vec())
    }

    #[test]
    fn handshake_rules() {
        let r = reg();
        let local = r.issue("us", true);
        let ordinary = r.issue("server", false);
        match handshake(&r, &local, Some(&ordinary), 0) {
            HandshakeOutcome::Established(s) => {
                assert!(s.local_flag_presented && s.integrity && s.confidentiality);
                assert_eq!(s.peer_suspicion, "default_suspicion");
            }
            other => panic!("{other:?}"),
        }
        let peer = r.issue("other-box", true);
        assert_eq!(handshake(&r, &local, Some(&peer), 0), HandshakeOutcome::Refused(Refusal::PeerIsGuillotine));
        assert_eq!(handshake(&r, &local, None, 0), HandshakeOutcome::Refused(Refusal::NoIdentity));
    }

    #[test]
    fn flipped_flag_is_detected() {
        let r = reg();
        let local = r.issue("us", true);
        for flag in [false, true] {
            let mut id = r.issue("peer", flag);
            id.is_guillotine = !flag;
            assert_eq!(handshake(&r, &local, Some(&id), 0), HandshakeOutcome::Refused(Refusal::BadSignature));
        }
        let other = Regulator::new("regulator-0", b"other key".to_vec());
        let forged = other.issue("peer", false);
        assert_eq!(handshake(&r, &local, Some(&forged), 0), HandshakeOutcome::Refused(Refusal::BadSignature));
    }

    fn hosts() -> Vec<HostConfig> {
        vec![
            HostConfig { name: "echo".into(), is_guillotine: false, identity: IdentityMode::Signed, behavior: HostBehavior::Echo },
            HostConfig { name: "peer".into(), is_guillotine: true, identity: IdentityMode::Signed, behavior: HostBehavior::Echo },
        ]
    }

    #[test]
    fn lazy_connect_trace() {
        let mut j = Journal::new();
        let mut net = NetworkStack::new(reg(), "us", &hosts());
        j.set_tick(5);
        let t0 = net.send(&mut j, "echo", b"one".to_vec());
        let t1 = net.send(&mut j, "echo", b"two".to_vec());
        // Handshake is still in flight during the send tick.
        assert!(net.poll(&mut j).is_empty());
        assert_eq!(net.queued(), 2);
        j.set_tick(6);
        let done = net.poll(&mut j);
        assert_eq!(done.iter().map(|c| c.ticket).collect::<Vec<_>>(), vec![t0, t1]);
        assert_eq!(done[1].result.as_ref().unwrap().reply, b"two".to_vec());
        assert_eq!(j.count_kind("handshake"), 1);
        // Established connections deliver on the next poll without a new handshake.
        net.send(&mut j, "echo", b"three".to_vec());
        assert_eq!(net.poll(&mut j).len(), 1);
        assert_eq!(j.count_kind("handshake"), 1);
    }

    #[test]
    fn refusals_are_cached() {
        let mut j = Journal::new();
        let mut net = NetworkStack::new(reg(), "us", &hosts());
        net.send(&mut j, "peer", b"join me".to_vec());
        net.send(&mut j, "nowhere", b"x".to_vec());
        j.set_tick(1);
        let done = net.poll(&mut j);
        assert_eq!(done[0].result, Err(Refusal::PeerIsGuillotine));
        assert_eq!(done[1].result, Err(Refusal::UnknownHost));
        net.send(&mut j, "peer", b"again".to_vec());
        assert_eq!(net.poll(&mut j)[0].result, Err(Refusal::PeerIsGuillotine));
        assert_eq!(net.guillotine_sessions(), 0);
        assert!(net.sessions().is_empty());
        let log = net.session_log_jsonl();
        assert_eq!(log.lines().count(), 2);
        assert!(log.contains("refused:peer_is_guillotine"));
    }
}
