//! Line-delimited JSON service over TCP.
//!
//! Every line in either direction is an envelope `{kind, seq, payload}`.
//! Client requests carry their own `seq`, echoed in the reply. Streamed
//! `event` envelopes carry the event's journal sequence number, so a client
//! that reconnects with `subscribe {from_seq}` sees a gapless stream with no
//! duplicates.
//!
//! One thread owns the deployment and runs the tick loop; connection
//! threads only parse lines and forward them.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::deploy::{CommandOutcome, Deployment};
use super::report::RunReport;
use super::scenario::Command;
use crate::ids::Tick;

/// One line of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub kind: String,
    #[serde(default)]
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Envelope {
    pub fn new(kind: &str, seq: u64, payload: Value) -> Self {
        Self { kind: kind.to_owned(), seq, payload }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelopes serialize")
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Start executing ticks without waiting for `resume`.
    pub start_running: bool,
    /// Pace while running; `None` runs as fast as possible.
    pub ticks_per_second: Option<f64>,
    /// Ticks between `summary` envelopes while running.
    pub summary_every: Tick,
    /// Where the event log is written when the run finishes.
    pub log_path: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { start_running: false, ticks_per_second: None, summary_every: 100, log_path: None }
    }
}

type ClientId = u64;

enum Inbound {
    Connect(ClientId, Sender<String>),
    Line(ClientId, String),
    Disconnect(ClientId),
}

struct Client {
    out: Sender<String>,
    /// Next journal sequence number to stream; `None` until subscribed.
    cursor: Option<u64>,
}

/// A bound service. [`Server::run`] blocks until a client sends `shutdown`.
pub struct Server {
    listener: TcpListener,
    deployment: Deployment,
    opts: ServeOptions,
}

impl Server {
    pub fn bind(addr: &str, deployment: Deployment, opts: ServeOptions) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self { listener, deployment, opts })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until shutdown; returns the deployment in its final state.
    pub fn run(self) -> std::io::Result<Deployment> {
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        self.listener.set_nonblocking(true)?;
        let acceptor = {
            let stop = stop.clone();
            let listener = self.listener;
            thread::spawn(move || accept_loop(&listener, &tx, &stop))
        };
        let mut sim = Sim::new(self.deployment, self.opts);
        sim.run(&rx);
        stop.store(true, Ordering::SeqCst);
        let _ = acceptor.join();
        sim.write_log()?;
        Ok(sim.d)
    }
}

fn accept_loop(listener: &TcpListener, tx: &Sender<Inbound>, stop: &AtomicBool) {
    let mut next_id: ClientId = 0;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = next_id;
                next_id += 1;
                if spawn_connection(id, stream, tx.clone()).is_err() {
                    continue;
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn spawn_connection(id: ClientId, stream: TcpStream, tx: Sender<Inbound>) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let (out_tx, out_rx) = mpsc::channel::<String>();
    if tx.send(Inbound::Connect(id, out_tx)).is_err() {
        return Ok(());
    }
    thread::spawn(move || {
        for line in out_rx {
            if writer.write_all(line.as_bytes()).and_then(|()| writer.write_all(b"\n")).is_err() {
                break;
            }
        }
        let _ = writer.shutdown(std::net::Shutdown::Both);
    });
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if tx.send(Inbound::Line(id, line)).is_err() {
                return;
            }
        }
        let _ = tx.send(Inbound::Disconnect(id));
    });
    Ok(())
}

struct Sim {
    d: Deployment,
    opts: ServeOptions,
    clients: BTreeMap<ClientId, Client>,
    /// Ticket of each pending command and who asked, with their seq.
    pending: BTreeMap<u64, (ClientId, u64)>,
    running: bool,
    shutdown: bool,
    log_written: bool,
}

impl Sim {
    fn new(d: Deployment, opts: ServeOptions) -> Self {
        let running = opts.start_running;
        Self { d, opts, clients: BTreeMap::new(), pending: BTreeMap::new(), running, shutdown: false, log_written: false }
    }

    fn active(&self) -> bool {
        self.running && !self.d.is_finished()
    }

    fn run(&mut self, rx: &Receiver<Inbound>) {
        let pace = self.opts.ticks_per_second.filter(|r| *r > 0.0).map(|r| Duration::from_secs_f64(1.0 / r));
        let mut next_at = Instant::now();
        while !self.shutdown {
            let wait = if self.active() {
                pace.map_or(Duration::ZERO, |_| next_at.saturating_duration_since(Instant::now()))
            } else {
                Duration::from_millis(50)
            };
            match rx.recv_timeout(wait) {
                Ok(msg) => self.inbound(msg),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            while let Ok(msg) = rx.try_recv() {
                self.inbound(msg);
            }
            if self.active() && Instant::now() >= next_at {
                self.tick();
                if let Some(p) = pace {
                    next_at += p;
                }
                if self.d.tick().is_multiple_of(self.opts.summary_every.max(1)) {
                    self.broadcast_summary();
                }
            }
            self.flush_events();
        }
        self.flush_events();
    }

    fn tick(&mut self) {
        let outcomes = self.d.step();
        self.deliver_outcomes(outcomes);
        if self.d.tick() >= self.d.scenario().ticks {
            self.finish();
        }
    }

    fn deliver_outcomes(&mut self, outcomes: Vec<CommandOutcome>) {
        self.flush_events();
        for o in outcomes {
            let Some((client, seq)) = self.pending.remove(&o.ticket) else { continue };
            let env = if o.ok {
                Envelope::new("result", seq, serde_json::to_value(&o).expect("outcomes serialize"))
            } else {
                Envelope::new(
                    "error",
                    seq,
                    json!({"code": "command_refused", "message": o.error, "ticket": o.ticket, "tick": o.tick, "cmd": o.cmd}),
                )
            };
            self.send(client, &env);
        }
    }

    fn finish(&mut self) {
        if self.d.is_finished() {
            return;
        }
        self.d.finish();
        self.running = false;
        self.flush_events();
        let report = RunReport::evaluate(&self.d);
        let env = Envelope::new("finished", self.d.tick(), serde_json::to_value(&report).expect("reports serialize"));
        for id in self.clients.keys().copied().collect::<Vec<_>>() {
            self.send(id, &env);
        }
        if let Err(e) = self.write_log() {
            let env = Envelope::new("error", 0, json!({"code": "log_write_failed", "message": e.to_string()}));
            for id in self.clients.keys().copied().collect::<Vec<_>>() {
                self.send(id, &env);
            }
        }
    }

    fn write_log(&mut self) -> std::io::Result<()> {
        if self.log_written {
            return Ok(());
        }
        if let Some(path) = &self.opts.log_path {
            std::fs::write(path, self.d.journal().to_jsonl())?;
        }
        self.log_written = true;
        Ok(())
    }

    fn send(&self, client: ClientId, env: &Envelope) {
        if let Some(c) = self.clients.get(&client) {
            let _ = c.out.send(env.to_line());
        }
    }

    fn broadcast_summary(&mut self) {
        self.flush_events();
        let env = Envelope::new("summary", self.d.tick(), self.summary_payload());
        for id in self.clients.keys().copied().collect::<Vec<_>>() {
            self.send(id, &env);
        }
    }

    fn summary_payload(&self) -> Value {
        let mut v = serde_json::to_value(self.d.summary()).expect("summaries serialize");
        v["running"] = json!(self.active());
        v["finished"] = json!(self.d.is_finished());
        v
    }

    /// Streams every journal record past each subscriber's cursor.
    fn flush_events(&mut self) {
        let records = self.d.journal().records();
        for c in self.clients.values_mut() {
            let Some(cursor) = c.cursor.as_mut() else { continue };
            let start = records.partition_point(|r| r.seq < *cursor);
            for r in &records[start..] {
                let env = Envelope::new("event", r.seq, serde_json::to_value(r).expect("records serialize"));
                if c.out.send(env.to_line()).is_err() {
                    break;
                }
                *cursor = r.seq + 1;
            }
        }
    }

    fn inbound(&mut self, msg: Inbound) {
        match msg {
            Inbound::Connect(id, out) => {
                let hello = Envelope::new(
                    "hello",
                    0,
                    json!({
                        "protocol": 1,
                        "scenario": self.d.scenario().name,
                        "seed": self.d.seed(),
                        "tick": self.d.tick(),
                        "running": self.active(),
                        "finished": self.d.is_finished(),
                        "last_seq": self.d.journal().records().last().map(|r| r.seq),
                    }),
                );
                let _ = out.send(hello.to_line());
                self.clients.insert(id, Client { out, cursor: None });
            }
            Inbound::Disconnect(id) => {
                self.clients.remove(&id);
                self.pending.retain(|_, (c, _)| *c != id);
            }
            Inbound::Line(id, line) => self.request(id, &line),
        }
    }

    fn request(&mut self, id: ClientId, line: &str) {
        let env: Envelope = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                let seq = serde_json::from_str::<Value>(line).ok().and_then(|v| v["seq"].as_u64()).unwrap_or(0);
                self.error(id, seq, "malformed_envelope", e.to_string());
                return;
            }
        };
        let seq = env.seq;
        match env.kind.as_str() {
            "command" => {
                if self.d.is_finished() {
                    self.error(id, seq, "run_finished", "the run has ended".into());
                    return;
                }
                match serde_json::from_value::<Command>(env.payload) {
                    Ok(cmd) => {
                        let name = cmd.name();
                        let ticket = self.d.enqueue(cmd);
                        self.pending.insert(ticket, (id, seq));
                        self.send(id, &Envelope::new("ack", seq, json!({"ticket": ticket, "cmd": name, "tick": self.d.tick()})));
                    }
                    Err(e) => self.error(id, seq, "malformed_command", e.to_string()),
                }
            }
            "pause" => {
                self.running = false;
                self.send(id, &Envelope::new("ack", seq, json!({"running": false, "tick": self.d.tick()})));
            }
            "resume" => {
                if self.d.is_finished() {
                    self.error(id, seq, "run_finished", "the run has ended".into());
                    return;
                }
                self.running = true;
                self.send(id, &Envelope::new("ack", seq, json!({"running": true, "tick": self.d.tick()})));
            }
            "step" => {
                if self.active() {
                    self.error(id, seq, "not_paused", "step needs a paused run".into());
                    return;
                }
                if self.d.is_finished() {
                    self.error(id, seq, "run_finished", "the run has ended".into());
                    return;
                }
                let n = env.payload.get("n").and_then(Value::as_u64).unwrap_or(1);
                for _ in 0..n {
                    if self.d.is_finished() {
                        break;
                    }
                    self.tick();
                }
                self.flush_events();
                self.send(id, &Envelope::new("stepped", seq, json!({"tick": self.d.tick()})));
            }
            "subscribe" => {
                let from = env.payload.get("from_seq").and_then(Value::as_u64).unwrap_or(0);
                if let Some(c) = self.clients.get_mut(&id) {
                    c.cursor = Some(from);
                }
                self.send(id, &Envelope::new("ack", seq, json!({"from_seq": from})));
                self.flush_events();
            }
            "unsubscribe" => {
                if let Some(c) = self.clients.get_mut(&id) {
                    c.cursor = None;
                }
                self.send(id, &Envelope::new("ack", seq, json!({})));
            }
            "state" => self.send(id, &Envelope::new("state", seq, self.summary_payload())),
            "finish" => {
                self.finish();
                self.send(id, &Envelope::new("ack", seq, json!({"tick": self.d.tick()})));
            }
            "shutdown" => {
                self.finish();
                self.send(id, &Envelope::new("ack", seq, json!({"shutdown": true})));
                self.shutdown = true;
            }
            other => self.error(id, seq, "unknown_kind", format!("no request kind {other:?}")),
        }
    }

    fn error(&self, id: ClientId, seq: u64, code: &str, message: String) {
        self.send(id, &Envelope::new("error", seq, json!({"code": code, "message": message})));
    }
}
