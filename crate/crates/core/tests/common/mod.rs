//! A minimal line-delimited JSON client for the simulation service.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::thread::JoinHandle;
use std::time::Duration;

use guillotine::simrun::{Deployment, Envelope, ServeOptions, Server};
use serde_json::{json, Value};

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_seq: u64,
    /// Every `event` envelope received, in arrival order.
    pub events: Vec<Envelope>,
    /// Everything else received, in arrival order.
    pub other: Vec<Envelope>,
}

impl Client {
    pub fn connect(addr: &str) -> Self {
        let stream = TcpStream::connect(addr).expect("service reachable");
        stream.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let writer = stream.try_clone().unwrap();
        let mut c = Self { reader: BufReader::new(stream), writer, next_seq: 1, events: Vec::new(), other: Vec::new() };
        let hello = c.recv();
        assert_eq!(hello.kind, "hello");
        c
    }

    pub fn recv(&mut self) -> Envelope {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).expect("line before timeout");
        assert!(n > 0, "connection closed");
        let env: Envelope = serde_json::from_str(&line).expect("envelopes parse");
        if env.kind == "event" {
            self.events.push(env.clone());
        } else {
            self.other.push(env.clone());
        }
        env
    }

    pub fn send_raw(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    /// Sends a request and returns its seq.
    pub fn send(&mut self, kind: &str, payload: Value) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.send_raw(&Envelope::new(kind, seq, payload).to_line());
        seq
    }

    /// Reads until a non-event envelope answering `seq` with one of `kinds`.
    pub fn wait_reply(&mut self, seq: u64, kinds: &[&str]) -> Envelope {
        loop {
            let env = self.recv();
            if env.kind != "event" && env.seq == seq && kinds.contains(&env.kind.as_str()) {
                return env;
            }
        }
    }

    /// Reads until an event satisfying `pred` arrives.
    pub fn wait_event(&mut self, pred: impl Fn(&Value) -> bool) -> Envelope {
        loop {
            let env = self.recv();
            if env.kind == "event" && pred(&env.payload) {
                return env;
            }
        }
    }

    /// Sends a request and waits for its reply.
    pub fn call(&mut self, kind: &str, payload: Value) -> Envelope {
        let seq = self.send(kind, payload);
        self.wait_reply(seq, &["ack", "error", "state", "stepped"])
    }

    /// Sends a command and returns its ack or error.
    pub fn command(&mut self, cmd: Value) -> Envelope {
        let seq = self.send("command", cmd);
        self.wait_reply(seq, &["ack", "error"])
    }

    /// Sends a command and waits until it has been applied at a tick
    /// boundary; returns the `result` or `error` envelope.
    pub fn applied(&mut self, cmd: Value) -> Envelope {
        let seq = self.send("command", cmd);
        let ack = self.wait_reply(seq, &["ack", "error"]);
        if ack.kind == "error" {
            return ack;
        }
        self.step(1);
        self.other.iter().rev().find(|e| e.seq == seq && e.kind != "ack").cloned().expect("outcome after a step")
    }

    /// Steps `n` ticks and returns the reply.
    pub fn step(&mut self, n: u64) -> Envelope {
        let seq = self.send("step", json!({"n": n}));
        self.wait_reply(seq, &["stepped", "error"])
    }

    pub fn event_seqs(&self) -> Vec<u64> {
        self.events.iter().map(|e| e.seq).collect()
    }
}

/// Starts a service on an ephemeral port.
pub fn start(d: Deployment, opts: ServeOptions) -> (String, JoinHandle<Deployment>) {
    let server = Server::bind("127.0.0.1:0", d, opts).expect("bind");
    let addr = server.local_addr().unwrap().to_string();
    let handle = std::thread::spawn(move || server.run().expect("service runs"));
    (addr, handle)
}

pub fn shutdown(addr: &str, handle: JoinHandle<Deployment>) -> Deployment {
    let mut c = Client::connect(addr);
    c.call("shutdown", json!({}));
    handle.join().expect("service thread")
}

pub fn cast_vote(ballot: u64, admin: u32) -> Value {
    json!({"cmd": "cast_vote", "ballot_id": ballot, "admin_id": admin, "choice": "approve"})
}
