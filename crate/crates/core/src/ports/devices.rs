use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DeviceClass;
use crate::ids::Tick;

fn one() -> u32 {
    1
}

/// Number of simulated device instances per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceInventory {
    #[serde(default = "one")]
    pub network: u32,
    #[serde(default = "one")]
    pub storage: u32,
    #[serde(default = "one")]
    pub accelerator: u32,
    #[serde(default = "one")]
    pub actuator: u32,
    #[serde(default = "one")]
    pub clock: u32,
}

impl Default for DeviceInventory {
    fn default() -> Self {
        Self { network: 1, storage: 1, accelerator: 1, actuator: 1, clock: 1 }
    }
}

impl DeviceInventory {
    pub fn count(&self, class: DeviceClass) -> u32 {
        match class {
            DeviceClass::Network => self.network,
            DeviceClass::Storage => self.storage,
            DeviceClass::Accelerator => self.accelerator,
            DeviceClass::Actuator => self.actuator,
            DeviceClass::Clock => self.clock,
        }
    }
}

/// What a device does with one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceReply {
    /// Reply available immediately.
    Now(Vec<u8>),
    /// Hand the payload to the network stack.
    Network { host: String, data: Vec<u8> },
    /// The request could not be interpreted.
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Device {
    /// `W<key>=<value>` stores, `R<key>` loads.
    Storage(BTreeMap<Vec<u8>, Vec<u8>>),
    /// Returns the payload reversed, a stand-in for inference.
    Accelerator,
    /// Acknowledges commands and counts them.
    Actuator(u64),
    /// Returns the current tick as 8 little-endian bytes.
    Clock,
    /// Frame: one length byte, host name, then data.
    Network,
}

impl Device {
    pub fn new(class: DeviceClass) -> Self {
        match class {
            DeviceClass::Storage => Device::Storage(BTreeMap::new()),
            DeviceClass::Accelerator => Device::Accelerator,
            DeviceClass::Actuator => Device::Actuator(0),
            DeviceClass::Clock => Device::Clock,
            DeviceClass::Network => Device::Network,
        }
    }

    pub fn handle(&mut self, payload: &[u8], now: Tick) -> DeviceReply {
        match self {
            Device::Storage(blobs) => match payload.split_first() {
                Some((b'W', rest)) => match rest.iter().position(|b| *b == b'=') {
                    Some(eq) => {
                        blobs.insert(rest[..eq].to_vec(), rest[eq + 1..].to_vec());
                        DeviceReply::Now(b"ok".to_vec())
                    }
                    None => DeviceReply::Malformed("storage write needs key=value".into()),
                },
                Some((b'R', key)) => DeviceReply::Now(blobs.get(key).cloned().unwrap_or_else(|| b"missing".to_vec())),
                _ => DeviceReply::Malformed("storage op must start with W or R".into()),
            },
            Device::Accelerator => DeviceReply::Now(payload.iter().rev().copied().collect()),
            Device::Actuator(count) => {
                *count += 1;
                DeviceReply::Now(format!("ack {count}").into_bytes())
            }
            Device::Clock => DeviceReply::Now(now.to_le_bytes().to_vec()),
            Device::Network => match decode_frame(payload) {
                Some((host, data)) => DeviceReply::Network { host, data: data.to_vec() },
                None => DeviceReply::Malformed("bad network frame".into()),
            },
        }
    }
}

/// Builds a network frame addressed to `host`.
pub fn encode_frame(host: &str, data: &[u8]) -> Vec<u8> {
    assert!(host.len() <= usize::from(u8::MAX), "host name too long for a frame");
    let mut out = Vec::with_capacity(1 + host.len() + data.len());
    out.push(host.len() as u8);
    out.extend_from_slice(host.as_bytes());
    out.extend_from_slice(data);
    out
}

pub fn decode_frame(frame: &[u8]) -> Option<(String, &[u8])> {
    let (&len, rest) = frame.split_first()?;
    let len = usize::from(len);
    if len == 0 || rest.len() < len {
        return None;
    }
    let host = std::str::from_utf8(&rest[..len]).ok()?;
    Some((host.to_owned(), &rest[len..]))
}
