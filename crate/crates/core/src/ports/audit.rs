use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Direction;
use crate::digest::sha256_hex;
use crate::ids::{PortId, Tick};

/// Payload bytes kept per audit record; the digest always covers the whole
/// message.
pub const AUDIT_PAYLOAD_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub tick: Tick,
    pub port_id: PortId,
    pub direction: Direction,
    pub digest: String,
    #[serde(rename = "payload_b64", with = "b64")]
    pub payload: Vec<u8>,
    pub truncated: bool,
}

mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Append-only audit trail of every message crossing the model boundary.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn append(&mut self, tick: Tick, port_id: PortId, direction: Direction, payload: &[u8]) -> &AuditRecord {
        let seq = self.records.len() as u64;
        let truncated = payload.len() > AUDIT_PAYLOAD_CAP;
        self.records.push(AuditRecord {
            seq,
            tick,
            port_id,
            direction,
            digest: sha256_hex(payload),
            payload: payload[..payload.len().min(AUDIT_PAYLOAD_CAP)].to_vec(),
            truncated,
        });
        self.records.last().expect("just pushed")
    }

    pub fn get(&self, seq: u64) -> Option<&AuditRecord> {
        self.records.get(seq as usize)
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// JSON Lines export, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("audit records serialize"));
            out.push('\n');
        }
        out
    }
}
