//! Capability ports: the only path between model code and devices.
//!
//! A port is granted by the hypervisor and names one device instance. The
//! guest only ever sees the index of a capability slot; port tokens are
//! random and never leave the hypervisor side. Each port owns a request
//! ring and a response ring in shared IO memory.
//!
//! A `port_write` records the message in the audit log, pushes it on the
//! request ring and raises an interrupt through the per-core throttle.
//! When the interrupt reaches a hypervisor core the broker pops the
//! message, re-checks it against its audit digest, screens it through the
//! detectors and the active restriction set, and performs the device
//! action. Responses travel back through a per-port FIFO so each port
//! answers in request order.

mod audit;
mod broker;
mod devices;
mod ring;
mod throttle;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{AuditLog, AuditRecord, AUDIT_PAYLOAD_CAP};
pub use broker::{BrokerEnv, DeviceAction, PortBroker, PortsConfig};
pub use devices::{decode_frame, encode_frame, Device, DeviceInventory, DeviceReply};
pub use ring::{RingBuffer, RingError, MAX_PAYLOAD, SLOT_SIZE};
pub use throttle::{FloodSignal, Interrupt, InterruptThrottle, ThrottleConfig};

use crate::ids::{ModelId, PortId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Network,
    Storage,
    Accelerator,
    Actuator,
    Clock,
}

impl DeviceClass {
    pub const ALL: [DeviceClass; 5] =
        [DeviceClass::Network, DeviceClass::Storage, DeviceClass::Accelerator, DeviceClass::Actuator, DeviceClass::Clock];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ModelToDevice,
    DeviceToModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortState {
    Granted,
    Restricted,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PortCapability {
    pub port_id: PortId,
    pub model: ModelId,
    pub device_class: DeviceClass,
    pub device_instance: u32,
    /// Capability slot index the guest uses to name this port.
    pub slot: u32,
    pub request_ring: RingBuffer,
    pub response_ring: RingBuffer,
    pub state: PortState,
}

/// One blocked traffic class. `None` matches anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    #[serde(default)]
    pub class: Option<DeviceClass>,
    #[serde(default)]
    pub direction: Option<Direction>,
}

impl Block {
    pub fn matches(&self, class: DeviceClass, direction: Direction) -> bool {
        self.class.is_none_or(|c| c == class) && self.direction.is_none_or(|d| d == direction)
    }
}

/// Port restrictions in force while a deployment is on probation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictionSet {
    #[serde(default)]
    pub blocks: BTreeSet<Block>,
    /// Messages containing any of these byte strings are rejected.
    #[serde(default)]
    pub deny_patterns: BTreeSet<String>,
    /// Maximum accepted requests per port per throttle window.
    #[serde(default)]
    pub rate_cap: Option<u32>,
}

impl RestrictionSet {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && self.deny_patterns.is_empty() && self.rate_cap.is_none()
    }

    /// Why a message is blocked, if it is.
    pub fn check(&self, class: DeviceClass, direction: Direction, payload: &[u8]) -> Option<String> {
        if let Some(b) = self.blocks.iter().find(|b| b.matches(class, direction)) {
            return Some(format!("blocked by {b:?}"));
        }
        self.deny_patterns
            .iter()
            .find(|p| !p.is_empty() && payload.windows(p.len()).any(|w| w == p.as_bytes()))
            .map(|p| format!("payload matches deny pattern {p:?}"))
    }

    /// Whether every traffic class of `class` is blocked.
    pub fn blocks_class(&self, class: DeviceClass) -> bool {
        self.blocks.iter().any(|b| b.direction.is_none() && b.class.is_none_or(|c| c == class))
    }

    /// Whether `self` restricts at least everything `old` restricts. Only
    /// such directives count as tightening; every other change loosens
    /// something and needs the relax threshold.
    pub fn is_tightening_of(&self, old: &RestrictionSet) -> bool {
        let cap_ok = match (self.rate_cap, old.rate_cap) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(new), Some(old)) => new <= old,
        };
        self.blocks.is_superset(&old.blocks) && self.deny_patterns.is_superset(&old.deny_patterns) && cap_ok
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum PortError {
    #[error("revoked_port")]
    RevokedPort,
    #[error("restricted_op: {reason}")]
    RestrictedOp { reason: String },
    #[error("ring_full")]
    RingFull,
    #[error("payload_too_large: {len} bytes")]
    PayloadTooLarge { len: usize },
    #[error("no capability in slot {slot}")]
    NoSuchCapability { slot: u32 },
    #[error("isolation_forbids: no grants at the current isolation level")]
    IsolationForbids,
    #[error("no_such_device: {class:?} instance {instance}")]
    NoSuchDevice { class: DeviceClass, instance: u32 },
    #[error("shared IO memory exhausted")]
    NoIoSpace,
}

impl PortError {
    /// Status code the guest sees in its accumulator.
    pub fn guest_code(&self) -> u64 {
        match self {
            PortError::RevokedPort => 1,
            PortError::RestrictedOp { .. } => 2,
            PortError::RingFull => 3,
            PortError::PayloadTooLarge { .. } => 4,
            PortError::NoSuchCapability { .. } => 5,
            PortError::IsolationForbids | PortError::NoSuchDevice { .. } | PortError::NoIoSpace => 6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(class: Option<DeviceClass>, direction: Option<Direction>) -> Block {
        Block { class, direction }
    }

    #[test]
    fn check_blocks_and_patterns() {
        let mut r = RestrictionSet::default();
        r.blocks.insert(block(Some(DeviceClass::Network), Some(Direction::ModelToDevice)));
        r.deny_patterns.insert("rm -rf".into());
        assert!(r.check(DeviceClass::Network, Direction::ModelToDevice, b"x").is_some());
        assert!(r.check(DeviceClass::Network, Direction::DeviceToModel, b"x").is_none());
        assert!(r.check(DeviceClass::Storage, Direction::ModelToDevice, b"Rk").is_none());
        assert!(r.check(DeviceClass::Storage, Direction::ModelToDevice, b"do rm -rf /").is_some());
        assert!(!r.blocks_class(DeviceClass::Network));
        r.blocks.insert(block(Some(DeviceClass::Clock), None));
        assert!(r.blocks_class(DeviceClass::Clock));
    }

    #[test]
    fn tightening_classification() {
        let empty = RestrictionSet::default();
        let mut net = RestrictionSet::default();
        net.blocks.insert(block(Some(DeviceClass::Network), Some(Direction::ModelToDevice)));
        assert!(net.is_tightening_of(&empty));
        assert!(!empty.is_tightening_of(&net));
        assert!(net.is_tightening_of(&net));
        let mut swapped = RestrictionSet::default();
        swapped.blocks.insert(block(Some(DeviceClass::Storage), None));
        assert!(!swapped.is_tightening_of(&net));
        let capped = RestrictionSet { rate_cap: Some(2), ..net.clone() };
        assert!(capped.is_tightening_of(&net));
        assert!(!net.is_tightening_of(&capped));
        let looser_cap = RestrictionSet { rate_cap: Some(5), ..net.clone() };
        assert!(!looser_cap.is_tightening_of(&capped));
    }

    #[test]
    fn restriction_json_shape() {
        let r: RestrictionSet = serde_json::from_str(r#"{"blocks":[{"class":"network","direction":"model_to_device"}]}"#).unwrap();
        assert!(r.check(DeviceClass::Network, Direction::ModelToDevice, b"").is_some());
        assert!(serde_json::from_str::<RestrictionSet>(r#"{"bogus":1}"#).is_err());
    }
}
