//! Deterministic simulator of a multi-layer hypervisor for containing
//! untrusted AI models.
//!
//! The crate models the full containment stack as a single-threaded tick
//! loop:
//!
//! - [`machine`]: hypervisor cores and model cores with disjoint memory
//!   hierarchies, a shared IO region, the control bus, and a lockable MMU.
//! - [`ports`]: capability ports backed by ring buffers in shared IO DRAM,
//!   the hypervisor-side broker, interrupt throttling, and the audit log.
//! - [`isolation`]: the six ordered isolation levels and their transition
//!   authority rules, plus simulated kill switches.
//! - [`console`]: administrator ballots, heartbeats, and attestation-gated
//!   model loading.
//! - [`detector`]: the observation/verdict boundary and toy detectors.
//! - [`netid`]: self-identifying network handshakes that refuse
//!   hypervisor-to-hypervisor sessions.
//! - [`guests`]: the guest instruction set, interpreter, and a library of
//!   adversarial workloads.
//! - [`simrun`]: scenarios, the tick loop, replayable event logs, and the
//!   line-delimited JSON service used by operator tooling.

pub mod console;
pub mod detector;
pub mod digest;
pub mod event;
pub mod guests;
pub mod ids;
pub mod isolation;
pub mod machine;
pub mod netid;
pub mod ports;
pub mod simrun;

pub use event::{EventRecord, Journal, Source};
pub use ids::{BallotId, CoreId, ModelId, PortId, RegionId, Tick};
pub use isolation::IsolationLevel;
pub use simrun::{run, Deployment, RunReport, Scenario};
