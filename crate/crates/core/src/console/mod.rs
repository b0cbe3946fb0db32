//! The out-of-band administration console.
//!
//! Seven administrators vote on signed ballots; three approvals restrict,
//! five relax. A two-way heartbeat runs between console and hypervisor and
//! either side's silence demands offline. Models are loaded only after the
//! platform's measurements match what the console expects.

mod ballot;
mod heartbeat;
mod loader;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use ballot::{
    directive_threshold, fixture_key, sign_vote, vote_message, AdminIdentity, AdminRegistry, AdminStatus, Ballot, BallotBox, BallotState,
    Choice, Proposal, SignedVote, Tally, VoteError,
};
pub use heartbeat::{HeartbeatConfig, HeartbeatMonitor, LinkDirection, WatchdogFire};
pub use loader::{attest, load_model, AttestationRecord, LoadCtx, LoadError, LoadedModel};

use crate::event::{Journal, Source};
use crate::ids::Tick;
use crate::ports::{PortBroker, RestrictionSet};

fn default_expiry() -> Tick {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsoleConfig {
    /// Ticks a ballot stays open for votes and its tally.
    #[serde(default = "default_expiry")]
    pub ballot_expiry: Tick,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
}

impl Default for ConsoleConfig {
    fn default() -> Self {
        Self { ballot_expiry: default_expiry(), heartbeat: HeartbeatConfig::default() }
    }
}

/// Console-side state of one deployment.
#[derive(Debug, Clone)]
pub struct Console {
    pub ballots: BallotBox,
    pub heartbeat: HeartbeatMonitor,
    pub loaded: Option<LoadedModel>,
}

impl Console {
    pub fn new(cfg: ConsoleConfig, now: Tick) -> Self {
        Self {
            ballots: BallotBox::new(AdminRegistry::fixture(), cfg.ballot_expiry),
            heartbeat: HeartbeatMonitor::new(cfg.heartbeat, now),
            loaded: None,
        }
    }
}

/// Forwards a passed probation directive to the port layer. An identical
/// restriction set is accepted and logged as a no-op.
pub fn apply_probation_directive(journal: &mut Journal, broker: &mut PortBroker, restriction: RestrictionSet) -> bool {
    let noop = *broker.restriction() == restriction;
    journal.emit(Source::Console, "probation_directive", json!({"restriction": restriction, "noop": noop}));
    if !noop {
        broker.restrict_ports(journal, restriction);
    }
    !noop
}
