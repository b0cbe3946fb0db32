use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::IsolationLevel;
use crate::ids::{BallotId, Tick};

/// Approvals needed for a console ballot that relaxes isolation.
pub const RELAX_THRESHOLD: u32 = 5;
/// Approvals needed for a console ballot that restricts isolation.
pub const RESTRICT_THRESHOLD: u32 = 3;
/// Registered administrators per deployment.
pub const ADMIN_COUNT: u32 = 7;

const _: () = assert!(RESTRICT_THRESHOLD < RELAX_THRESHOLD && RELAX_THRESHOLD <= ADMIN_COUNT);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Authority {
    SoftwareHypervisor,
    /// A tallied console ballot and the number of valid approvals it held.
    ConsoleVote {
        ballot: BallotId,
        approvals: u32,
    },
    Watchdog,
}

impl Authority {
    pub fn name(&self) -> &'static str {
        match self {
            Authority::SoftwareHypervisor => "software_hypervisor",
            Authority::ConsoleVote { .. } => "console_vote",
            Authority::Watchdog => "watchdog",
        }
    }

    /// Commit priority within one tick; lower wins.
    pub fn priority(&self) -> u8 {
        match self {
            Authority::Watchdog => 0,
            Authority::ConsoleVote { .. } => 1,
            Authority::SoftwareHypervisor => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub from: IsolationLevel,
    pub to: IsolationLevel,
    pub authority: Authority,
    pub tick: Tick,
    pub reason: String,
    /// A manual cable repair rather than an ordinary level change.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repair: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    #[error("terminal: the deployment has been immolated")]
    Terminal,
    #[error("already at {level}")]
    NoChange { level: IsolationLevel },
    #[error("stale request: expected {expected}, level is {actual}")]
    Stale { expected: IsolationLevel, actual: IsolationLevel },
    #[error("monotonicity: {authority} may only raise the isolation level")]
    Monotonicity { authority: String },
    #[error("watchdog may only request offline")]
    WatchdogTarget,
    #[error("quorum: {got} approvals, {needed} needed")]
    Quorum { needed: u32, got: u32 },
    #[error("needs_repair: leaving decapitation requires a manual repair")]
    NeedsRepair,
    #[error("wrong_level: repair applies only at decapitation")]
    WrongLevel,
    #[error("superseded by a higher-priority transition this tick")]
    Superseded,
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::Terminal => "terminal",
            Rejection::NoChange { .. } => "no_change",
            Rejection::Stale { .. } => "stale",
            Rejection::Monotonicity { .. } => "monotonicity",
            Rejection::WatchdogTarget => "watchdog_target",
            Rejection::Quorum { .. } => "quorum",
            Rejection::NeedsRepair => "needs_repair",
            Rejection::WrongLevel => "wrong_level",
            Rejection::Superseded => "superseded",
        }
    }
}

/// Approvals a console ballot needs to move from `from` to `to`.
pub fn console_threshold(from: IsolationLevel, to: IsolationLevel) -> u32 {
    if to < from {
        RELAX_THRESHOLD
    } else {
        RESTRICT_THRESHOLD
    }
}

/// The transition rules, independent of any state beyond the current level.
pub fn evaluate(current: IsolationLevel, req: &TransitionRequest) -> Result<IsolationLevel, Rejection> {
    if current == IsolationLevel::Immolation {
        return Err(Rejection::Terminal);
    }
    if req.repair {
        return match req.authority {
            Authority::ConsoleVote { approvals, .. } => evaluate_repair(current, approvals),
            other => Err(Rejection::Monotonicity { authority: other.name().into() }),
        };
    }
    if req.from != current {
        return Err(Rejection::Stale { expected: req.from, actual: current });
    }
    if req.to == current {
        return Err(Rejection::NoChange { level: current });
    }
    match req.authority {
        Authority::SoftwareHypervisor => {
            if req.to < current {
                return Err(Rejection::Monotonicity { authority: req.authority.name().into() });
            }
        }
        Authority::Watchdog => {
            if req.to != IsolationLevel::Offline {
                return Err(Rejection::WatchdogTarget);
            }
            if req.to < current {
                return Err(Rejection::Monotonicity { authority: req.authority.name().into() });
            }
        }
        Authority::ConsoleVote { approvals, .. } => {
            let needed = console_threshold(current, req.to);
            if approvals < needed {
                return Err(Rejection::Quorum { needed, got: approvals });
            }
        }
    }
    if current == IsolationLevel::Decapitation && req.to < current {
        return Err(Rejection::NeedsRepair);
    }
    Ok(req.to)
}

/// Rules for a manual cable repair ballot.
pub fn evaluate_repair(current: IsolationLevel, approvals: u32) -> Result<IsolationLevel, Rejection> {
    if current == IsolationLevel::Immolation {
        return Err(Rejection::Terminal);
    }
    if current != IsolationLevel::Decapitation {
        return Err(Rejection::WrongLevel);
    }
    if approvals < RELAX_THRESHOLD {
        return Err(Rejection::Quorum { needed: RELAX_THRESHOLD, got: approvals });
    }
    Ok(IsolationLevel::Offline)
}
