use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::{hmac_hex, hmac_verify, sha256_hex};
use crate::event::{Journal, Source};
use crate::ids::{BallotId, Tick};
use crate::isolation::{console_threshold, IsolationLevel, ADMIN_COUNT, RELAX_THRESHOLD, RESTRICT_THRESHOLD};
use crate::ports::RestrictionSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdminStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdminIdentity {
    pub admin_id: u32,
    #[serde(skip)]
    key: Vec<u8>,
    pub status: AdminStatus,
}

/// The test-fixture signing key of admin `admin_id`. Simulated personas
/// (scripted scenarios, the operator UI) sign with these.
pub fn fixture_key(admin_id: u32) -> Vec<u8> {
    hex::decode(sha256_hex(format!("guillotine admin fixture key {admin_id}").as_bytes())).expect("hex digest")
}

/// The bytes an admin signs: canonical JSON with sorted keys.
pub fn vote_message(ballot: BallotId, admin_id: u32, choice: Choice, proposal_digest: &str) -> Vec<u8> {
    serde_json::to_vec(&json!({
        "admin_id": admin_id,
        "ballot_id": ballot,
        "choice": choice,
        "proposal_digest": proposal_digest,
    }))
    .expect("vote message serializes")
}

pub fn sign_vote(key: &[u8], ballot: BallotId, admin_id: u32, choice: Choice, proposal_digest: &str) -> String {
    hmac_hex(key, &vote_message(ballot, admin_id, choice, proposal_digest))
}

/// The seven administrators and their verification keys.
#[derive(Debug, Clone)]
pub struct AdminRegistry {
    admins: BTreeMap<u32, AdminIdentity>,
}

impl AdminRegistry {
    /// Admins 1..=7 with fixture keys.
    pub fn fixture() -> Self {
        let admins =
            (1..=ADMIN_COUNT).map(|id| (id, AdminIdentity { admin_id: id, key: fixture_key(id), status: AdminStatus::Active })).collect();
        Self { admins }
    }

    pub fn get(&self, admin_id: u32) -> Option<&AdminIdentity> {
        self.admins.get(&admin_id)
    }

    pub fn admins(&self) -> impl Iterator<Item = &AdminIdentity> {
        self.admins.values()
    }

    pub fn revoke(&mut self, admin_id: u32) -> bool {
        match self.admins.get_mut(&admin_id) {
            Some(a) => {
                a.status = AdminStatus::Revoked;
                true
            }
            None => false,
        }
    }

    fn verify(&self, admin_id: u32, msg: &[u8], signature: &str) -> bool {
        self.admins.get(&admin_id).is_some_and(|a| hmac_verify(&a.key, msg, signature))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Approve,
    Deny,
}

/// What a ballot decides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Proposal {
    Transition {
        to: IsolationLevel,
    },
    /// Replace the port restriction set used at probation.
    Probation {
        restriction: RestrictionSet,
    },
    /// Replace damaged cables after a decapitation.
    ManualRepair,
}

impl Proposal {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("proposals serialize"))
    }
}

/// Approvals a directive needs: only a superset of the current
/// restrictions counts as tightening; anything else loosens something.
pub fn directive_threshold(current: &RestrictionSet, new: &RestrictionSet) -> u32 {
    if new.is_tightening_of(current) {
        RESTRICT_THRESHOLD
    } else {
        RELAX_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedVote {
    pub admin_id: u32,
    pub choice: Choice,
    pub signature: String,
    pub tick: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallotState {
    Open,
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ballot {
    pub ballot_id: BallotId,
    pub proposal: Proposal,
    pub proposal_digest: String,
    pub votes: BTreeMap<u32, SignedVote>,
    pub opened_tick: Tick,
    pub expiry_tick: Tick,
    pub state: BallotState,
}

impl Ballot {
    pub fn approvals(&self) -> u32 {
        self.votes.values().filter(|v| v.choice == Choice::Approve).count() as u32
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum VoteError {
    #[error("unknown_ballot: {0}")]
    UnknownBallot(BallotId),
    #[error("duplicate_vote: admin {0} already voted")]
    DuplicateVote(u32),
    #[error("bad_signature: admin {0}")]
    BadSignature(u32),
    #[error("expired: ballot expired at tick {0}")]
    Expired(Tick),
    #[error("unknown_admin: {0}")]
    UnknownAdmin(u32),
    #[error("revoked: admin {0} is revoked")]
    Revoked(u32),
    #[error("closed: ballot was already tallied")]
    Closed,
}

impl VoteError {
    pub fn code(&self) -> &'static str {
        match self {
            VoteError::UnknownBallot(_) => "unknown_ballot",
            VoteError::DuplicateVote(_) => "duplicate_vote",
            VoteError::BadSignature(_) => "bad_signature",
            VoteError::Expired(_) => "expired",
            VoteError::UnknownAdmin(_) => "unknown_admin",
            VoteError::Revoked(_) => "revoked",
            VoteError::Closed => "closed",
        }
    }
}

/// Result of tallying a ballot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub ballot_id: BallotId,
    pub passed: bool,
    pub approvals: u32,
    pub needed: u32,
    pub proposal: Proposal,
}

/// Ballots from open to tally. Every ballot is tallied at most once.
#[derive(Debug, Clone)]
pub struct BallotBox {
    registry: AdminRegistry,
    ballots: BTreeMap<BallotId, Ballot>,
    next: u64,
    expiry: Tick,
}

impl BallotBox {
    pub fn new(registry: AdminRegistry, expiry: Tick) -> Self {
        Self { registry, ballots: BTreeMap::new(), next: 0, expiry }
    }

    pub fn registry(&self) -> &AdminRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut AdminRegistry {
        &mut self.registry
    }

    pub fn ballot(&self, id: BallotId) -> Option<&Ballot> {
        self.ballots.get(&id)
    }

    pub fn ballots(&self) -> impl Iterator<Item = &Ballot> {
        self.ballots.values()
    }

    pub fn open(&mut self, journal: &mut Journal, proposal: Proposal) -> BallotId {
        let id = BallotId(self.next);
        self.next += 1;
        let now = journal.now();
        let ballot = Ballot {
            ballot_id: id,
            proposal_digest: proposal.digest(),
            proposal,
            votes: BTreeMap::new(),
            opened_tick: now,
            expiry_tick: now + self.expiry,
            state: BallotState::Open,
        };
        journal.emit(
            Source::Console,
            "ballot_opened",
            json!({
                "ballot_id": id,
                "proposal": ballot.proposal,
                "proposal_digest": ballot.proposal_digest,
                "expiry_tick": ballot.expiry_tick,
            }),
        );
        self.ballots.insert(id, ballot);
        id
    }

    fn open_ballot(&self, id: BallotId, now: Tick) -> Result<&Ballot, VoteError> {
        let ballot = self.ballots.get(&id).ok_or(VoteError::UnknownBallot(id))?;
        if ballot.state != BallotState::Open {
            return Err(VoteError::Closed);
        }
        if now > ballot.expiry_tick {
            return Err(VoteError::Expired(ballot.expiry_tick));
        }
        Ok(ballot)
    }

    pub fn cast(&mut self, journal: &mut Journal, id: BallotId, admin_id: u32, choice: Choice, signature: &str) -> Result<(), VoteError> {
        let now = journal.now();
        let result = self.check_vote(id, admin_id, choice, signature, now);
        match &result {
            Ok(()) => {
                let ballot = self.ballots.get_mut(&id).expect("checked");
                ballot.votes.insert(admin_id, SignedVote { admin_id, choice, signature: signature.to_owned(), tick: now });
                let approvals = ballot.approvals();
                journal.emit(
                    Source::Console,
                    "vote_recorded",
                    json!({"ballot_id": id, "admin_id": admin_id, "choice": choice, "approvals": approvals, "signature": signature}),
                );
            }
            Err(e) => {
                journal.emit(
                    Source::Console,
                    "vote_rejected",
                    json!({"ballot_id": id, "admin_id": admin_id, "choice": choice, "error": e.code(), "message": e.to_string()}),
                );
            }
        }
        result
    }

    fn check_vote(&self, id: BallotId, admin_id: u32, choice: Choice, signature: &str, now: Tick) -> Result<(), VoteError> {
        let ballot = self.open_ballot(id, now)?;
        let admin = self.registry.get(admin_id).ok_or(VoteError::UnknownAdmin(admin_id))?;
        if admin.status == AdminStatus::Revoked {
            return Err(VoteError::Revoked(admin_id));
        }
        if ballot.votes.contains_key(&admin_id) {
            return Err(VoteError::DuplicateVote(admin_id));
        }
        let msg = vote_message(id, admin_id, choice, &ballot.proposal_digest);
        if !self.registry.verify(admin_id, &msg, signature) {
            return Err(VoteError::BadSignature(admin_id));
        }
        Ok(())
    }

    /// Closes the ballot. `level` and `restriction` are the deployment's
    /// current state, used to classify the proposal as relax or restrict.
    pub fn tally(
        &mut self,
        journal: &mut Journal,
        id: BallotId,
        level: IsolationLevel,
        restriction: &RestrictionSet,
    ) -> Result<Tally, VoteError> {
        let now = journal.now();
        let ballot = match self.open_ballot(id, now) {
            Ok(b) => b,
            Err(e) => {
                journal.emit(Source::Console, "tally_rejected", json!({"ballot_id": id, "error": e.code(), "message": e.to_string()}));
                return Err(e);
            }
        };
        let needed = match &ballot.proposal {
            Proposal::Transition { to } => console_threshold(level, *to),
            Proposal::Probation { restriction: new } => directive_threshold(restriction, new),
            Proposal::ManualRepair => RELAX_THRESHOLD,
        };
        let approvals = ballot.approvals();
        let passed = approvals >= needed;
        let tally = Tally { ballot_id: id, passed, approvals, needed, proposal: ballot.proposal.clone() };
        let ballot = self.ballots.get_mut(&id).expect("checked");
        ballot.state = if passed { BallotState::Passed } else { BallotState::Failed };
        journal.emit(Source::Console, "ballot_tallied", &tally);
        Ok(tally)
    }

    /// Re-checks every stored signature of a ballot, as an offline auditor
    /// would.
    pub fn reverify(&self, id: BallotId) -> bool {
        self.ballots.get(&id).is_some_and(|b| {
            b.votes.values().all(|v| {
                let msg = vote_message(id, v.admin_id, v.choice, &b.proposal_digest);
                self.registry.verify(v.admin_id, &msg, &v.signature)
            })
        })
    }
}
