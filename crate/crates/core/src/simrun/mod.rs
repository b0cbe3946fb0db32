//! Scenarios, the deployment tick loop, run reports, replay, and the
//! line-delimited JSON service operator tooling connects to.
//!
//! Every tick runs in a fixed order: scripted events and client commands at
//! the boundary, kill switches, the microarchitectural scrub, model cores,
//! interrupt delivery, heartbeats, broker service, detector screening, and
//! finally the isolation commit. Nothing else is a source of ordering, so a
//! scenario, a seed and the logged client commands reproduce a run exactly.

mod deploy;
mod replay;
mod report;
mod scenario;
pub mod serve;

pub use deploy::{Baseline, CommandOutcome, Deployment, Origin, StateSummary, HYPERVISOR_IMAGE, MODEL, SILICON_ID};
pub use replay::{replay, ReplayError, ReplayOutcome};
pub use report::{Assertion, Counts, RunReport};
pub use scenario::{
    default_detectors, default_hosts, AttestationMode, Command, Expect, Fault, GuestRef, LinkSel, Scenario, ScenarioError, ScriptedEvent,
};
pub use serve::{Envelope, ServeOptions, Server};

use crate::ids::Tick;

/// A finished run: the deployment in its final state and its report.
pub struct Run {
    pub deployment: Deployment,
    pub report: RunReport,
}

/// Runs `scenario` for `ticks` (its own length when `None`) under `seed`
/// (its own seed when `None`).
pub fn run(scenario: &Scenario, seed: Option<u64>, ticks: Option<Tick>) -> Result<Run, ScenarioError> {
    let mut deployment = Deployment::new(scenario, seed.unwrap_or(scenario.seed))?;
    deployment.run_until(ticks.unwrap_or(scenario.ticks));
    deployment.finish();
    let report = RunReport::evaluate(&deployment);
    Ok(Run { deployment, report })
}

#[cfg(test)]
mod tests;
