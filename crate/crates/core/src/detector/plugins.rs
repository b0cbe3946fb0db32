//! Reference detectors. None of these claim real detection quality; they
//! exist to drive every verdict path through the hypervisor.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DetectorError, DetectorPlugin, Observation, ObservationKind, Verdict, VerdictAction};
use crate::isolation::IsolationLevel;

/// Scenario-file configuration block for one plugin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
    /// Overrides the plugin's default subscriptions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subscriptions: Option<Vec<ObservationKind>>,
}

impl PluginConfig {
    pub fn named(name: &str) -> Self {
        Self { name: name.to_owned(), params: Value::Null, subscriptions: None }
    }
}

/// Deployment-derived defaults for plugin parameters.
#[derive(Debug, Clone, Copy)]
pub struct PluginDefaults {
    /// Deferred-interrupt count at which the rate monitor alarms.
    pub flood_threshold: u64,
}

pub fn build_plugin(cfg: &PluginConfig, defaults: PluginDefaults) -> Result<Box<dyn DetectorPlugin>, DetectorError> {
    let bad = |reason: String| DetectorError::BadParams { plugin: cfg.name.clone(), reason };
    let params = if cfg.params.is_null() { Value::Object(Default::default()) } else { cfg.params.clone() };
    let mut plugin: Box<dyn DetectorPlugin> = match cfg.name.as_str() {
        "input_shield" => {
            let p: InputShieldParams = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            Box::new(InputShield::new(p.tokens))
        }
        "output_sanitizer" => {
            let p: SanitizerParams = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            Box::new(OutputSanitizer::new(p.patterns))
        }
        "rate_monitor" => {
            let p: RateParams = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            Box::new(RateMonitor::new(p.threshold.unwrap_or(defaults.flood_threshold), p.target))
        }
        "fault_monitor" => {
            let p: FaultParams = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            Box::new(FaultMonitor::new(p.threshold, p.target))
        }
        "snapshot_auditor" => {
            let p: AuditorParams = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            Box::new(SnapshotAuditor::new(p.bad_digests, p.bad_register_values, p.target))
        }
        "tripwire" => {
            let p: TripwireParams = serde_json::from_value(params).map_err(|e| bad(e.to_string()))?;
            Box::new(Tripwire::new(p.panic_on))
        }
        other => return Err(DetectorError::UnknownPlugin(other.to_owned())),
    };
    if let Some(subs) = &cfg.subscriptions {
        plugin = Box::new(Resubscribed { inner: plugin, subscriptions: subs.clone() });
    }
    Ok(plugin)
}

struct Resubscribed {
    inner: Box<dyn DetectorPlugin>,
    subscriptions: Vec<ObservationKind>,
}

impl DetectorPlugin for Resubscribed {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subscriptions
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        self.inner.observe(obs)
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InputShieldParams {
    #[serde(default = "default_tokens")]
    tokens: Vec<String>,
}

fn default_tokens() -> Vec<String> {
    vec!["IGNORE PREVIOUS".to_owned()]
}

/// Blocks inbound messages that contain a blocklisted token
/// (ASCII case-insensitive).
pub struct InputShield {
    tokens: Vec<Vec<u8>>,
    subs: [ObservationKind; 1],
}

impl InputShield {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens: tokens.into_iter().map(|t| t.to_ascii_uppercase().into_bytes()).collect(), subs: [ObservationKind::PortIngress] }
    }
}

impl DetectorPlugin for InputShield {
    fn name(&self) -> &str {
        "input_shield"
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subs
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        let upper = obs.payload.to_ascii_uppercase();
        for t in &self.tokens {
            if find(&upper, t).is_some() {
                return Ok(Verdict::new(VerdictAction::BlockRequest, format!("blocklisted token {:?}", String::from_utf8_lossy(t))));
            }
        }
        Ok(Verdict::no_action())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SanitizerParams {
    #[serde(default = "default_patterns")]
    patterns: Vec<String>,
}

fn default_patterns() -> Vec<String> {
    vec!["SECRET".to_owned()]
}

/// Masks every occurrence of a redaction pattern in outbound messages.
/// Masking preserves length so the sanitized message still fits its slot.
pub struct OutputSanitizer {
    patterns: Vec<Vec<u8>>,
    subs: [ObservationKind; 1],
}

impl OutputSanitizer {
    pub const MASK: u8 = b'#';

    pub fn new(patterns: Vec<String>) -> Self {
        Self { patterns: patterns.into_iter().map(String::into_bytes).collect(), subs: [ObservationKind::PortEgress] }
    }

    pub fn redact(&self, payload: &[u8]) -> Option<Vec<u8>> {
        let mut out = payload.to_vec();
        let mut hit = false;
        for p in &self.patterns {
            let mut from = 0;
            while let Some(i) = find(&out[from..], p) {
                let at = from + i;
                out[at..at + p.len()].fill(Self::MASK);
                from = at + p.len();
                hit = true;
            }
        }
        hit.then_some(out)
    }
}

impl DetectorPlugin for OutputSanitizer {
    fn name(&self) -> &str {
        "output_sanitizer"
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subs
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        Ok(match self.redact(&obs.payload) {
            Some(replacement) => Verdict::new(VerdictAction::Sanitize { replacement }, "redaction pattern matched"),
            None => Verdict::no_action(),
        })
    }
}

fn default_probation() -> IsolationLevel {
    IsolationLevel::Probation
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateParams {
    #[serde(default)]
    threshold: Option<u64>,
    #[serde(default = "default_probation")]
    target: IsolationLevel,
}

/// Alarms when an interrupt flood leaves at least `threshold` interrupts
/// deferred. Flood observations carry `deferred=<n>` as their payload.
pub struct RateMonitor {
    threshold: u64,
    target: IsolationLevel,
    subs: [ObservationKind; 1],
}

impl RateMonitor {
    pub fn new(threshold: u64, target: IsolationLevel) -> Self {
        Self { threshold, target, subs: [ObservationKind::InterruptFlood] }
    }
}

impl DetectorPlugin for RateMonitor {
    fn name(&self) -> &str {
        "rate_monitor"
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subs
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        let text = obs.payload_text();
        let deferred = text
            .strip_prefix("deferred=")
            .and_then(|n| n.parse::<u64>().ok())
            .ok_or_else(|| DetectorError::PluginFailure(format!("malformed flood payload {text:?}")))?;
        if deferred >= self.threshold {
            return Ok(Verdict::new(
                VerdictAction::Alarm { target: self.target },
                format!("interrupt flood: {deferred} deferred (threshold {})", self.threshold),
            ));
        }
        Ok(Verdict::no_action())
    }
}

fn default_fault_threshold() -> u64 {
    16
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultParams {
    #[serde(default = "default_fault_threshold")]
    threshold: u64,
    #[serde(default = "default_probation")]
    target: IsolationLevel,
}

/// Counts isolation faults and alarms once the count reaches a threshold.
/// Watchpoint hits request a halt-and-inspect.
pub struct FaultMonitor {
    threshold: u64,
    target: IsolationLevel,
    faults: u64,
    alarmed: bool,
    subs: [ObservationKind; 4],
}

impl FaultMonitor {
    pub fn new(threshold: u64, target: IsolationLevel) -> Self {
        Self {
            threshold,
            target,
            faults: 0,
            alarmed: false,
            subs: [ObservationKind::BusFault, ObservationKind::MmuFault, ObservationKind::PortFault, ObservationKind::WatchpointHit],
        }
    }
}

impl DetectorPlugin for FaultMonitor {
    fn name(&self) -> &str {
        "fault_monitor"
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subs
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        if obs.kind == ObservationKind::WatchpointHit {
            return Ok(Verdict::new(VerdictAction::HaltAndInspect, obs.payload_text()));
        }
        self.faults += 1;
        if !self.alarmed && self.faults >= self.threshold {
            self.alarmed = true;
            return Ok(Verdict::new(VerdictAction::Alarm { target: self.target }, format!("{} isolation faults", self.faults)));
        }
        Ok(Verdict::no_action())
    }
}

fn default_severed() -> IsolationLevel {
    IsolationLevel::Severed
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditorParams {
    #[serde(default)]
    bad_digests: Vec<String>,
    #[serde(default)]
    bad_register_values: Vec<u64>,
    #[serde(default = "default_severed")]
    target: IsolationLevel,
}

/// Signature scanner over model snapshots: alarms when the DRAM digest or
/// any register value matches a known-bad signature.
pub struct SnapshotAuditor {
    bad_digests: Vec<String>,
    bad_register_values: Vec<u64>,
    target: IsolationLevel,
    subs: [ObservationKind; 2],
}

impl SnapshotAuditor {
    pub fn new(bad_digests: Vec<String>, bad_register_values: Vec<u64>, target: IsolationLevel) -> Self {
        Self { bad_digests, bad_register_values, target, subs: [ObservationKind::MemorySnapshotDigest, ObservationKind::RegisterSnapshot] }
    }

    fn register_values(v: &Value, out: &mut Vec<u64>) {
        match v {
            Value::Number(n) => out.extend(n.as_u64()),
            Value::Object(m) => m.values().for_each(|x| Self::register_values(x, out)),
            Value::Array(a) => a.iter().for_each(|x| Self::register_values(x, out)),
            _ => {}
        }
    }
}

impl DetectorPlugin for SnapshotAuditor {
    fn name(&self) -> &str {
        "snapshot_auditor"
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subs
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        let hit = match obs.kind {
            ObservationKind::MemorySnapshotDigest => {
                let digest = obs.payload_text();
                self.bad_digests.contains(&digest).then(|| format!("known-bad DRAM image {digest}"))
            }
            ObservationKind::RegisterSnapshot => {
                let v: Value = serde_json::from_slice(&obs.payload).map_err(|e| DetectorError::PluginFailure(e.to_string()))?;
                let mut values = Vec::new();
                Self::register_values(&v, &mut values);
                values.into_iter().find(|x| self.bad_register_values.contains(x)).map(|x| format!("known-bad register value {x:#x}"))
            }
            _ => None,
        };
        Ok(match hit {
            Some(reason) => Verdict::new(VerdictAction::Alarm { target: self.target }, reason),
            None => Verdict::no_action(),
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TripwireParams {
    panic_on: ObservationKind,
}

/// Deliberately broken plugin that panics on one observation kind. Used to
/// exercise the fail-closed path.
pub struct Tripwire {
    subs: [ObservationKind; 1],
}

impl Tripwire {
    pub fn new(panic_on: ObservationKind) -> Self {
        Self { subs: [panic_on] }
    }
}

impl DetectorPlugin for Tripwire {
    fn name(&self) -> &str {
        "tripwire"
    }

    fn subscriptions(&self) -> &[ObservationKind] {
        &self.subs
    }

    fn observe(&mut self, obs: &Observation) -> Result<Verdict, DetectorError> {
        panic!("tripwire triggered by {:?}", obs.kind);
    }
}
