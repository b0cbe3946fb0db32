use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::event::{Journal, Source};
use crate::ids::Tick;

fn default_interval() -> Tick {
    10
}

fn default_missed() -> u64 {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatConfig {
    #[serde(default = "default_interval")]
    pub interval: Tick,
    #[serde(default = "default_missed")]
    pub missed_threshold: u64,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self { interval: default_interval(), missed_threshold: default_missed() }
    }
}

impl HeartbeatConfig {
    /// Longest tolerated silence on either link.
    pub fn timeout(&self) -> Tick {
        self.interval * self.missed_threshold
    }
}

/// One direction of the console link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDirection {
    /// Heartbeats sent by the console, checked by the hypervisor.
    ConsoleToHypervisor,
    /// Heartbeats sent by the hypervisor, checked by the console.
    HypervisorToConsole,
}

impl LinkDirection {
    pub const BOTH: [LinkDirection; 2] = [LinkDirection::ConsoleToHypervisor, LinkDirection::HypervisorToConsole];

    fn sender(self) -> &'static str {
        match self {
            LinkDirection::ConsoleToHypervisor => "console",
            LinkDirection::HypervisorToConsole => "hypervisor",
        }
    }

    fn detector(self) -> &'static str {
        match self {
            LinkDirection::ConsoleToHypervisor => "hypervisor",
            LinkDirection::HypervisorToConsole => "console",
        }
    }
}

/// A silence long enough to demand offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchdogFire {
    pub direction: LinkDirection,
    pub last_heard: Tick,
    pub silence: Tick,
}

/// Two-way heartbeat between console and hypervisor. The watchdog fires
/// once per silence episode; an episode ends when both directions are
/// heard from again within the timeout.
#[derive(Debug, Clone)]
pub struct HeartbeatMonitor {
    cfg: HeartbeatConfig,
    link_up: BTreeMap<LinkDirection, bool>,
    last_heard: BTreeMap<LinkDirection, Tick>,
    episode_open: bool,
}

impl HeartbeatMonitor {
    pub fn new(cfg: HeartbeatConfig, now: Tick) -> Self {
        Self {
            cfg,
            link_up: LinkDirection::BOTH.iter().map(|d| (*d, true)).collect(),
            last_heard: LinkDirection::BOTH.iter().map(|d| (*d, now)).collect(),
            episode_open: false,
        }
    }

    pub fn config(&self) -> HeartbeatConfig {
        self.cfg
    }

    pub fn link_up(&self, dir: LinkDirection) -> bool {
        self.link_up[&dir]
    }

    pub fn last_heard(&self, dir: LinkDirection) -> Tick {
        self.last_heard[&dir]
    }

    pub fn episode_open(&self) -> bool {
        self.episode_open
    }

    pub fn set_link(&mut self, journal: &mut Journal, dir: LinkDirection, up: bool) {
        if self.link_up.insert(dir, up) != Some(up) {
            journal.emit(Source::Console, "link_state", json!({"direction": dir, "up": up}));
        }
    }

    /// Starts a fresh observation window, e.g. after the deployment comes
    /// back from offline.
    pub fn reset(&mut self, journal: &mut Journal, now: Tick) {
        for d in LinkDirection::BOTH {
            self.last_heard.insert(d, now);
        }
        self.episode_open = false;
        journal.emit(Source::Console, "heartbeat_reset", json!({"tick": now}));
    }

    /// One tick of heartbeat traffic and silence checks. `hypervisor_sends`
    /// is false when no hypervisor core had the capacity to emit a beat.
    pub fn tick(&mut self, journal: &mut Journal, now: Tick, hypervisor_sends: bool) -> Option<WatchdogFire> {
        if now.is_multiple_of(self.cfg.interval) {
            for dir in LinkDirection::BOTH {
                let sent = dir == LinkDirection::ConsoleToHypervisor || hypervisor_sends;
                if !sent {
                    journal.emit(Source::Console, "heartbeat_missed", json!({"from": dir.sender()}));
                    continue;
                }
                let received = self.link_up[&dir];
                if received {
                    self.last_heard.insert(dir, now);
                }
                journal.emit(Source::Console, "heartbeat", json!({"from": dir.sender(), "received": received}));
            }
        }
        let timeout = self.cfg.timeout();
        let silent = LinkDirection::BOTH
            .into_iter()
            .map(|d| (d, now.saturating_sub(self.last_heard[&d])))
            .filter(|(_, s)| *s > timeout)
            .max_by_key(|(_, s)| *s);
        match silent {
            Some((direction, silence)) if !self.episode_open => {
                self.episode_open = true;
                let fire = WatchdogFire { direction, last_heard: self.last_heard[&direction], silence };
                journal.emit(
                    Source::Console,
                    "watchdog_fired",
                    json!({"direction": direction, "detected_by": direction.detector(), "last_heard": fire.last_heard, "silence": silence}),
                );
                Some(fire)
            }
            None if self.episode_open => {
                self.episode_open = false;
                journal.emit(Source::Console, "watchdog_rearmed", json!({}));
                None
            }
            _ => None,
        }
    }
}
