use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ids::{CoreId, PortId, Tick};

fn default_window() -> u64 {
    10
}
fn default_budget() -> u32 {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThrottleConfig {
    #[serde(default = "default_window")]
    pub window: u64,
    #[serde(default = "default_budget")]
    pub budget: u32,
}

impl Default for ThrottleConfig {
    fn default() -> Self {
        Self { window: default_window(), budget: default_budget() }
    }
}

impl ThrottleConfig {
    /// Backlog at which an interrupt flood is reported.
    pub fn flood_threshold(&self) -> u64 {
        u64::from(self.budget) * 4
    }
}

/// An interrupt raised by a model core toward the hypervisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interrupt {
    pub seq: u64,
    pub source: CoreId,
    /// The port whose request ring holds a message; `None` for a bare
    /// guest-raised interrupt.
    pub port: Option<PortId>,
    pub raised: Tick,
}

#[derive(Debug, Default, Clone)]
struct Lane {
    window: u64,
    delivered: u32,
    deferred: VecDeque<Interrupt>,
    flooding: bool,
}

/// Per-model-core interrupt filter over fixed, tick-aligned windows.
///
/// Every interrupt is queued; at most `budget` per source core are released
/// per window, oldest first.
#[derive(Debug, Clone)]
pub struct InterruptThrottle {
    cfg: ThrottleConfig,
    lanes: BTreeMap<CoreId, Lane>,
    next_seq: u64,
}

/// A source core whose backlog crossed the flood threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloodSignal {
    pub core: CoreId,
    pub deferred: u64,
}

impl InterruptThrottle {
    pub fn new(cfg: ThrottleConfig) -> Self {
        assert!(cfg.window > 0 && cfg.budget > 0, "throttle window and budget must be positive");
        Self { cfg, lanes: BTreeMap::new(), next_seq: 0 }
    }

    pub fn config(&self) -> ThrottleConfig {
        self.cfg
    }

    pub fn raise(&mut self, source: CoreId, port: Option<PortId>, now: Tick) -> Interrupt {
        let irq = Interrupt { seq: self.next_seq, source, port, raised: now };
        self.next_seq += 1;
        self.lanes.entry(source).or_default().deferred.push_back(irq);
        irq
    }

    pub fn backlog(&self, source: CoreId) -> u64 {
        self.lanes.get(&source).map_or(0, |l| l.deferred.len() as u64)
    }

    pub fn total_backlog(&self) -> u64 {
        self.lanes.values().map(|l| l.deferred.len() as u64).sum()
    }

    /// Releases the interrupts allowed at `now`, in source-core order then
    /// FIFO order, and reports lanes that newly crossed the flood threshold.
    pub fn deliver(&mut self, now: Tick) -> (Vec<Interrupt>, Vec<FloodSignal>) {
        let window = now / self.cfg.window;
        let threshold = self.cfg.flood_threshold();
        let mut out = Vec::new();
        let mut floods = Vec::new();
        for (core, lane) in &mut self.lanes {
            if lane.window != window {
                lane.window = window;
                lane.delivered = 0;
            }
            while lane.delivered < self.cfg.budget {
                let Some(irq) = lane.deferred.pop_front() else { break };
                lane.delivered += 1;
                out.push(irq);
            }
            let backlog = lane.deferred.len() as u64;
            if backlog >= threshold && !lane.flooding {
                lane.flooding = true;
                floods.push(FloodSignal { core: *core, deferred: backlog });
            } else if backlog < threshold {
                lane.flooding = false;
            }
        }
        (out, floods)
    }

    /// Drops the queued interrupts that reference `port`.
    pub fn forget_port(&mut self, port: PortId) -> usize {
        let mut n = 0;
        for lane in self.lanes.values_mut() {
            let before = lane.deferred.len();
            lane.deferred.retain(|i| i.port != Some(port));
            n += before - lane.deferred.len();
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const M: CoreId = CoreId(2);

    #[test]
    fn first_three_windows_by_hand() {
        // 1000 interrupts raised at tick 0; budget 4, window 10.
        // Window 0 (ticks 0..10): seq 0..4 at tick 0, nothing else.
        // Window 1: seq 4..8 at tick 10. Window 2: seq 8..12 at tick 20.
        let mut t = InterruptThrottle::new(ThrottleConfig::default());
        for _ in 0..1000 {
            t.raise(M, None, 0);
        }
        let mut schedule = Vec::new();
        for now in 0..30 {
            for irq in t.deliver(now).0 {
                schedule.push((now, irq.seq));
            }
        }
        let expected: Vec<(u64, u64)> =
            [(0, 0), (0, 1), (0, 2), (0, 3), (10, 4), (10, 5), (10, 6), (10, 7), (20, 8), (20, 9), (20, 10), (20, 11)].to_vec();
        assert_eq!(schedule, expected);
        assert_eq!(t.backlog(M), 1000 - 12);
    }

    #[test]
    fn flood_signal_fires_once_per_episode() {
        let mut t = InterruptThrottle::new(ThrottleConfig::default());
        for _ in 0..20 {
            t.raise(M, None, 0);
        }
        let (_, floods) = t.deliver(0);
        assert_eq!(floods, vec![FloodSignal { core: M, deferred: 16 }]);
        assert!(t.deliver(1).1.is_empty());
        t.raise(M, None, 1);
        assert!(t.deliver(2).1.is_empty());
    }

    proptest! {
        #[test]
        fn bounded_and_lossless(raises in prop::collection::vec(0u32..6, 1..200), budget in 1u32..6, window in 1u64..15) {
            let cfg = ThrottleConfig { window, budget };
            let mut t = InterruptThrottle::new(cfg);
            let mut raised = 0u64;
            let mut delivered = Vec::new();
            let mut per_window: BTreeMap<u64, u32> = BTreeMap::new();
            let mut now = 0;
            loop {
                if let Some(n) = raises.get(now as usize) {
                    for _ in 0..*n {
                        t.raise(M, None, now);
                        raised += 1;
                    }
                } else if t.total_backlog() == 0 {
                    break;
                }
                for irq in t.deliver(now).0 {
                    *per_window.entry(now / window).or_default() += 1;
                    delivered.push(irq.seq);
                }
                now += 1;
            }
            prop_assert!(per_window.values().all(|n| *n <= budget));
            prop_assert_eq!(delivered.len() as u64, raised);
            prop_assert!(delivered.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
