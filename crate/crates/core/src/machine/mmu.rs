//! Base+bound MMU for model cores.
//!
//! Executable memory is described by a list of base/bound regions. Page
//! entries grant read/write/execute on fixed-size pages. Once locked, the
//! exec regions are frozen, no page outside them may become executable, and
//! no page overlapping them may become readable or writable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::AccessKind;

/// Bytes per MMU page.
pub const PAGE_SIZE: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct PagePerms {
    pub readable: bool,
    pub writable: bool,
    pub executable: bool,
}

impl PagePerms {
    pub const NONE: PagePerms = PagePerms { readable: false, writable: false, executable: false };
    pub const RW: PagePerms = PagePerms { readable: true, writable: true, executable: false };
    pub const X: PagePerms = PagePerms { readable: false, writable: false, executable: true };

    pub fn bits(self) -> u8 {
        (u8::from(self.readable) << 2) | (u8::from(self.writable) << 1) | u8::from(self.executable)
    }

    pub fn from_bits(b: u8) -> Self {
        Self { readable: b & 4 != 0, writable: b & 2 != 0, executable: b & 1 != 0 }
    }

    pub fn permits(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.readable,
            AccessKind::Write => self.writable,
            AccessKind::Execute => self.executable,
        }
    }
}

impl fmt::Display for PagePerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |on: bool, ch: char| if on { ch } else { '-' };
        write!(f, "{}{}{}", c(self.readable, 'r'), c(self.writable, 'w'), c(self.executable, 'x'))
    }
}

impl FromStr for PagePerms {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = PagePerms::NONE;
        for ch in s.chars() {
            match ch {
                'r' => p.readable = true,
                'w' => p.writable = true,
                'x' => p.executable = true,
                '-' => {}
                _ => return Err(format!("bad permission string {s:?}")),
            }
        }
        Ok(p)
    }
}

impl Serialize for PagePerms {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PagePerms {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Half-open executable address range `[base, bound)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRegion {
    pub base: u64,
    pub bound: u64,
}

impl ExecRegion {
    pub fn contains(&self, addr: u64) -> bool {
        (self.base..self.bound).contains(&addr)
    }

    fn contains_page(&self, page: u64) -> bool {
        page * PAGE_SIZE >= self.base && (page + 1) * PAGE_SIZE <= self.bound
    }

    fn overlaps_page(&self, page: u64) -> bool {
        page * PAGE_SIZE < self.bound && (page + 1) * PAGE_SIZE > self.base
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MmuError {
    #[error("rejected: MMU is locked")]
    RejectedLocked,
    #[error("page {0} is outside model memory")]
    NoSuchPage(u64),
    #[error("exec region [{base:#x}, {bound:#x}) is not page aligned or is empty")]
    Misaligned { base: u64, bound: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MmuConfig {
    exec_regions: Vec<ExecRegion>,
    locked: bool,
    page_entries: BTreeMap<u64, PagePerms>,
    #[serde(skip)]
    page_count: u64,
}

impl MmuConfig {
    /// An empty, unlocked MMU covering `memory_size` bytes.
    pub fn new(memory_size: u64) -> Self {
        Self { exec_regions: Vec::new(), locked: false, page_entries: BTreeMap::new(), page_count: memory_size.div_ceil(PAGE_SIZE) }
    }

    pub fn locked(&self) -> bool {
        self.locked
    }

    pub fn exec_regions(&self) -> &[ExecRegion] {
        &self.exec_regions
    }

    pub fn page_count(&self) -> u64 {
        self.page_count
    }

    pub fn entry(&self, page: u64) -> PagePerms {
        self.page_entries.get(&page).copied().unwrap_or(PagePerms::NONE)
    }

    pub fn in_exec_region(&self, addr: u64) -> bool {
        self.exec_regions.iter().any(|r| r.contains(addr))
    }

    pub fn executable_pages(&self) -> BTreeSet<u64> {
        self.page_entries.iter().filter(|(_, p)| p.executable).map(|(page, _)| *page).collect()
    }

    pub fn declare_exec_region(&mut self, region: ExecRegion) -> Result<(), MmuError> {
        if self.locked {
            return Err(MmuError::RejectedLocked);
        }
        if !region.base.is_multiple_of(PAGE_SIZE) || !region.bound.is_multiple_of(PAGE_SIZE) || region.bound <= region.base {
            return Err(MmuError::Misaligned { base: region.base, bound: region.bound });
        }
        if region.bound / PAGE_SIZE > self.page_count {
            return Err(MmuError::NoSuchPage(region.bound / PAGE_SIZE - 1));
        }
        self.exec_regions.push(region);
        Ok(())
    }

    /// Whether `perms` on `page` would violate the lockdown rules.
    pub fn violates_lockdown(&self, page: u64, perms: PagePerms) -> bool {
        let inside = self.exec_regions.iter().any(|r| r.contains_page(page));
        let overlaps = self.exec_regions.iter().any(|r| r.overlaps_page(page));
        (perms.executable && !inside) || ((perms.readable || perms.writable) && overlaps)
    }

    /// Records a page entry. After lockdown, entries that would create
    /// executable memory outside the exec regions, or expose the exec
    /// regions to reads or writes, are rejected without being applied.
    pub fn configure(&mut self, page: u64, perms: PagePerms) -> Result<(), MmuError> {
        if page >= self.page_count {
            return Err(MmuError::NoSuchPage(page));
        }
        if self.locked && self.violates_lockdown(page, perms) {
            return Err(MmuError::RejectedLocked);
        }
        self.page_entries.insert(page, perms);
        Ok(())
    }

    /// Locks the MMU. Any pre-existing entry that violates the lockdown
    /// rules is stripped of the offending permissions first. Returns the
    /// pages that were altered.
    pub fn lock(&mut self) -> Vec<u64> {
        let mut altered = Vec::new();
        let pages: Vec<u64> = self.page_entries.keys().copied().collect();
        for page in pages {
            let perms = self.page_entries[&page];
            if self.violates_lockdown(page, perms) {
                let mut fixed = perms;
                if !self.exec_regions.iter().any(|r| r.contains_page(page)) {
                    fixed.executable = false;
                }
                if self.exec_regions.iter().any(|r| r.overlaps_page(page)) {
                    fixed.readable = false;
                    fixed.writable = false;
                }
                self.page_entries.insert(page, fixed);
                altered.push(page);
            }
        }
        self.locked = true;
        altered
    }

    /// Whether an access of `kind` at `addr` is permitted.
    pub fn permits(&self, addr: u64, kind: AccessKind) -> bool {
        let in_exec = self.in_exec_region(addr);
        if self.locked {
            match kind {
                AccessKind::Execute if !in_exec => return false,
                AccessKind::Read | AccessKind::Write if in_exec => return false,
                _ => {}
            }
        }
        self.entry(addr / PAGE_SIZE).permits(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn locked_mmu() -> MmuConfig {
        let mut m = MmuConfig::new(64 * PAGE_SIZE);
        m.declare_exec_region(ExecRegion { base: 0, bound: 16 * PAGE_SIZE }).unwrap();
        for p in 0..16 {
            m.configure(p, PagePerms::X).unwrap();
        }
        for p in 16..64 {
            m.configure(p, PagePerms::RW).unwrap();
        }
        m.lock();
        m
    }

    #[test]
    fn pre_lock_exec_setup_ok() {
        let mut m = MmuConfig::new(64 * PAGE_SIZE);
        m.declare_exec_region(ExecRegion { base: 0, bound: 16 * PAGE_SIZE }).unwrap();
        for p in 0..16 {
            assert_eq!(m.configure(p, PagePerms::X), Ok(()));
        }
    }

    #[test]
    fn post_lock_new_exec_page_rejected() {
        let mut m = locked_mmu();
        assert_eq!(m.configure(40, PagePerms::X), Err(MmuError::RejectedLocked));
        assert_eq!(m.entry(40), PagePerms::RW, "rejection never partially applies");
    }

    #[test]
    fn post_lock_data_page_ok() {
        let mut m = locked_mmu();
        assert_eq!(m.configure(50, PagePerms::RW), Ok(()));
    }

    #[test]
    fn post_lock_exec_page_cannot_become_rw() {
        let mut m = locked_mmu();
        assert_eq!(m.configure(3, "rwx".parse().unwrap()), Err(MmuError::RejectedLocked));
        assert_eq!(m.configure(3, PagePerms::RW), Err(MmuError::RejectedLocked));
    }

    #[test]
    fn locked_exec_region_is_neither_readable_nor_writable() {
        let m = locked_mmu();
        assert!(!m.permits(8, AccessKind::Read));
        assert!(!m.permits(8, AccessKind::Write));
        assert!(m.permits(8, AccessKind::Execute));
        assert!(!m.permits(20 * PAGE_SIZE, AccessKind::Execute));
        assert!(m.permits(20 * PAGE_SIZE, AccessKind::Write));
    }

    #[test]
    fn exec_regions_frozen_after_lock() {
        let mut m = locked_mmu();
        assert_eq!(m.declare_exec_region(ExecRegion { base: 32 * PAGE_SIZE, bound: 33 * PAGE_SIZE }), Err(MmuError::RejectedLocked));
    }

    #[test]
    fn lock_strips_violating_entries() {
        let mut m = MmuConfig::new(8 * PAGE_SIZE);
        m.declare_exec_region(ExecRegion { base: 0, bound: PAGE_SIZE }).unwrap();
        m.configure(0, "rwx".parse().unwrap()).unwrap();
        m.configure(5, "rwx".parse().unwrap()).unwrap();
        let altered = m.lock();
        assert_eq!(altered, vec![0, 5]);
        assert_eq!(m.entry(0), PagePerms::X);
        assert_eq!(m.entry(5), PagePerms::RW);
    }

    #[test]
    fn misaligned_region_rejected() {
        let mut m = MmuConfig::new(8 * PAGE_SIZE);
        assert!(matches!(m.declare_exec_region(ExecRegion { base: 3, bound: PAGE_SIZE }), Err(MmuError::Misaligned { .. })));
        assert_eq!(m.configure(8, PagePerms::RW), Err(MmuError::NoSuchPage(8)));
    }

    #[test]
    fn perms_string_round_trip() {
        for b in 0..8u8 {
            let p = PagePerms::from_bits(b);
            assert_eq!(p.to_string().parse::<PagePerms>().unwrap(), p);
            assert_eq!(p.bits(), b);
        }
    }

    proptest! {
        // Monotone lockdown: random reconfiguration after lock never grows
        // or moves the executable set and never exposes exec pages.
        #[test]
        fn lockdown_is_monotone(ops in proptest::collection::vec((0u64..64, 0u8..8), 0..200)) {
            let mut m = locked_mmu();
            let initial = m.executable_pages();
            let regions = m.exec_regions().to_vec();
            for (page, bits) in ops {
                let _ = m.configure(page, PagePerms::from_bits(bits));
                prop_assert!(m.executable_pages().is_subset(&initial));
                prop_assert_eq!(m.exec_regions(), &regions[..]);
                for p in 0..16 {
                    let e = m.entry(p);
                    prop_assert!(!e.readable && !e.writable);
                }
            }
        }
    }
}
