//! The simulated hardware substrate.
//!
//! Hypervisor cores and model cores sit on disjoint memory hierarchies.
//! Which core can touch which region is fixed at boot by an immutable
//! reachability matrix: model cores have no bus to hypervisor DRAM at all,
//! so isolation needs no address translation layer. The only memory both
//! core classes share is the IO region that carries port traffic.
//!
//! Hypervisor cores additionally own a control bus over model cores
//! ([`Machine::control_bus`]) and a private bus into the DRAM of halted
//! model cores ([`Machine::read_model_dram`], [`Machine::write_model_dram`]).

mod control;
mod mmu;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::detector::{Observation, ObservationKind, Subject};
use crate::digest::sha256_hex;
use crate::event::{Journal, Source};
use crate::ids::{CoreId, RegionId};

pub use control::{CommandResult, ControlCommand, CoreSnapshot, StateEdit, Watchpoint};
pub use mmu::{ExecRegion, MmuConfig, MmuError, PagePerms, PAGE_SIZE};

pub const HYPERVISOR_DRAM: RegionId = RegionId(0);
pub const MODEL_DRAM: RegionId = RegionId(1);
pub const SHARED_IO: RegionId = RegionId(2);

/// Bytes per encoded guest instruction.
pub const INSTR_SIZE: u64 = 16;

/// Architectural register names.
pub mod reg {
    pub const ACC: &str = "acc";
    pub const FAULT_CODE: &str = "fault_code";
    pub const FAULT_PC: &str = "fault_pc";
    pub const FAULT_ADDR: &str = "fault_addr";
    pub const RX_COUNT: &str = "rx_count";
    pub const RX_LAST: &str = "rx_last";

    pub const ALL: [&str; 6] = [ACC, FAULT_CODE, FAULT_PC, FAULT_ADDR, RX_COUNT, RX_LAST];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreRole {
    Hypervisor,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Halted,
    SingleStepping,
    PoweredDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    HypervisorDram,
    ModelDram,
    SharedIoDram,
}

/// Bus reachability from a core to a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reach {
    None,
    Read,
    ReadWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessOutcome {
    Allowed,
    BusFault,
    MmuFault,
    WatchpointHalt,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("no such core {0}")]
    UnknownCore(CoreId),
    #[error("{0} has no control bus (not a hypervisor core)")]
    NotHypervisorCore(CoreId),
    #[error("{0} is not a model core")]
    NotModelCore(CoreId),
    #[error("{0} must be halted for this command")]
    TargetNotHalted(CoreId),
    #[error("{0} is powered down")]
    PoweredDown(CoreId),
    #[error("model cores attached to {0} are not all halted")]
    CoresNotHalted(RegionId),
    #[error("{0} is not model DRAM")]
    NotModelRegion(RegionId),
    #[error("range {addr:#x}+{len} is outside {region}")]
    OutOfRange { region: RegionId, addr: u64, len: u64 },
    #[error("mmu: {0}")]
    Mmu(#[from] MmuError),
    #[error("invalid machine configuration: {0}")]
    InvalidConfig(String),
}

fn default_hyp_cores() -> u32 {
    2
}
fn default_model_cores() -> u32 {
    1
}
fn default_hyp_dram() -> u64 {
    64 * 1024
}
fn default_model_dram() -> u64 {
    256 * 1024
}
fn default_shared_io() -> u64 {
    512 * 1024
}

/// Boot-time machine shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    #[serde(default = "default_hyp_cores")]
    pub hypervisor_cores: u32,
    #[serde(default = "default_model_cores")]
    pub model_cores: u32,
    #[serde(default = "default_hyp_dram")]
    pub hypervisor_dram: u64,
    #[serde(default = "default_model_dram")]
    pub model_dram: u64,
    #[serde(default = "default_shared_io")]
    pub shared_io: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            hypervisor_cores: default_hyp_cores(),
            model_cores: default_model_cores(),
            hypervisor_dram: default_hyp_dram(),
            model_dram: default_model_dram(),
            shared_io: default_shared_io(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionInfo {
    pub id: RegionId,
    pub kind: RegionKind,
    pub size: u64,
}

/// Cores, regions and the bus-reachability matrix. Immutable after boot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineTopology {
    hypervisor_cores: Vec<CoreId>,
    model_cores: Vec<CoreId>,
    regions: Vec<RegionInfo>,
    reachability: BTreeMap<(CoreId, RegionId), Reach>,
}

impl MachineTopology {
    fn build(cfg: &MachineConfig) -> Self {
        let hypervisor_cores: Vec<CoreId> = (0..cfg.hypervisor_cores).map(CoreId).collect();
        let model_cores: Vec<CoreId> = (cfg.hypervisor_cores..cfg.hypervisor_cores + cfg.model_cores).map(CoreId).collect();
        let regions = vec![
            RegionInfo { id: HYPERVISOR_DRAM, kind: RegionKind::HypervisorDram, size: cfg.hypervisor_dram },
            RegionInfo { id: MODEL_DRAM, kind: RegionKind::ModelDram, size: cfg.model_dram },
            RegionInfo { id: SHARED_IO, kind: RegionKind::SharedIoDram, size: cfg.shared_io },
        ];
        let mut reachability = BTreeMap::new();
        for r in &regions {
            for c in &hypervisor_cores {
                reachability.insert((*c, r.id), Reach::ReadWrite);
            }
            for c in &model_cores {
                let reach = match r.kind {
                    RegionKind::HypervisorDram => Reach::None,
                    RegionKind::ModelDram | RegionKind::SharedIoDram => Reach::ReadWrite,
                };
                reachability.insert((*c, r.id), reach);
            }
        }
        Self { hypervisor_cores, model_cores, regions, reachability }
    }

    pub fn hypervisor_cores(&self) -> &[CoreId] {
        &self.hypervisor_cores
    }

    pub fn model_cores(&self) -> &[CoreId] {
        &self.model_cores
    }

    pub fn regions(&self) -> &[RegionInfo] {
        &self.regions
    }

    pub fn role(&self, core: CoreId) -> Option<CoreRole> {
        if self.hypervisor_cores.contains(&core) {
            Some(CoreRole::Hypervisor)
        } else if self.model_cores.contains(&core) {
            Some(CoreRole::Model)
        } else {
            None
        }
    }

    pub fn region(&self, id: RegionId) -> Option<&RegionInfo> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn region_of_kind(&self, kind: RegionKind) -> RegionId {
        self.regions.iter().find(|r| r.kind == kind).map(|r| r.id).expect("every kind exists once")
    }

    /// Reachability of `region` from `core`; `None` for unknown pairs.
    pub fn reach(&self, core: CoreId, region: RegionId) -> Reach {
        self.reachability.get(&(core, region)).copied().unwrap_or(Reach::None)
    }

    /// Model cores wired to `region`.
    pub fn cores_attached(&self, region: RegionId) -> Vec<CoreId> {
        self.model_cores.iter().copied().filter(|c| self.reach(*c, region) != Reach::None).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub id: RegionId,
    pub kind: RegionKind,
    contents: Vec<u8>,
}

impl MemoryRegion {
    pub fn size(&self) -> u64 {
        self.contents.len() as u64
    }

    pub fn bytes(&self) -> &[u8] {
        &self.contents
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreState {
    pub id: CoreId,
    pub role: CoreRole,
    pub run_state: RunState,
    registers: BTreeMap<String, u64>,
    /// Instruction index of the next instruction.
    pub pc: u64,
    pub watchpoints: Vec<Watchpoint>,
    uarch_scratch: u64,
    /// Address of instruction 0.
    pub code_base: u64,
    pub entry: u64,
    pub fault_handler: u64,
    /// Ticks left in the current SPIN instruction.
    pub spin_remaining: u32,
    /// Set when a watchpoint halted the core at this pc; the instruction
    /// replays once on resume without re-triggering.
    pub watch_replay: Option<u64>,
    pub retired: u64,
}

impl CoreState {
    fn new(id: CoreId, role: CoreRole) -> Self {
        Self {
            id,
            role,
            run_state: match role {
                CoreRole::Hypervisor => RunState::Running,
                CoreRole::Model => RunState::Halted,
            },
            registers: BTreeMap::new(),
            pc: 0,
            watchpoints: Vec::new(),
            uarch_scratch: 0,
            code_base: 0,
            entry: 0,
            fault_handler: 0,
            spin_remaining: 0,
            watch_replay: None,
            retired: 0,
        }
    }

    pub fn register(&self, name: &str) -> u64 {
        if self.run_state == RunState::PoweredDown {
            return 0;
        }
        self.registers.get(name).copied().unwrap_or(0)
    }

    pub fn set_register(&mut self, name: &str, value: u64) {
        self.registers.insert(name.to_owned(), value);
    }

    pub fn registers(&self) -> BTreeMap<String, u64> {
        reg::ALL
            .iter()
            .map(|r| (r.to_string(), self.register(r)))
            .chain(self.registers.iter().filter(|(k, _)| !reg::ALL.contains(&k.as_str())).map(|(k, _)| (k.clone(), self.register(k))))
            .collect()
    }

    /// Abstract microarchitectural residue, readable by the guest through
    /// the covert-channel instructions.
    pub fn uarch_scratch(&self) -> u64 {
        self.uarch_scratch
    }

    pub fn set_uarch_scratch(&mut self, v: u64) {
        self.uarch_scratch = v;
    }

    pub fn is_halted(&self) -> bool {
        matches!(self.run_state, RunState::Halted | RunState::PoweredDown)
    }

    fn reset(&mut self) {
        self.registers.clear();
        self.pc = self.entry;
        self.uarch_scratch = 0;
        self.spin_remaining = 0;
        self.watch_replay = None;
    }
}

/// Attestation measurements reported by the hardware root of trust.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub silicon: String,
    pub software: String,
}

pub struct Machine {
    topology: MachineTopology,
    cores: Vec<CoreState>,
    regions: Vec<MemoryRegion>,
    mmus: BTreeMap<CoreId, MmuConfig>,
    silicon_id: Vec<u8>,
    image_len: usize,
}

impl Machine {
    /// Boots the machine: builds the topology and writes the hypervisor
    /// image at the start of hypervisor DRAM. Model cores come up halted.
    pub fn boot(cfg: &MachineConfig, silicon_id: &[u8], hypervisor_image: &[u8]) -> Result<Self, MachineError> {
        if cfg.hypervisor_cores == 0 || cfg.model_cores == 0 {
            return Err(MachineError::InvalidConfig("need at least one core of each role".into()));
        }
        if cfg.hypervisor_dram == 0 || cfg.model_dram == 0 || cfg.shared_io == 0 {
            return Err(MachineError::InvalidConfig("region sizes must be positive".into()));
        }
        if hypervisor_image.len() as u64 > cfg.hypervisor_dram {
            return Err(MachineError::InvalidConfig("hypervisor image exceeds hypervisor DRAM".into()));
        }
        if !cfg.model_dram.is_multiple_of(PAGE_SIZE) {
            return Err(MachineError::InvalidConfig(format!("model DRAM must be a multiple of {PAGE_SIZE}")));
        }
        let topology = MachineTopology::build(cfg);
        let mut cores = Vec::new();
        for c in topology.hypervisor_cores() {
            cores.push(CoreState::new(*c, CoreRole::Hypervisor));
        }
        for c in topology.model_cores() {
            cores.push(CoreState::new(*c, CoreRole::Model));
        }
        let mut regions: Vec<MemoryRegion> =
            topology.regions().iter().map(|r| MemoryRegion { id: r.id, kind: r.kind, contents: vec![0; r.size as usize] }).collect();
        regions[HYPERVISOR_DRAM.0 as usize].contents[..hypervisor_image.len()].copy_from_slice(hypervisor_image);
        let mmus = topology.model_cores().iter().map(|c| (*c, MmuConfig::new(cfg.model_dram))).collect();
        Ok(Self { topology, cores, regions, mmus, silicon_id: silicon_id.to_vec(), image_len: hypervisor_image.len() })
    }

    pub fn topology(&self) -> &MachineTopology {
        &self.topology
    }

    pub fn core(&self, id: CoreId) -> Option<&CoreState> {
        self.cores.get(id.0 as usize)
    }

    pub(crate) fn core_mut(&mut self, id: CoreId) -> Option<&mut CoreState> {
        self.cores.get_mut(id.0 as usize)
    }

    pub fn cores(&self) -> &[CoreState] {
        &self.cores
    }

    pub fn mmu(&self, core: CoreId) -> Option<&MmuConfig> {
        self.mmus.get(&core)
    }

    pub fn region(&self, id: RegionId) -> Option<&MemoryRegion> {
        self.regions.get(id.0 as usize)
    }

    pub fn region_size(&self, id: RegionId) -> u64 {
        self.region(id).map_or(0, MemoryRegion::size)
    }

    pub fn region_digest(&self, id: RegionId) -> String {
        sha256_hex(self.region(id).map_or(&[][..], |r| r.bytes()))
    }

    pub fn range_digest(&self, id: RegionId, range: Range<u64>) -> String {
        let bytes = self.region(id).map_or(&[][..], |r| {
            let end = range.end.min(r.size()) as usize;
            let start = (range.start as usize).min(end);
            &r.contents[start..end]
        });
        sha256_hex(bytes)
    }

    /// Raw access to the shared IO region for the port layer.
    /// A stray write into shared IO at offset `addr`, bypassing every bus
    /// check. Fault injection only; false when out of range.
    pub fn tamper_io(&mut self, addr: u64, byte: u8) -> bool {
        match self.io_bytes_mut().get_mut(addr as usize) {
            Some(b) => {
                *b = byte;
                true
            }
            None => false,
        }
    }

    pub(crate) fn io_bytes(&self) -> &[u8] {
        &self.regions[SHARED_IO.0 as usize].contents
    }

    pub(crate) fn io_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.regions[SHARED_IO.0 as usize].contents
    }

    pub fn measure(&self) -> Measurement {
        Measurement {
            silicon: sha256_hex(&self.silicon_id),
            software: sha256_hex(&self.regions[HYPERVISOR_DRAM.0 as usize].contents[..self.image_len]),
        }
    }

    fn require_core(&self, id: CoreId) -> Result<&CoreState, MachineError> {
        self.core(id).ok_or(MachineError::UnknownCore(id))
    }

    /// Checks one access by `core`. Reachability is consulted first (a bus
    /// fault dominates), then watchpoints, then the MMU of model cores.
    /// A watchpoint hit halts the core before the access completes.
    pub fn check_access(
        &mut self,
        journal: &mut Journal,
        core: CoreId,
        region: RegionId,
        addr: u64,
        kind: AccessKind,
    ) -> Result<AccessOutcome, MachineError> {
        let role = self.require_core(core)?.role;
        let reach = self.topology.reach(core, region);
        let size = self.region_size(region);
        let wired = match kind {
            AccessKind::Read | AccessKind::Execute => reach >= Reach::Read,
            AccessKind::Write => reach == Reach::ReadWrite,
        };
        if !wired || addr >= size {
            journal.emit(Source::Machine, "bus_fault", json!({"core": core, "region": region, "addr": addr, "access": kind}));
            journal.observe(Observation::new(
                ObservationKind::BusFault,
                journal.now(),
                Subject::Core(core),
                format!("{kind:?} {region} addr {addr:#x}").as_bytes(),
            ));
            return Ok(AccessOutcome::BusFault);
        }
        if role == CoreRole::Hypervisor {
            return Ok(AccessOutcome::Allowed);
        }
        let c = &self.cores[core.0 as usize];
        let replaying = c.watch_replay == Some(c.pc);
        if !replaying {
            if let Some(wp) = c.watchpoints.iter().find(|w| w.matches(region, addr, kind)).copied() {
                let c = &mut self.cores[core.0 as usize];
                c.run_state = RunState::Halted;
                c.watch_replay = Some(c.pc);
                let pc = c.pc;
                journal.emit(
                    Source::Machine,
                    "watchpoint_hit",
                    json!({"core": core, "pc": pc, "region": region, "addr": addr, "access": kind, "watchpoint": wp}),
                );
                journal.observe(Observation::new(
                    ObservationKind::WatchpointHit,
                    journal.now(),
                    Subject::Core(core),
                    format!("{kind:?} {region} addr {addr:#x} pc {pc}").as_bytes(),
                ));
                return Ok(AccessOutcome::WatchpointHalt);
            }
        }
        if self.topology.region(region).map(|r| r.kind) == Some(RegionKind::ModelDram) {
            let mmu = &self.mmus[&core];
            if !mmu.permits(addr, kind) {
                journal.emit(Source::Machine, "mmu_fault", json!({"core": core, "region": region, "addr": addr, "access": kind}));
                journal.observe(Observation::new(
                    ObservationKind::MmuFault,
                    journal.now(),
                    Subject::Core(core),
                    format!("{kind:?} addr {addr:#x}").as_bytes(),
                ));
                return Ok(AccessOutcome::MmuFault);
            }
        }
        Ok(AccessOutcome::Allowed)
    }

    /// Guest load of one byte.
    pub fn guest_read(&mut self, journal: &mut Journal, core: CoreId, region: RegionId, addr: u64) -> Result<u8, AccessOutcome> {
        match self.check_access(journal, core, region, addr, AccessKind::Read) {
            Ok(AccessOutcome::Allowed) => Ok(self.regions[region.0 as usize].contents[addr as usize]),
            Ok(other) => Err(other),
            Err(_) => Err(AccessOutcome::BusFault),
        }
    }

    /// Guest store of one byte.
    pub fn guest_write(
        &mut self,
        journal: &mut Journal,
        core: CoreId,
        region: RegionId,
        addr: u64,
        value: u8,
    ) -> Result<(), AccessOutcome> {
        match self.check_access(journal, core, region, addr, AccessKind::Write) {
            Ok(AccessOutcome::Allowed) => {
                self.regions[region.0 as usize].contents[addr as usize] = value;
                Ok(())
            }
            Ok(other) => Err(other),
            Err(_) => Err(AccessOutcome::BusFault),
        }
    }

    /// Fetches the encoded instruction at index `pc` for `core`.
    pub fn guest_fetch(&mut self, journal: &mut Journal, core: CoreId, pc: u64) -> Result<[u8; INSTR_SIZE as usize], AccessOutcome> {
        let base = self.require_core(core).map_err(|_| AccessOutcome::BusFault)?.code_base;
        let addr = pc.checked_mul(INSTR_SIZE).and_then(|o| o.checked_add(base)).ok_or(AccessOutcome::BusFault)?;
        match self.check_access(journal, core, MODEL_DRAM, addr, AccessKind::Execute) {
            Ok(AccessOutcome::Allowed) => {}
            Ok(other) => return Err(other),
            Err(_) => return Err(AccessOutcome::BusFault),
        }
        let bytes = &self.regions[MODEL_DRAM.0 as usize].contents;
        let end = addr + INSTR_SIZE;
        if end > bytes.len() as u64 {
            return Err(AccessOutcome::BusFault);
        }
        let mut out = [0u8; INSTR_SIZE as usize];
        out.copy_from_slice(&bytes[addr as usize..end as usize]);
        Ok(out)
    }

    /// Installs a page entry on a model core's MMU. Rejections are logged
    /// and surfaced to the detector; they never partially apply.
    pub fn configure_mmu_entry(&mut self, journal: &mut Journal, core: CoreId, page: u64, perms: PagePerms) -> Result<(), MachineError> {
        let mmu = self.mmus.get_mut(&core).ok_or(MachineError::NotModelCore(core))?;
        match mmu.configure(page, perms) {
            Ok(()) => {
                journal.emit(Source::Machine, "mmu_configured", json!({"core": core, "page": page, "perms": perms}));
                Ok(())
            }
            Err(e) => {
                journal.emit(Source::Machine, "mmu_rejected", json!({"core": core, "page": page, "perms": perms, "reason": e.to_string()}));
                journal.observe(Observation::new(
                    ObservationKind::MmuFault,
                    journal.now(),
                    Subject::Core(core),
                    format!("map page {page} {perms}: {e}").as_bytes(),
                ));
                Err(e.into())
            }
        }
    }

    /// Loader bulk mapping of `pages` on a model core, logged as one event.
    /// All-or-nothing: a page that would be rejected leaves the MMU untouched.
    pub(crate) fn configure_mmu_range(
        &mut self,
        journal: &mut Journal,
        core: CoreId,
        pages: Range<u64>,
        perms: PagePerms,
    ) -> Result<(), MachineError> {
        let mmu = self.mmus.get_mut(&core).ok_or(MachineError::NotModelCore(core))?;
        if pages.end > mmu.page_count() {
            return Err(MmuError::NoSuchPage(pages.end - 1).into());
        }
        if mmu.locked() && pages.clone().any(|p| mmu.violates_lockdown(p, perms)) {
            return Err(MmuError::RejectedLocked.into());
        }
        for page in pages.clone() {
            mmu.configure(page, perms)?;
        }
        journal.emit(
            Source::Machine,
            "mmu_configured",
            json!({"core": core, "first_page": pages.start, "pages": pages.end - pages.start, "perms": perms}),
        );
        Ok(())
    }

    /// Declares an executable region on a model core. Load-time only.
    pub fn declare_exec_region(&mut self, journal: &mut Journal, core: CoreId, region: ExecRegion) -> Result<(), MachineError> {
        let mmu = self.mmus.get_mut(&core).ok_or(MachineError::NotModelCore(core))?;
        mmu.declare_exec_region(region)?;
        journal.emit(Source::Machine, "exec_region_declared", json!({"core": core, "region": region}));
        Ok(())
    }

    fn check_dram_bus(&self, issuer: CoreId, region: RegionId, addr: u64, len: u64) -> Result<(), MachineError> {
        let c = self.require_core(issuer)?;
        if c.role != CoreRole::Hypervisor {
            return Err(MachineError::NotHypervisorCore(issuer));
        }
        if c.run_state == RunState::PoweredDown {
            return Err(MachineError::PoweredDown(issuer));
        }
        if self.topology.region(region).map(|r| r.kind) != Some(RegionKind::ModelDram) {
            return Err(MachineError::NotModelRegion(region));
        }
        if addr.checked_add(len).is_none_or(|end| end > self.region_size(region)) {
            return Err(MachineError::OutOfRange { region, addr, len });
        }
        let all_halted = self.topology.cores_attached(region).iter().all(|c| self.cores[c.0 as usize].is_halted());
        if !all_halted {
            return Err(MachineError::CoresNotHalted(region));
        }
        Ok(())
    }

    /// Reads model DRAM over the hypervisor's private bus. Every model core
    /// attached to the region must be halted or powered down.
    pub fn read_model_dram(
        &self,
        journal: &mut Journal,
        issuer: CoreId,
        region: RegionId,
        addr: u64,
        len: u64,
    ) -> Result<Vec<u8>, MachineError> {
        self.check_dram_bus(issuer, region, addr, len)?;
        let bytes = self.regions[region.0 as usize].contents[addr as usize..(addr + len) as usize].to_vec();
        journal.emit(
            Source::Machine,
            "dram_read",
            json!({"issuer": issuer, "region": region, "addr": addr, "len": len, "digest": sha256_hex(&bytes)}),
        );
        Ok(bytes)
    }

    pub fn write_model_dram(
        &mut self,
        journal: &mut Journal,
        issuer: CoreId,
        region: RegionId,
        addr: u64,
        bytes: &[u8],
    ) -> Result<(), MachineError> {
        self.check_dram_bus(issuer, region, addr, bytes.len() as u64)?;
        self.regions[region.0 as usize].contents[addr as usize..addr as usize + bytes.len()].copy_from_slice(bytes);
        journal.emit(
            Source::Machine,
            "dram_write",
            json!({"issuer": issuer, "region": region, "addr": addr, "len": bytes.len(), "digest": sha256_hex(bytes)}),
        );
        Ok(())
    }

    /// Load-time setup of a model core's code location and fault handler.
    pub(crate) fn set_guest_layout(&mut self, core: CoreId, code_base: u64, entry: u64, fault_handler: u64) {
        let c = &mut self.cores[core.0 as usize];
        c.code_base = code_base;
        c.entry = entry;
        c.pc = entry;
        c.fault_handler = fault_handler;
    }

    /// Loader write into model DRAM before any model core has started.
    pub(crate) fn install_model_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MachineError> {
        let size = self.region_size(MODEL_DRAM);
        if addr.checked_add(bytes.len() as u64).is_none_or(|end| end > size) {
            return Err(MachineError::OutOfRange { region: MODEL_DRAM, addr, len: bytes.len() as u64 });
        }
        self.regions[MODEL_DRAM.0 as usize].contents[addr as usize..addr as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Kill-switch power cut: every core, hypervisor cores included.
    pub fn power_down_all(&mut self, journal: &mut Journal) {
        for c in &mut self.cores {
            c.run_state = RunState::PoweredDown;
            c.reset();
        }
        journal.emit(Source::Machine, "power_down_all", json!({"cores": self.cores.len()}));
    }

    /// Restores power. Hypervisor cores run; model cores come up halted at
    /// their entry point.
    pub fn power_up_all(&mut self, journal: &mut Journal) {
        for c in &mut self.cores {
            if c.run_state != RunState::PoweredDown {
                continue;
            }
            c.run_state = match c.role {
                CoreRole::Hypervisor => RunState::Running,
                CoreRole::Model => RunState::Halted,
            };
            c.reset();
        }
        journal.emit(Source::Machine, "power_up_all", json!({"cores": self.cores.len()}));
    }

    /// Whether at least one hypervisor core is powered.
    pub fn hypervisor_alive(&self) -> bool {
        self.topology.hypervisor_cores().iter().any(|c| self.cores[c.0 as usize].run_state != RunState::PoweredDown)
    }

    pub fn snapshot_core(&self, core: CoreId) -> CoreSnapshot {
        let c = &self.cores[core.0 as usize];
        CoreSnapshot {
            id: c.id,
            role: c.role,
            run_state: c.run_state,
            registers: c.registers(),
            pc: if c.run_state == RunState::PoweredDown { 0 } else { c.pc },
            watchpoints: c.watchpoints.clone(),
            retired: c.retired,
        }
    }
}

#[cfg(test)]
mod tests;
