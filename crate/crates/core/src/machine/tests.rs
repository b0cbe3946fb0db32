use proptest::prelude::*;

use super::*;

const HYP: CoreId = CoreId(0);
const HYP1: CoreId = CoreId(1);
const MODEL: CoreId = CoreId(2);

fn boot() -> (Machine, Journal) {
    let m = Machine::boot(&MachineConfig::default(), b"silicon-0", b"hypervisor image v1").unwrap();
    (m, Journal::new())
}

fn locked_machine() -> (Machine, Journal) {
    let (mut m, mut j) = boot();
    m.declare_exec_region(&mut j, MODEL, ExecRegion { base: 0, bound: 16 * PAGE_SIZE }).unwrap();
    for p in 0..16 {
        m.configure_mmu_entry(&mut j, MODEL, p, PagePerms::X).unwrap();
    }
    for p in 16..64 {
        m.configure_mmu_entry(&mut j, MODEL, p, PagePerms::RW).unwrap();
    }
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::LockMmu).unwrap();
    (m, j)
}

#[test]
fn topology_shape() {
    let (m, _) = boot();
    let t = m.topology();
    assert_eq!(t.hypervisor_cores(), &[HYP, HYP1]);
    assert_eq!(t.model_cores(), &[MODEL]);
    assert_eq!(t.reach(MODEL, HYPERVISOR_DRAM), Reach::None);
    assert_eq!(t.reach(MODEL, MODEL_DRAM), Reach::ReadWrite);
    for r in [HYPERVISOR_DRAM, MODEL_DRAM, SHARED_IO] {
        assert_eq!(t.reach(HYP, r), Reach::ReadWrite);
    }
    let io_regions = t.regions().iter().filter(|r| r.kind == RegionKind::SharedIoDram).count();
    assert_eq!(io_regions, 1);
    assert_eq!(m.core(MODEL).unwrap().run_state, RunState::Halted);
}

#[test]
fn rejects_degenerate_configs() {
    let cfg = MachineConfig { model_cores: 0, ..MachineConfig::default() };
    assert!(Machine::boot(&cfg, b"s", b"i").is_err());
    let cfg = MachineConfig { hypervisor_dram: 4, ..MachineConfig::default() };
    assert!(Machine::boot(&cfg, b"s", b"too long image").is_err());
}

#[test]
fn model_read_of_hypervisor_dram_is_bus_fault() {
    let (mut m, mut j) = boot();
    let out = m.check_access(&mut j, MODEL, HYPERVISOR_DRAM, 0, AccessKind::Read).unwrap();
    assert_eq!(out, AccessOutcome::BusFault);
    assert_eq!(j.count_kind("bus_fault"), 1);
    assert_eq!(j.take_observation().unwrap().kind, ObservationKind::BusFault);
    assert_eq!(m.guest_read(&mut j, MODEL, HYPERVISOR_DRAM, 0), Err(AccessOutcome::BusFault));
}

#[test]
fn model_reads_own_dram_before_lock() {
    let (mut m, mut j) = boot();
    m.configure_mmu_entry(&mut j, MODEL, 0, PagePerms::RW).unwrap();
    assert_eq!(m.check_access(&mut j, MODEL, MODEL_DRAM, 0, AccessKind::Read).unwrap(), AccessOutcome::Allowed);
}

#[test]
fn locked_exec_region_is_neither_readable_nor_writable() {
    let (mut m, mut j) = locked_machine();
    assert_eq!(m.check_access(&mut j, MODEL, MODEL_DRAM, 8, AccessKind::Write).unwrap(), AccessOutcome::MmuFault);
    assert_eq!(m.check_access(&mut j, MODEL, MODEL_DRAM, 8, AccessKind::Read).unwrap(), AccessOutcome::MmuFault);
    assert_eq!(m.check_access(&mut j, MODEL, MODEL_DRAM, 8, AccessKind::Execute).unwrap(), AccessOutcome::Allowed);
    assert_eq!(j.count_kind("mmu_fault"), 2);
}

#[test]
fn out_of_range_address_is_bus_fault() {
    let (mut m, mut j) = boot();
    let size = m.region_size(MODEL_DRAM);
    assert_eq!(m.check_access(&mut j, MODEL, MODEL_DRAM, size, AccessKind::Read).unwrap(), AccessOutcome::BusFault);
    assert_eq!(m.check_access(&mut j, CoreId(99), MODEL_DRAM, 0, AccessKind::Read), Err(MachineError::UnknownCore(CoreId(99))));
}

#[test]
fn configure_after_lock() {
    let (mut m, mut j) = locked_machine();
    let err = m.configure_mmu_entry(&mut j, MODEL, 40, PagePerms::X).unwrap_err();
    assert_eq!(err, MachineError::Mmu(MmuError::RejectedLocked));
    assert!(!m.mmu(MODEL).unwrap().entry(40).executable);
    assert_eq!(j.count_kind("mmu_rejected"), 1);
    m.configure_mmu_entry(&mut j, MODEL, 50, PagePerms::RW).unwrap();
    assert_eq!(m.configure_mmu_entry(&mut j, HYP, 1, PagePerms::RW), Err(MachineError::NotModelCore(HYP)));
}

#[test]
fn pause_and_issuer_checks() {
    let (mut m, mut j) = boot();
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Resume).unwrap();
    assert_eq!(m.core(MODEL).unwrap().run_state, RunState::Running);
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Pause).unwrap();
    assert_eq!(m.core(MODEL).unwrap().run_state, RunState::Halted);
    assert_eq!(m.control_bus(&mut j, MODEL, MODEL, &ControlCommand::Pause), Err(MachineError::NotHypervisorCore(MODEL)));
    assert_eq!(m.control_bus(&mut j, HYP, HYP1, &ControlCommand::Pause), Err(MachineError::NotModelCore(HYP1)));
    assert_eq!(j.count_kind("control"), 4);
}

#[test]
fn halted_only_commands() {
    let (mut m, mut j) = boot();
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Resume).unwrap();
    for cmd in [ControlCommand::InspectState, ControlCommand::SingleStep, ControlCommand::PowerDown] {
        assert_eq!(m.control_bus(&mut j, HYP, MODEL, &cmd), Err(MachineError::TargetNotHalted(MODEL)));
    }
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Pause).unwrap();
    let edit = StateEdit { registers: [("acc".to_owned(), 7)].into(), pc: Some(3) };
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::ModifyState { edit }).unwrap();
    match m.control_bus(&mut j, HYP, MODEL, &ControlCommand::InspectState).unwrap() {
        CommandResult::State { snapshot } => {
            assert_eq!(snapshot.pc, 3);
            assert_eq!(snapshot.registers["acc"], 7);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn clear_uarch_zeroes_scratch() {
    let (mut m, mut j) = boot();
    m.core_mut(MODEL).unwrap().set_uarch_scratch(0xAB);
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::ClearUarch).unwrap();
    assert_eq!(m.core(MODEL).unwrap().uarch_scratch(), 0);
}

#[test]
fn powered_down_registers_read_zero() {
    let (mut m, mut j) = boot();
    m.core_mut(MODEL).unwrap().set_register(reg::ACC, 9);
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::PowerDown).unwrap();
    let c = m.core(MODEL).unwrap();
    assert_eq!(c.register(reg::ACC), 0);
    assert!(c.registers().values().all(|v| *v == 0));
    assert_eq!(m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Resume), Err(MachineError::PoweredDown(MODEL)));
}

#[test]
fn watchpoint_halts_then_replays_once() {
    let (mut m, mut j) = boot();
    m.configure_mmu_entry(&mut j, MODEL, 1, PagePerms::RW).unwrap();
    let wp = Watchpoint { region: MODEL_DRAM, start: 64, end: 72, kind: AccessKind::Write };
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::SetWatchpoint { watchpoint: wp }).unwrap();
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Resume).unwrap();
    assert_eq!(m.guest_write(&mut j, MODEL, MODEL_DRAM, 66, 5), Err(AccessOutcome::WatchpointHalt));
    assert_eq!(m.core(MODEL).unwrap().run_state, RunState::Halted);
    assert_eq!(m.region(MODEL_DRAM).unwrap().bytes()[66], 0);
    assert_eq!(j.count_kind("watchpoint_hit"), 1);
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Resume).unwrap();
    m.guest_write(&mut j, MODEL, MODEL_DRAM, 66, 5).unwrap();
    assert_eq!(m.region(MODEL_DRAM).unwrap().bytes()[66], 5);
}

#[test]
fn dram_bus_requires_halted_cores() {
    let (mut m, mut j) = boot();
    m.write_model_dram(&mut j, HYP, MODEL_DRAM, 100, &[1, 2, 3, 4]).unwrap();
    assert_eq!(m.read_model_dram(&mut j, HYP, MODEL_DRAM, 100, 4).unwrap(), vec![1, 2, 3, 4]);
    m.control_bus(&mut j, HYP, MODEL, &ControlCommand::Resume).unwrap();
    assert_eq!(m.read_model_dram(&mut j, HYP, MODEL_DRAM, 0, 4), Err(MachineError::CoresNotHalted(MODEL_DRAM)));
    assert_eq!(m.read_model_dram(&mut j, MODEL, MODEL_DRAM, 0, 4), Err(MachineError::NotHypervisorCore(MODEL)));
    assert_eq!(m.read_model_dram(&mut j, HYP, SHARED_IO, 0, 4), Err(MachineError::NotModelRegion(SHARED_IO)));
    let logged = j.of_kind("dram_write").next().unwrap();
    assert_eq!(logged.str_field("digest"), Some(sha256_hex(&[1, 2, 3, 4]).as_str()));
}

#[test]
fn power_cycle() {
    let (mut m, mut j) = boot();
    m.power_down_all(&mut j);
    assert!(!m.hypervisor_alive());
    assert!(m.cores().iter().all(|c| c.run_state == RunState::PoweredDown));
    m.power_up_all(&mut j);
    assert!(m.hypervisor_alive());
    assert_eq!(m.core(MODEL).unwrap().run_state, RunState::Halted);
}

#[test]
fn measurement_tracks_image() {
    let (m, _) = boot();
    let meas = m.measure();
    assert_eq!(meas.software, sha256_hex(b"hypervisor image v1"));
    assert_eq!(meas.silicon, sha256_hex(b"silicon-0"));
}

#[test]
fn no_translation_layer() {
    // Guest addresses index region storage directly.
    let (mut m, mut j) = boot();
    m.configure_mmu_entry(&mut j, MODEL, 3, PagePerms::RW).unwrap();
    m.guest_write(&mut j, MODEL, MODEL_DRAM, 3 * PAGE_SIZE + 1, 0x5A).unwrap();
    assert_eq!(m.region(MODEL_DRAM).unwrap().bytes()[(3 * PAGE_SIZE + 1) as usize], 0x5A);
}

proptest! {
    #[test]
    fn model_cores_never_read_hypervisor_dram(addr in 0u64..(1 << 20), kind in 0u8..3) {
        let (mut m, mut j) = boot();
        let before = m.region_digest(HYPERVISOR_DRAM);
        let kind = [AccessKind::Read, AccessKind::Write, AccessKind::Execute][kind as usize];
        prop_assert_eq!(m.check_access(&mut j, MODEL, HYPERVISOR_DRAM, addr, kind).unwrap(), AccessOutcome::BusFault);
        prop_assert!(m.guest_read(&mut j, MODEL, HYPERVISOR_DRAM, addr).is_err());
        prop_assert!(m.guest_write(&mut j, MODEL, HYPERVISOR_DRAM, addr, 0xFF).is_err());
        prop_assert_eq!(before, m.region_digest(HYPERVISOR_DRAM));
    }
}
