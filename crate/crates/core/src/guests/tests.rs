use proptest::prelude::*;

use super::*;
use crate::detector::ObservationKind;
use crate::machine::{reg, AccessKind, MachineConfig, RunState, Watchpoint, HYPERVISOR_DRAM};
use crate::ports::PortError;

const HYP: CoreId = CoreId(0);
const CORE: CoreId = CoreId(2);

#[derive(Default)]
struct StubIo {
    writes: Vec<(u32, Vec<u8>)>,
    irqs: u64,
}

impl GuestIo for StubIo {
    fn port_write(&mut self, _: &mut Machine, _: &mut Journal, _: CoreId, slot: u32, payload: &[u8]) -> Result<u64, PortError> {
        if slot > 0 {
            return Err(PortError::NoSuchCapability { slot });
        }
        self.writes.push((slot, payload.to_vec()));
        Ok(self.writes.len() as u64 - 1)
    }

    fn raise_irq(&mut self, _: &mut Journal, _: CoreId) {
        self.irqs += 1;
    }
}

struct Rig {
    machine: Machine,
    journal: Journal,
    io: StubIo,
    layout: Layout,
}

impl Rig {
    fn new(program: &GuestProgram) -> Self {
        let mut machine = Machine::boot(&MachineConfig::default(), b"s", b"hypervisor image").unwrap();
        let mut journal = Journal::new();
        let image = program.image(machine.region_size(MODEL_DRAM)).unwrap();
        install(&mut machine, &mut journal, HYP, &image).unwrap();
        machine.control_bus(&mut journal, HYP, CORE, &ControlCommand::Resume).unwrap();
        Self { machine, journal, io: StubIo::default(), layout: image.layout }
    }

    fn step(&mut self) -> StepResult {
        step(&mut self.machine, &mut self.journal, &mut self.io, CORE, &self.layout)
    }

    fn run(&mut self, n: usize) {
        for _ in 0..n {
            self.step();
        }
    }

    fn reg(&self, name: &str) -> u64 {
        self.machine.core(CORE).unwrap().register(name)
    }

    fn pc(&self) -> u64 {
        self.machine.core(CORE).unwrap().pc
    }

    fn code_digest(&self) -> String {
        self.machine.range_digest(MODEL_DRAM, self.layout.exec.base..self.layout.exec.bound)
    }
}

fn prog(instrs: Vec<GuestInstr>) -> GuestProgram {
    GuestProgram::new("t", instrs)
}

fn instr_strategy() -> impl Strategy<Value = GuestInstr> {
    prop_oneof![
        (any::<u32>(), any::<u64>()).prop_map(|(region, addr)| GuestInstr::Load { region, addr }),
        (any::<u32>(), any::<u64>(), any::<u8>()).prop_map(|(region, addr, val)| GuestInstr::Store { region, addr, val }),
        (any::<u32>(), any::<u32>()).prop_map(|(slot, payload)| GuestInstr::PortWrite { slot, payload }),
        (any::<u64>(), 0u8..8).prop_map(|(page, b)| GuestInstr::MapPage { page, perms: PagePerms::from_bits(b) }),
        (any::<u64>(), any::<u8>()).prop_map(|(addr, val)| GuestInstr::WriteCode { addr, val }),
        any::<u64>().prop_map(|val| GuestInstr::CovertSet { val }),
        Just(GuestInstr::CovertGet),
        Just(GuestInstr::RaiseIrq),
        any::<u32>().prop_map(|n| GuestInstr::Spin { n }),
        any::<u32>().prop_map(|target| GuestInstr::Jump { target }),
        Just(GuestInstr::Halt),
    ]
}

proptest! {
    #[test]
    fn encoding_round_trips(instr in instr_strategy()) {
        prop_assert_eq!(GuestInstr::decode(&instr.encode()), Ok(instr));
        let json = serde_json::to_string(&instr).unwrap();
        prop_assert_eq!(serde_json::from_str::<GuestInstr>(&json).unwrap(), instr);
    }

    #[test]
    fn every_word_has_at_most_one_meaning(word in any::<[u8; 16]>()) {
        if let Ok(instr) = GuestInstr::decode(&word) {
            prop_assert_eq!(instr.encode(), word);
        }
    }
}

#[test]
fn zeroed_memory_is_not_code() {
    assert_eq!(GuestInstr::decode(&[0; 16]), Err(DecodeError::Opcode(0)));
}

#[test]
fn json_form() {
    let p: GuestProgram = serde_json::from_str(
        r#"{
            "name": "demo",
            "instructions": [
                {"op": "STORE", "region": 1, "addr": 4096, "val": 7},
                {"op": "MAP_PAGE", "page": 3, "perms": "rw-"},
                {"op": "PORT_WRITE", "slot": 0, "payload": 0},
                {"op": "JUMP", "target": 0}
            ],
            "on_fault": {"kind": "skip"},
            "payloads": ["hi", {"host": "echo.example", "data": "x"}, {"hex": "00ff"}],
            "ports": ["storage"]
        }"#,
    )
    .unwrap();
    assert_eq!(p.instructions[1], GuestInstr::MapPage { page: 3, perms: PagePerms::RW });
    assert_eq!(p.payloads[2].bytes().unwrap(), vec![0, 255]);
    assert_eq!(p.payloads[1].bytes().unwrap(), crate::ports::encode_frame("echo.example", b"x"));
    let img = p.image(4096).unwrap();
    assert_eq!(img.layout.exec, ExecRegion { base: 0, bound: 64 });
    assert_eq!(img.layout.payload_addrs, vec![64, 68, 84]);
}

#[test]
fn image_checks_references() {
    assert_eq!(prog(vec![]).image(4096), Err(ProgramError::Empty));
    let bad_jump = prog(vec![GuestInstr::Jump { target: 3 }]);
    assert!(matches!(bad_jump.image(4096), Err(ProgramError::IndexOutOfRange { what: "jump target", .. })));
    let bad_payload = prog(vec![GuestInstr::PortWrite { slot: 0, payload: 0 }]);
    assert!(matches!(bad_payload.image(4096), Err(ProgramError::PayloadOutOfRange { .. })));
    let mut small_region = prog(vec![GuestInstr::Halt; 5]);
    small_region.exec_region = Some(ExecRegion { base: 64, bound: 128 });
    assert!(matches!(small_region.image(4096), Err(ProgramError::BadExecRegion { .. })));
    let mut handler = prog(vec![GuestInstr::Halt]);
    handler.on_fault = OnFault::Jump { handler: 1 };
    assert!(matches!(handler.image(4096), Err(ProgramError::IndexOutOfRange { what: "fault handler", .. })));
    assert!(matches!(prog(vec![GuestInstr::Halt; 300]).image(4096), Err(ProgramError::DoesNotFit { .. })));
}

#[test]
fn store_then_load_round_trips() {
    let mut rig = Rig::new(&prog(vec![
        GuestInstr::Store { region: 1, addr: 4096, val: 42 },
        GuestInstr::Load { region: 1, addr: 4096 },
        GuestInstr::Halt,
    ]));
    rig.run(3);
    assert_eq!(rig.reg(reg::ACC), 42);
    assert_eq!(rig.machine.core(CORE).unwrap().run_state, RunState::Halted);
    assert_eq!(rig.journal.count_kind("guest_halt"), 1);
}

#[test]
fn hypervisor_load_goes_to_guest_handler() {
    let mut p = prog(vec![GuestInstr::Load { region: 0, addr: 0 }, GuestInstr::Halt, GuestInstr::Spin { n: 1 }]);
    p.on_fault = OnFault::Jump { handler: 2 };
    let mut rig = Rig::new(&p);
    let before = rig.machine.region_digest(HYPERVISOR_DRAM);
    let controls = rig.journal.count_kind("control");
    assert_eq!(rig.step(), StepResult::Fault { code: FaultCode::Bus, pc: 0 });
    assert_eq!(rig.pc(), 2);
    assert_eq!(rig.reg(reg::FAULT_CODE), FaultCode::Bus as u64);
    assert_eq!(rig.reg(reg::ACC), 0);
    assert_eq!(rig.journal.take_observation().unwrap().kind, ObservationKind::BusFault);
    assert_eq!(rig.machine.region_digest(HYPERVISOR_DRAM), before);
    // Fault handling never involves the hypervisor's control bus.
    assert_eq!(rig.journal.count_kind("control"), controls);
}

#[test]
fn write_code_takes_mmu_fault_path() {
    let mut p = prog(vec![GuestInstr::WriteCode { addr: 0, val: 0xff }, GuestInstr::Halt]);
    p.on_fault = OnFault::Skip;
    let mut rig = Rig::new(&p);
    let code = rig.code_digest();
    assert_eq!(rig.step(), StepResult::Fault { code: FaultCode::Mmu, pc: 0 });
    assert_eq!(rig.pc(), 1);
    assert_eq!(rig.code_digest(), code);
    assert_eq!(rig.journal.take_observation().unwrap().kind, ObservationKind::MmuFault);
}

#[test]
fn port_write_sends_payload_from_guest_memory() {
    let mut p = prog(vec![GuestInstr::PortWrite { slot: 0, payload: 0 }, GuestInstr::PortWrite { slot: 4, payload: 0 }, GuestInstr::Halt]);
    p.payloads = vec![Payload::Text("hello".into())];
    let mut rig = Rig::new(&p);
    rig.step();
    assert_eq!(rig.io.writes, vec![(0, b"hello".to_vec())]);
    assert_eq!(rig.reg(reg::ACC), 0);
    rig.step();
    assert_eq!(rig.reg(reg::ACC), 5);
}

#[test]
fn guest_can_rewrite_its_payload_data() {
    let mut p = prog(vec![GuestInstr::Halt; 4]);
    p.payloads = vec![Payload::Text("abc".into())];
    let data_base = p.image(1 << 18).unwrap().layout.data_base;
    p.instructions = vec![
        GuestInstr::Store { region: 1, addr: data_base + 2, val: b'z' },
        GuestInstr::PortWrite { slot: 0, payload: 0 },
        GuestInstr::Halt,
        GuestInstr::Halt,
    ];
    let mut rig = Rig::new(&p);
    rig.run(2);
    assert_eq!(rig.io.writes[0].1, b"zbc");
}

#[test]
fn spin_occupies_n_ticks() {
    let mut rig = Rig::new(&prog(vec![GuestInstr::Spin { n: 3 }, GuestInstr::RaiseIrq, GuestInstr::Halt]));
    assert!(matches!(rig.step(), StepResult::Retired(GuestInstr::Spin { .. })));
    assert_eq!(rig.step(), StepResult::Spinning);
    assert_eq!(rig.step(), StepResult::Spinning);
    assert_eq!(rig.io.irqs, 0);
    rig.step();
    assert_eq!(rig.io.irqs, 1);
}

#[test]
fn watchpoint_halts_before_store_and_replays() {
    let mut rig = Rig::new(&prog(vec![GuestInstr::Store { region: 1, addr: 4096, val: 9 }, GuestInstr::Halt]));
    rig.machine.control_bus(&mut rig.journal, HYP, CORE, &ControlCommand::Pause).unwrap();
    let wp = Watchpoint { region: MODEL_DRAM, start: 4096, end: 4097, kind: AccessKind::Write };
    rig.machine.control_bus(&mut rig.journal, HYP, CORE, &ControlCommand::SetWatchpoint { watchpoint: wp }).unwrap();
    rig.machine.control_bus(&mut rig.journal, HYP, CORE, &ControlCommand::Resume).unwrap();
    assert_eq!(rig.step(), StepResult::WatchpointHalt);
    assert_eq!(rig.pc(), 0);
    let byte = rig.machine.read_model_dram(&mut rig.journal, HYP, MODEL_DRAM, 4096, 1).unwrap();
    assert_eq!(byte, vec![0]);
    rig.machine.control_bus(&mut rig.journal, HYP, CORE, &ControlCommand::Resume).unwrap();
    assert!(matches!(rig.step(), StepResult::Retired(_)));
    rig.machine.control_bus(&mut rig.journal, HYP, CORE, &ControlCommand::Pause).unwrap();
    let byte = rig.machine.read_model_dram(&mut rig.journal, HYP, MODEL_DRAM, 4096, 1).unwrap();
    assert_eq!(byte, vec![9]);
}

#[test]
fn halted_core_does_nothing() {
    let mut rig = Rig::new(&prog(vec![GuestInstr::RaiseIrq, GuestInstr::Halt]));
    rig.machine.control_bus(&mut rig.journal, HYP, CORE, &ControlCommand::Pause).unwrap();
    assert_eq!(rig.step(), StepResult::NotRunning);
    assert_eq!(rig.io.irqs, 0);
}

#[test]
fn mmu_is_locked_before_the_first_instruction() {
    let rig = Rig::new(&prog(vec![GuestInstr::Halt]));
    assert!(rig.machine.mmu(CORE).unwrap().locked());
    let locked = rig.journal.of_kind("mmu_locked").next().unwrap().seq;
    let resumed = rig.journal.of_kind("control").last().unwrap().seq;
    assert!(locked < resumed);
}

#[test]
fn library_has_every_attack() {
    let lib = workload_library();
    assert!(lib.len() >= 8);
    let names: std::collections::BTreeSet<_> = lib.iter().map(|w| w.program.name.clone()).collect();
    assert_eq!(names.len(), lib.len());
    for w in &lib {
        w.program.image(256 * 1024).unwrap_or_else(|e| panic!("{}: {e}", w.program.name));
        let json = serde_json::to_string(&w.program).unwrap();
        assert_eq!(serde_json::from_str::<GuestProgram>(&json).unwrap(), w.program);
        assert!(!w.program.expected_outcome.is_empty());
    }
    let flood = workload("interrupt_flood").unwrap();
    let irqs = flood.program.instructions.iter().filter(|i| **i == GuestInstr::RaiseIrq).count();
    assert_eq!(irqs, 10_000);
}

/// Programs that touch only their own data pages, so free-running and
/// single-stepped executions are comparable.
fn safe_program() -> impl Strategy<Value = Vec<GuestInstr>> {
    let op = prop_oneof![
        (0u64..64, any::<u8>()).prop_map(|(o, val)| GuestInstr::Store { region: 1, addr: 4096 + o, val }),
        (0u64..64).prop_map(|o| GuestInstr::Load { region: 1, addr: 4096 + o }),
        any::<u64>().prop_map(|val| GuestInstr::CovertSet { val }),
        Just(GuestInstr::CovertGet),
        (1u32..4).prop_map(|n| GuestInstr::Spin { n }),
        (0u32..12).prop_map(|target| GuestInstr::Jump { target }),
    ];
    prop::collection::vec(op, 12)
}

fn observable(rig: &Rig) -> (u64, Vec<(String, u64)>, u64, String) {
    let c = rig.machine.core(CORE).unwrap();
    (c.pc, c.registers().into_iter().collect(), c.uarch_scratch(), rig.machine.region_digest(MODEL_DRAM))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_step_matches_free_running_prefix(instrs in safe_program(), k in 1usize..40) {
        let p = prog(instrs);
        let mut free = Rig::new(&p);
        free.run(k);
        let mut stepped = Rig::new(&p);
        stepped.machine.control_bus(&mut stepped.journal, HYP, CORE, &ControlCommand::Pause).unwrap();
        for _ in 0..k {
            single_step(&mut stepped.machine, &mut stepped.journal, &mut stepped.io, HYP, CORE, &stepped.layout).unwrap();
            prop_assert_eq!(stepped.machine.core(CORE).unwrap().run_state, RunState::Halted);
        }
        prop_assert_eq!(observable(&stepped), observable(&free));
    }

    #[test]
    fn clear_uarch_erases_planted_values(v in 1u64..) {
        let mut rig = Rig::new(&prog(vec![
            GuestInstr::CovertSet { val: v },
            GuestInstr::CovertGet,
            GuestInstr::CovertGet,
            GuestInstr::Halt,
        ]));
        rig.run(2);
        prop_assert_eq!(rig.reg(reg::ACC), v);
        for cmd in [ControlCommand::Pause, ControlCommand::ClearUarch, ControlCommand::Resume] {
            rig.machine.control_bus(&mut rig.journal, HYP, CORE, &cmd).unwrap();
        }
        rig.step();
        prop_assert_eq!(rig.reg(reg::ACC), 0);
    }
}
