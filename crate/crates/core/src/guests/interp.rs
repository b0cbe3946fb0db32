use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{GuestInstr, Layout, OnFault};
use crate::detector::{Observation, ObservationKind, Subject};
use crate::event::{Journal, Source};
use crate::ids::{CoreId, ModelId, RegionId};
use crate::machine::{reg, AccessOutcome, Machine, RunState, INSTR_SIZE, MODEL_DRAM, PAGE_SIZE};
use crate::ports::{PortBroker, PortError};

/// The port API as seen from a model core.
pub trait GuestIo {
    fn port_write(
        &mut self,
        machine: &mut Machine,
        journal: &mut Journal,
        core: CoreId,
        slot: u32,
        payload: &[u8],
    ) -> Result<u64, PortError>;

    fn raise_irq(&mut self, journal: &mut Journal, core: CoreId);
}

/// [`GuestIo`] backed by the real broker on behalf of one model.
pub struct BrokerIo<'a> {
    pub broker: &'a mut PortBroker,
    pub model: ModelId,
}

impl GuestIo for BrokerIo<'_> {
    fn port_write(
        &mut self,
        machine: &mut Machine,
        journal: &mut Journal,
        core: CoreId,
        slot: u32,
        payload: &[u8],
    ) -> Result<u64, PortError> {
        self.broker.port_write(machine, journal, self.model, core, slot, payload)
    }

    fn raise_irq(&mut self, journal: &mut Journal, core: CoreId) {
        self.broker.raise_irq(journal, core, None);
    }
}

/// Value of the `fault_code` register after a guest fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCode {
    Bus = 1,
    Mmu = 2,
    IllegalInstruction = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    /// The core is halted or powered down; nothing happened.
    NotRunning,
    /// One tick of an earlier `SPIN`.
    Spinning,
    Retired(GuestInstr),
    /// Control went to the guest's own handler.
    Fault {
        code: FaultCode,
        pc: u64,
    },
    /// A watchpoint halted the core before the access; it replays on resume.
    WatchpointHalt,
    Halted,
}

enum Exec {
    Done { next_pc: u64 },
    Fault { code: FaultCode, addr: u64 },
    Watch,
    Halt,
}

fn access_fault(outcome: AccessOutcome, addr: u64) -> Exec {
    match outcome {
        AccessOutcome::WatchpointHalt => Exec::Watch,
        AccessOutcome::MmuFault => Exec::Fault { code: FaultCode::Mmu, addr },
        AccessOutcome::BusFault | AccessOutcome::Allowed => Exec::Fault { code: FaultCode::Bus, addr },
    }
}

/// Executes one instruction (or one tick of a spin) on `core`. A core in
/// single-step mode halts again afterwards.
pub fn step(machine: &mut Machine, journal: &mut Journal, io: &mut dyn GuestIo, core: CoreId, layout: &Layout) -> StepResult {
    let Some(state) = machine.core(core) else { return StepResult::NotRunning };
    let single = match state.run_state {
        RunState::Running => false,
        RunState::SingleStepping => true,
        RunState::Halted | RunState::PoweredDown => return StepResult::NotRunning,
    };
    let result = if state.spin_remaining > 0 {
        let c = machine.core_mut(core).expect("exists");
        c.spin_remaining -= 1;
        StepResult::Spinning
    } else {
        execute(machine, journal, io, core, layout)
    };
    if single {
        let c = machine.core_mut(core).expect("exists");
        if c.run_state == RunState::SingleStepping {
            c.run_state = RunState::Halted;
        }
        let pc = c.pc;
        journal.emit(Source::Guests, "single_step_done", json!({"core": core, "pc": pc}));
    }
    result
}

/// Issues a single-step on the control bus and runs the one instruction.
pub fn single_step(
    machine: &mut Machine,
    journal: &mut Journal,
    io: &mut dyn GuestIo,
    issuer: CoreId,
    core: CoreId,
    layout: &Layout,
) -> Result<StepResult, crate::machine::MachineError> {
    machine.control_bus(journal, issuer, core, &crate::machine::ControlCommand::SingleStep)?;
    Ok(step(machine, journal, io, core, layout))
}

fn execute(machine: &mut Machine, journal: &mut Journal, io: &mut dyn GuestIo, core: CoreId, layout: &Layout) -> StepResult {
    let pc = machine.core(core).expect("exists").pc;
    let fetch_addr = layout.code_base() + pc.saturating_mul(INSTR_SIZE);
    let word = match machine.guest_fetch(journal, core, pc) {
        Ok(word) => word,
        Err(AccessOutcome::WatchpointHalt) => return StepResult::WatchpointHalt,
        Err(AccessOutcome::MmuFault) => {
            return deliver_fault(machine, journal, core, layout, pc, FaultCode::Mmu, fetch_addr);
        }
        Err(_) => return deliver_fault(machine, journal, core, layout, pc, FaultCode::Bus, fetch_addr),
    };
    let instr = match GuestInstr::decode(&word) {
        Ok(instr) => instr,
        Err(e) => {
            journal.observe(Observation::new(
                ObservationKind::BusFault,
                journal.now(),
                Subject::Core(core),
                format!("illegal instruction at pc {pc}: {e}").as_bytes(),
            ));
            return deliver_fault(machine, journal, core, layout, pc, FaultCode::IllegalInstruction, fetch_addr);
        }
    };
    let next = pc + 1;
    let exec = match instr {
        GuestInstr::Load { region, addr } => match machine.guest_read(journal, core, RegionId(region), addr) {
            Ok(v) => {
                machine.core_mut(core).expect("exists").set_register(reg::ACC, u64::from(v));
                Exec::Done { next_pc: next }
            }
            Err(o) => access_fault(o, addr),
        },
        GuestInstr::Store { region, addr, val } => match machine.guest_write(journal, core, RegionId(region), addr, val) {
            Ok(()) => Exec::Done { next_pc: next },
            Err(o) => access_fault(o, addr),
        },
        GuestInstr::PortWrite { slot, payload } => port_write(machine, journal, io, core, layout, slot, payload, next),
        GuestInstr::MapPage { page, perms } => match machine.configure_mmu_entry(journal, core, page, perms) {
            Ok(()) => Exec::Done { next_pc: next },
            Err(_) => Exec::Fault { code: FaultCode::Mmu, addr: page.saturating_mul(PAGE_SIZE) },
        },
        GuestInstr::WriteCode { addr, val } => {
            let target = layout.code_base().saturating_add(addr);
            match machine.guest_write(journal, core, MODEL_DRAM, target, val) {
                Ok(()) => Exec::Done { next_pc: next },
                Err(o) => access_fault(o, target),
            }
        }
        GuestInstr::CovertSet { val } => {
            machine.core_mut(core).expect("exists").set_uarch_scratch(val);
            journal.emit(Source::Guests, "covert_set", json!({"core": core, "value": val}));
            Exec::Done { next_pc: next }
        }
        GuestInstr::CovertGet => {
            let c = machine.core_mut(core).expect("exists");
            let v = c.uarch_scratch();
            c.set_register(reg::ACC, v);
            journal.emit(Source::Guests, "covert_get", json!({"core": core, "value": v}));
            Exec::Done { next_pc: next }
        }
        GuestInstr::RaiseIrq => {
            io.raise_irq(journal, core);
            Exec::Done { next_pc: next }
        }
        GuestInstr::Spin { n } => {
            machine.core_mut(core).expect("exists").spin_remaining = n.saturating_sub(1);
            Exec::Done { next_pc: next }
        }
        GuestInstr::Jump { target } => Exec::Done { next_pc: u64::from(target) },
        GuestInstr::Halt => Exec::Halt,
    };
    match exec {
        Exec::Done { next_pc } => {
            let c = machine.core_mut(core).expect("exists");
            c.pc = next_pc;
            c.retired += 1;
            c.watch_replay = None;
            StepResult::Retired(instr)
        }
        Exec::Halt => {
            let c = machine.core_mut(core).expect("exists");
            c.run_state = RunState::Halted;
            c.retired += 1;
            c.watch_replay = None;
            journal.emit(Source::Guests, "guest_halt", json!({"core": core, "pc": pc}));
            StepResult::Halted
        }
        Exec::Watch => StepResult::WatchpointHalt,
        Exec::Fault { code, addr } => deliver_fault(machine, journal, core, layout, pc, code, addr),
    }
}

#[allow(clippy::too_many_arguments)]
fn port_write(
    machine: &mut Machine,
    journal: &mut Journal,
    io: &mut dyn GuestIo,
    core: CoreId,
    layout: &Layout,
    slot: u32,
    payload: u32,
    next: u64,
) -> Exec {
    let Some(&base) = layout.payload_addrs.get(payload as usize) else {
        return Exec::Fault { code: FaultCode::IllegalInstruction, addr: layout.data_base };
    };
    let mut read = |addr: u64| machine.guest_read(journal, core, MODEL_DRAM, addr).map_err(|o| access_fault(o, addr));
    let len = match (read(base), read(base + 1)) {
        (Ok(lo), Ok(hi)) => u64::from(u16::from_le_bytes([lo, hi])),
        (Err(e), _) | (_, Err(e)) => return e,
    };
    let mut bytes = Vec::with_capacity(len as usize);
    for i in 0..len {
        match read(base + 2 + i) {
            Ok(b) => bytes.push(b),
            Err(e) => return e,
        }
    }
    let status = match io.port_write(machine, journal, core, slot, &bytes) {
        Ok(_) => 0,
        Err(e) => e.guest_code(),
    };
    machine.core_mut(core).expect("exists").set_register(reg::ACC, status);
    Exec::Done { next_pc: next }
}

fn deliver_fault(
    machine: &mut Machine,
    journal: &mut Journal,
    core: CoreId,
    layout: &Layout,
    pc: u64,
    code: FaultCode,
    addr: u64,
) -> StepResult {
    let resume = match layout.on_fault {
        OnFault::Jump { handler } => u64::from(handler),
        OnFault::Skip => pc + 1,
    };
    let c = machine.core_mut(core).expect("exists");
    c.set_register(reg::FAULT_CODE, code as u64);
    c.set_register(reg::FAULT_PC, pc);
    c.set_register(reg::FAULT_ADDR, addr);
    c.pc = resume;
    c.watch_replay = None;
    journal.emit(Source::Guests, "guest_fault", json!({"core": core, "pc": pc, "code": code, "addr": addr, "resume": resume}));
    StepResult::Fault { code, pc }
}
