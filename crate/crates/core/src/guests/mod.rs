//! The guest instruction set and the programs that run on model cores.
//!
//! Eleven operations, each encoded in one 16-byte word. None of them names
//! a device, a hypervisor register or a hypervisor region: a guest can put
//! any region number in a `LOAD`, but only the bus decides what answers.
//! Faults stay inside the guest. They set the fault registers and transfer
//! control to the program's own handler; the hypervisor only sees the
//! observation the hardware emits.

mod interp;
mod library;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use interp::{single_step, step, BrokerIo, FaultCode, GuestIo, StepResult};
pub use library::{workload, workload_library, Expectation, Workload, FLOOD_IRQS, WORKLOAD_NAMES};

use crate::digest::sha256_hex;
use crate::event::{Journal, Source};
use crate::ids::CoreId;
use crate::machine::{ControlCommand, ExecRegion, Machine, MachineError, PagePerms, INSTR_SIZE, MODEL_DRAM, PAGE_SIZE};
use crate::ports::{encode_frame, DeviceClass};

/// One guest instruction. Region operands are raw region numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum GuestInstr {
    /// `acc = mem[region][addr]`.
    Load {
        region: u32,
        addr: u64,
    },
    Store {
        region: u32,
        addr: u64,
        val: u8,
    },
    /// Sends payload number `payload` of the program's data table through
    /// capability slot `slot`. `acc` gets 0 or a port error code.
    PortWrite {
        slot: u32,
        payload: u32,
    },
    MapPage {
        page: u64,
        perms: PagePerms,
    },
    /// Stores `val` at byte `addr` of the program's own code.
    WriteCode {
        addr: u64,
        val: u8,
    },
    /// Plants `val` in the core's microarchitectural scratch state.
    CovertSet {
        val: u64,
    },
    /// `acc = scratch`.
    CovertGet,
    RaiseIrq,
    /// Occupies the core for `n` ticks in total.
    Spin {
        n: u32,
    },
    Jump {
        target: u32,
    },
    Halt,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unknown opcode {0:#04x}")]
    Opcode(u8),
    #[error("nonzero reserved bits")]
    Reserved,
}

impl GuestInstr {
    pub fn name(&self) -> &'static str {
        match self {
            GuestInstr::Load { .. } => "LOAD",
            GuestInstr::Store { .. } => "STORE",
            GuestInstr::PortWrite { .. } => "PORT_WRITE",
            GuestInstr::MapPage { .. } => "MAP_PAGE",
            GuestInstr::WriteCode { .. } => "WRITE_CODE",
            GuestInstr::CovertSet { .. } => "COVERT_SET",
            GuestInstr::CovertGet => "COVERT_GET",
            GuestInstr::RaiseIrq => "RAISE_IRQ",
            GuestInstr::Spin { .. } => "SPIN",
            GuestInstr::Jump { .. } => "JUMP",
            GuestInstr::Halt => "HALT",
        }
    }

    /// Layout: `[op][b][0][0][a: u32 LE][c: u64 LE]`. Opcodes start at 1 so
    /// zeroed memory never decodes.
    pub fn encode(&self) -> [u8; INSTR_SIZE as usize] {
        let (op, b, a, c): (u8, u8, u32, u64) = match *self {
            GuestInstr::Load { region, addr } => (1, 0, region, addr),
            GuestInstr::Store { region, addr, val } => (2, val, region, addr),
            GuestInstr::PortWrite { slot, payload } => (3, 0, slot, u64::from(payload)),
            GuestInstr::MapPage { page, perms } => (4, perms.bits(), 0, page),
            GuestInstr::WriteCode { addr, val } => (5, val, 0, addr),
            GuestInstr::CovertSet { val } => (6, 0, 0, val),
            GuestInstr::CovertGet => (7, 0, 0, 0),
            GuestInstr::RaiseIrq => (8, 0, 0, 0),
            GuestInstr::Spin { n } => (9, 0, n, 0),
            GuestInstr::Jump { target } => (10, 0, target, 0),
            GuestInstr::Halt => (11, 0, 0, 0),
        };
        let mut w = [0u8; INSTR_SIZE as usize];
        w[0] = op;
        w[1] = b;
        w[4..8].copy_from_slice(&a.to_le_bytes());
        w[8..16].copy_from_slice(&c.to_le_bytes());
        w
    }

    /// Inverse of [`GuestInstr::encode`]; operand bits an op does not use
    /// must be zero, so every word has at most one meaning.
    pub fn decode(w: &[u8; INSTR_SIZE as usize]) -> Result<Self, DecodeError> {
        let b = w[1];
        let a = u32::from_le_bytes(w[4..8].try_into().expect("4 bytes"));
        let c = u64::from_le_bytes(w[8..16].try_into().expect("8 bytes"));
        if w[2] != 0 || w[3] != 0 {
            return Err(DecodeError::Reserved);
        }
        let need = |ok: bool, instr: GuestInstr| if ok { Ok(instr) } else { Err(DecodeError::Reserved) };
        match w[0] {
            1 => need(b == 0, GuestInstr::Load { region: a, addr: c }),
            2 => Ok(GuestInstr::Store { region: a, addr: c, val: b }),
            3 => need(b == 0 && c <= u64::from(u32::MAX), GuestInstr::PortWrite { slot: a, payload: c as u32 }),
            4 => need(a == 0 && b < 8, GuestInstr::MapPage { page: c, perms: PagePerms::from_bits(b) }),
            5 => need(a == 0, GuestInstr::WriteCode { addr: c, val: b }),
            6 => need(a == 0 && b == 0, GuestInstr::CovertSet { val: c }),
            7 => need(a == 0 && b == 0 && c == 0, GuestInstr::CovertGet),
            8 => need(a == 0 && b == 0 && c == 0, GuestInstr::RaiseIrq),
            9 => need(b == 0 && c == 0, GuestInstr::Spin { n: a }),
            10 => need(b == 0 && c == 0, GuestInstr::Jump { target: a }),
            11 => need(a == 0 && b == 0 && c == 0, GuestInstr::Halt),
            op => Err(DecodeError::Opcode(op)),
        }
    }
}

/// Bytes a program can send through a port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Text(String),
    /// A network device frame addressed to `host`.
    Frame {
        host: String,
        data: String,
    },
    Hex {
        hex: String,
    },
}

impl Payload {
    pub fn bytes(&self) -> Result<Vec<u8>, ProgramError> {
        match self {
            Payload::Text(s) => Ok(s.as_bytes().to_vec()),
            Payload::Frame { host, data } => {
                if host.len() > usize::from(u8::MAX) {
                    return Err(ProgramError::BadPayload(format!("host name {host:?} too long")));
                }
                Ok(encode_frame(host, data.as_bytes()))
            }
            Payload::Hex { hex } => hex::decode(hex).map_err(|e| ProgramError::BadPayload(e.to_string())),
        }
    }
}

/// What the guest does when one of its instructions faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OnFault {
    /// Transfer to instruction `handler`.
    Jump { handler: u32 },
    /// A handler that records the fault and returns past the faulting
    /// instruction.
    Skip,
}

impl Default for OnFault {
    fn default() -> Self {
        OnFault::Jump { handler: 0 }
    }
}

/// A guest program bundle as loaded by the console.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestProgram {
    pub name: String,
    pub instructions: Vec<GuestInstr>,
    /// Defaults to the smallest page-aligned region at address 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_region: Option<ExecRegion>,
    #[serde(default)]
    pub entry_point: u32,
    #[serde(default)]
    pub on_fault: OnFault,
    /// Data table for `PORT_WRITE`.
    #[serde(default)]
    pub payloads: Vec<Payload>,
    /// Ports the program expects in capability slots 0, 1, ...
    #[serde(default)]
    pub ports: Vec<DeviceClass>,
    #[serde(default)]
    pub expected_outcome: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("program has no instructions")]
    Empty,
    #[error("{what} index {index} is outside the {len} instructions")]
    IndexOutOfRange { what: &'static str, index: u32, len: usize },
    #[error("payload ref {index} is outside the {len} payloads")]
    PayloadOutOfRange { index: u32, len: usize },
    #[error("exec region [{base:#x}, {bound:#x}) must be page aligned and hold {need} bytes")]
    BadExecRegion { base: u64, bound: u64, need: u64 },
    #[error("program needs {need} bytes of model memory, {have} available")]
    DoesNotFit { need: u64, have: u64 },
    #[error("bad payload: {0}")]
    BadPayload(String),
}

/// Where a program lives in model DRAM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub exec: ExecRegion,
    pub entry: u64,
    pub on_fault: OnFault,
    /// First byte after the exec region; the data table starts here.
    pub data_base: u64,
    /// Address of each payload record: a 2-byte length, then the bytes.
    pub payload_addrs: Vec<u64>,
}

impl Layout {
    pub fn code_base(&self) -> u64 {
        self.exec.base
    }
}

/// A program plus its placement, ready for the loader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub layout: Layout,
    /// Encoded instructions, padded with `HALT` to the end of the region.
    pub code: Vec<u8>,
    pub data: Vec<u8>,
}

impl GuestProgram {
    pub fn new(name: &str, instructions: Vec<GuestInstr>) -> Self {
        Self {
            name: name.to_owned(),
            instructions,
            exec_region: None,
            entry_point: 0,
            on_fault: OnFault::default(),
            payloads: Vec::new(),
            ports: Vec::new(),
            expected_outcome: String::new(),
        }
    }

    /// Checks every internal reference and places the program in a model
    /// memory of `memory_size` bytes.
    pub fn image(&self, memory_size: u64) -> Result<Image, ProgramError> {
        let len = self.instructions.len();
        if len == 0 {
            return Err(ProgramError::Empty);
        }
        let index = |what, index: u32| {
            if (index as usize) < len {
                Ok(())
            } else {
                Err(ProgramError::IndexOutOfRange { what, index, len })
            }
        };
        index("entry", self.entry_point)?;
        if let OnFault::Jump { handler } = self.on_fault {
            index("fault handler", handler)?;
        }
        for instr in &self.instructions {
            match *instr {
                GuestInstr::Jump { target } => index("jump target", target)?,
                GuestInstr::PortWrite { payload, .. } if payload as usize >= self.payloads.len() => {
                    return Err(ProgramError::PayloadOutOfRange { index: payload, len: self.payloads.len() });
                }
                _ => {}
            }
        }
        let code_len = len as u64 * INSTR_SIZE;
        let exec = self.exec_region.unwrap_or(ExecRegion { base: 0, bound: code_len.div_ceil(PAGE_SIZE) * PAGE_SIZE });
        if !exec.base.is_multiple_of(PAGE_SIZE) || !exec.bound.is_multiple_of(PAGE_SIZE) || exec.bound < exec.base + code_len {
            return Err(ProgramError::BadExecRegion { base: exec.base, bound: exec.bound, need: code_len });
        }
        let mut code = Vec::with_capacity((exec.bound - exec.base) as usize);
        for instr in &self.instructions {
            code.extend_from_slice(&instr.encode());
        }
        while (code.len() as u64) < exec.bound - exec.base {
            code.extend_from_slice(&GuestInstr::Halt.encode());
        }
        let data_base = exec.bound;
        let mut data = Vec::new();
        let mut payload_addrs = Vec::new();
        for p in &self.payloads {
            let bytes = p.bytes()?;
            let n = u16::try_from(bytes.len())
                .map_err(|_| ProgramError::BadPayload(format!("{} bytes exceeds a 2-byte length", bytes.len())))?;
            payload_addrs.push(data_base + data.len() as u64);
            data.extend_from_slice(&n.to_le_bytes());
            data.extend_from_slice(&bytes);
        }
        let need = data_base + data.len() as u64;
        if need > memory_size {
            return Err(ProgramError::DoesNotFit { need, have: memory_size });
        }
        let layout = Layout { exec, entry: u64::from(self.entry_point), on_fault: self.on_fault, data_base, payload_addrs };
        Ok(Image { layout, code, data })
    }
}

/// Loader half of a model load: writes the image into model DRAM, maps the
/// exec region execute-only and everything else read-write, declares the
/// exec region and locks every model core's MMU before any core starts.
pub(crate) fn install(machine: &mut Machine, journal: &mut Journal, issuer: CoreId, image: &Image) -> Result<(), MachineError> {
    let layout = &image.layout;
    let exec = layout.exec;
    machine.install_model_bytes(exec.base, &image.code)?;
    machine.install_model_bytes(layout.data_base, &image.data)?;
    let pages = machine.region_size(MODEL_DRAM) / PAGE_SIZE;
    let handler = match layout.on_fault {
        OnFault::Jump { handler } => u64::from(handler),
        OnFault::Skip => layout.entry,
    };
    for core in machine.topology().model_cores().to_vec() {
        machine.set_guest_layout(core, exec.base, layout.entry, handler);
        let (lo, hi) = (exec.base / PAGE_SIZE, exec.bound / PAGE_SIZE);
        if lo > 0 {
            machine.configure_mmu_range(journal, core, 0..lo, PagePerms::RW)?;
        }
        machine.configure_mmu_range(journal, core, lo..hi, PagePerms::X)?;
        if hi < pages {
            machine.configure_mmu_range(journal, core, hi..pages, PagePerms::RW)?;
        }
        machine.declare_exec_region(journal, core, exec)?;
        machine.control_bus(journal, issuer, core, &ControlCommand::LockMmu)?;
    }
    journal.emit(
        Source::Guests,
        "image_installed",
        json!({
            "exec": exec,
            "entry": layout.entry,
            "code_digest": sha256_hex(&image.code),
            "data_base": layout.data_base,
            "data_digest": sha256_hex(&image.data),
        }),
    );
    Ok(())
}

#[cfg(test)]
mod tests;
