use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::event::{Journal, Source};
use crate::guests::{self, GuestProgram, Layout, ProgramError};
use crate::ids::{ModelId, Tick};
use crate::isolation::IsolationLevel;
use crate::machine::{ControlCommand, Machine, MachineError, Measurement, MODEL_DRAM};
use crate::ports::{PortBroker, PortCapability, PortError};

/// The console's comparison of reported and expected measurements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationRecord {
    pub tick: Tick,
    pub expected: Measurement,
    pub reported: Measurement,
    pub matched: bool,
}

pub fn attest(expected: &Measurement, reported: Measurement, tick: Tick) -> AttestationRecord {
    let matched = *expected == reported;
    AttestationRecord { tick, expected: expected.clone(), reported, matched }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error("attestation_mismatch: reported measurements differ from the expected ones")]
    AttestationMismatch,
    #[error("model_already_loaded")]
    ModelAlreadyLoaded,
    #[error("isolation_forbids: cannot load at {0}")]
    IsolationForbids(IsolationLevel),
    #[error("bad program: {0}")]
    Program(#[from] ProgramError),
    #[error("machine: {0}")]
    Machine(#[from] MachineError),
    #[error("port grant failed: {0}")]
    Port(#[from] PortError),
}

impl LoadError {
    pub fn code(&self) -> &'static str {
        match self {
            LoadError::AttestationMismatch => "attestation_mismatch",
            LoadError::ModelAlreadyLoaded => "model_already_loaded",
            LoadError::IsolationForbids(_) => "isolation_forbids",
            LoadError::Program(_) => "bad_program",
            LoadError::Machine(_) => "machine_error",
            LoadError::Port(_) => "port_error",
        }
    }
}

/// A model that passed attestation and is running.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadedModel {
    pub model: ModelId,
    pub program: String,
    pub layout: Layout,
    pub ports: Vec<PortCapability>,
    pub attestation: AttestationRecord,
}

/// State the loader acts on.
pub struct LoadCtx<'a> {
    pub machine: &'a mut Machine,
    pub journal: &'a mut Journal,
    pub broker: &'a mut PortBroker,
    pub level: IsolationLevel,
}

/// Attests the platform, then installs `program`, grants its ports and
/// starts the model cores. Nothing of the model runs before a match.
pub fn load_model(
    ctx: &mut LoadCtx<'_>,
    program: &GuestProgram,
    expected: &Measurement,
    model: ModelId,
    already_loaded: bool,
) -> Result<LoadedModel, LoadError> {
    let result = try_load(ctx, program, expected, model, already_loaded);
    if let Err(e) = &result {
        ctx.journal.emit(Source::Console, "load_refused", json!({"program": program.name, "error": e.code(), "message": e.to_string()}));
    }
    result
}

fn try_load(
    ctx: &mut LoadCtx<'_>,
    program: &GuestProgram,
    expected: &Measurement,
    model: ModelId,
    already_loaded: bool,
) -> Result<LoadedModel, LoadError> {
    if already_loaded {
        return Err(LoadError::ModelAlreadyLoaded);
    }
    if ctx.level != IsolationLevel::Standard {
        return Err(LoadError::IsolationForbids(ctx.level));
    }
    let record = attest(expected, ctx.machine.measure(), ctx.journal.now());
    ctx.journal.emit(Source::Console, "attestation", &record);
    if !record.matched {
        return Err(LoadError::AttestationMismatch);
    }
    let image = program.image(ctx.machine.region_size(MODEL_DRAM))?;
    let issuer = *ctx.machine.topology().hypervisor_cores().first().expect("a booted machine has a hypervisor core");
    guests::install(ctx.machine, ctx.journal, issuer, &image)?;
    let mut ports = Vec::new();
    for class in &program.ports {
        ports.push(ctx.broker.grant_port(ctx.machine, ctx.journal, model, *class, 0, ctx.level)?);
    }
    let cores = ctx.machine.topology().model_cores().to_vec();
    for core in &cores {
        ctx.machine.control_bus(ctx.journal, issuer, *core, &ControlCommand::Resume)?;
    }
    ctx.journal.emit(
        Source::Console,
        "model_started",
        json!({"model": model, "program": program.name, "cores": cores, "ports": ports.len()}),
    );
    Ok(LoadedModel { model, program: program.name.clone(), layout: image.layout, ports, attestation: record })
}
