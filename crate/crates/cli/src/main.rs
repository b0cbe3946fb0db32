//! `guillotine-sim`: run scenarios, serve interactive sessions, and replay
//! event logs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use guillotine::event::parse_jsonl;
use guillotine::guests::{workload, WORKLOAD_NAMES};
use guillotine::simrun::{self, Deployment, RunReport, Scenario, ServeOptions, Server};

#[derive(Parser)]
#[command(name = "guillotine-sim", version, about = "Deterministic hypervisor containment simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario to completion and check its assertions.
    Run(RunArgs),
    /// Host an interactive session over line-delimited JSON.
    Serve(ServeArgs),
    /// Re-execute a recorded event log.
    Replay(ReplayArgs),
    /// List the built-in adversarial workloads.
    Workloads,
}

#[derive(Args)]
struct Source {
    /// Scenario file (JSON).
    #[arg(long, conflicts_with = "workload", required_unless_present = "workload")]
    scenario: Option<PathBuf>,
    /// Run a library workload with default settings instead of a file.
    #[arg(long)]
    workload: Option<String>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<Scenario> {
        match (&self.scenario, &self.workload) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(Scenario::from_json(&text)?)
            }
            (None, Some(name)) => {
                if workload(name).is_none() {
                    bail!("no workload {name:?}; known: {}", WORKLOAD_NAMES.join(", "));
                }
                Ok(Scenario::for_workload(name, self.seed.unwrap_or(1)))
            }
            (None, None) => bail!("either --scenario or --workload is required"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Overrides the scenario's run length.
    #[arg(long)]
    ticks: Option<u64>,
    /// Event log output (JSON Lines).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Audit log output (JSON Lines).
    #[arg(long)]
    audit_log: Option<PathBuf>,
    /// Isolation transition log output (JSON Lines).
    #[arg(long)]
    transition_log: Option<PathBuf>,
    /// Network session log output (JSON Lines).
    #[arg(long)]
    session_log: Option<PathBuf>,
    /// Run report output (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print only the final verdict line.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    source: Source,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Event log written when the run finishes.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start running immediately instead of paused.
    #[arg(long)]
    run: bool,
    /// Pace while running.
    #[arg(long)]
    ticks_per_second: Option<f64>,
    /// Ticks between summary messages.
    #[arg(long, default_value_t = 100)]
    summary_every: u64,
}

#[derive(Args)]
struct ReplayArgs {
    /// Event log to replay (JSON Lines).
    #[arg(long)]
    log: PathBuf,
    /// Require the replay to reproduce the log exactly.
    #[arg(long)]
    verify: bool,
}

fn write(path: &Option<PathBuf>, contents: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, contents).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn print_report(report: &RunReport, quiet: bool) {
    if !quiet {
        for a in &report.assertions {
            println!("{} {:28} {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
        }
        let c = &report.counts;
        println!(
            "ticks {} | level {} | events {} | faults {} | audits {} | transitions {} | digest {}",
            report.ticks, report.final_level, c.events, c.faults, c.audit_records, c.transitions, report.log_digest
        );
    }
    println!("{}: {}", if report.passed { "PASSED" } else { "FAILED" }, report.name);
}

fn run(args: RunArgs) -> Result<bool> {
    let scenario = args.source.load()?;
    let r = simrun::run(&scenario, args.source.seed, args.ticks)?;
    let d: &Deployment = &r.deployment;
    write(&args.log, &d.journal().to_jsonl())?;
    write(&args.audit_log, &d.broker().audit().to_jsonl())?;
    write(&args.transition_log, &d.isolation().transition_log_jsonl())?;
    write(&args.session_log, &d.net().session_log_jsonl())?;
    write(&args.report, &serde_json::to_string_pretty(&r.report)?)?;
    print_report(&r.report, args.quiet);
    Ok(r.report.passed)
}

fn serve(args: ServeArgs) -> Result<bool> {
    let scenario = args.source.load()?;
    let seed = args.source.seed.unwrap_or(scenario.seed);
    let deployment = Deployment::new(&scenario, seed)?;
    let opts = ServeOptions {
        start_running: args.run,
        ticks_per_second: args.ticks_per_second,
        summary_every: args.summary_every,
        log_path: args.log,
    };
    let server = Server::bind(&args.listen, deployment, opts)?;
    eprintln!("listening on {}", server.local_addr()?);
    let d = server.run()?;
    let report = RunReport::evaluate(&d);
    print_report(&report, false);
    Ok(report.passed)
}

fn replay(args: ReplayArgs) -> Result<bool> {
    let text = read(&args.log)?;
    let records = parse_jsonl(&text).with_context(|| format!("parsing {}", args.log.display()))?;
    let (d, outcome) = simrun::replay(&records)?;
    println!(
        "replayed {} records ({} original): {}",
        outcome.replay_len,
        outcome.original_len,
        if outcome.matched { "identical" } else { "DIVERGED" }
    );
    if let Some(seq) = outcome.first_divergence {
        println!("first divergence at seq {seq}");
    }
    println!("original digest {}\nreplay digest   {}", outcome.original_digest, outcome.replay_digest);
    let report = RunReport::evaluate(&d);
    print_report(&report, true);
    Ok(if args.verify { outcome.matched } else { report.passed })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(a) => run(a),
        Cmd::Serve(a) => serve(a),
        Cmd::Replay(a) => replay(a),
        Cmd::Workloads => {
            for name in WORKLOAD_NAMES {
                let w = workload(name).expect("listed workloads exist");
                println!("{name:22} {}", w.program.expected_outcome);
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
