//! Command-line entry point wiring the evidence-gating pipeline:
//! manifest lifecycle, gate runs over hash-pinned fixtures, offline
//! receipt verification, revocation mirroring, Monte Carlo simulation,
//! power planning, and ops reports derived from run artifacts.
//!
//! Exit-code contract, stable across commands:
//! - 0 — success / verification pass
//! - 1 — verification or gate failure
//! - 2 — gate-run summary dominated by abstentions
//! - 3 — config error (bad flags, unparseable files, hash mismatches)

use std::io::Write;

use thiserror::Error;

pub mod args;
pub mod fixture;
pub mod gate;
pub mod io;
pub mod krn_cmd;
pub mod manifest_cmd;
pub mod report;
pub mod sim_cmd;
pub mod verify_cmd;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ABSTAIN_DOMINANT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Command-level failure, mapped onto the exit-code contract.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or unparseable input: exit 3.
    #[error("{0}")]
    Config(String),
    /// A verification or processing failure on valid inputs: exit 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Failure(_) => EXIT_FAIL,
        }
    }
}

/// Dispatch a parsed command, writing human-readable output to `out`.
/// Returns the process exit code; errors are printed to stderr.
pub fn run(cli: args::Cli, out: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        args::Command::Manifest { cmd } => match cmd {
            args::ManifestCmd::Build { entries, shard, out: out_path } => {
                manifest_cmd::cmd_build(entries, shard, out_path, out)
            }
            args::ManifestCmd::Prove { manifest, docs, out: out_path } => {
                manifest_cmd::cmd_prove(manifest, docs, out_path, out)
            }
            args::ManifestCmd::Verify { proof, root } => manifest_cmd::cmd_verify(proof, root, out),
        },
        args::Command::Gate { cmd } => match cmd {
            args::GateCmd::Run { fixture, out: out_dir } => gate::cmd_gate_run(fixture, out_dir, out),
            args::GateCmd::Init { out: out_dir } => gate::cmd_gate_init(out_dir, out),
        },
        args::Command::Verify(verify_args) => verify_cmd::cmd_verify(verify_args, out),
        args::Command::Krn { cmd } => match cmd {
            args::KrnCmd::Mirror { events, local, mirror, now_ms } => {
                krn_cmd::cmd_mirror(events, local, mirror, *now_ms, out)
            }
            args::KrnCmd::Reconcile { local, substrate, promotions, now_ms } => {
                krn_cmd::cmd_reconcile(local, substrate, promotions.as_deref(), *now_ms, out)
            }
            args::KrnCmd::Status { local, substrate, mirror, now_ms, kid, signed_at_ms } => {
                krn_cmd::cmd_status(
                    local,
                    substrate.as_deref(),
                    mirror,
                    *now_ms,
                    kid.as_deref(),
                    *signed_at_ms,
                    out,
                )
            }
        },
        args::Command::Simulate(sim_args) => sim_cmd::cmd_simulate(sim_args, out),
        args::Command::Power(power_args) => sim_cmd::cmd_power(power_args, out),
        args::Command::Report(report_args) => {
            report::cmd_report(&report_args.run, report_args.out.as_deref(), out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
