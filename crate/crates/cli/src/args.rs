//! Command-line surface. Flags are kebab-case and every behavior knob
//! comes from a flag or a config file — there are no environment-variable
//! switches, so identical invocations replay identically.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "provenir",
    version,
    about = "Evidence-gating toolchain: manifests, gate runs, offline receipt \
             verification, revocation mirroring, simulation, and ops reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Shard-manifest lifecycle: build, prove, verify.
    Manifest {
        #[command(subcommand)]
        cmd: ManifestCmd,
    },
    /// Gate runs over hash-pinned fixtures.
    Gate {
        #[command(subcommand)]
        cmd: GateCmd,
    },
    /// Offline receipt verification against a trust store and KRN state.
    Verify(VerifyArgs),
    /// Key-revocation notice operations.
    Krn {
        #[command(subcommand)]
        cmd: KrnCmd,
    },
    /// Monte Carlo error-propagation simulation.
    Simulate(SimulateArgs),
    /// Two-proportion sample-size planning table.
    Power(PowerArgs),
    /// Ops report derived from a gate-run output directory.
    Report(ReportArgs),
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

#[derive(Subcommand, Debug)]
pub enum ManifestCmd {
    /// Build a sealed manifest from a JSONL entry file and a shard spec.
    Build {
        /// JSONL file, one document entry per line.
        #[arg(long)]
        entries: PathBuf,
        /// Shard spec JSON: {"shard_id": ..., "sealed_at_ms": ...}.
        #[arg(long)]
        shard: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prove inclusion (or absence) of one or more document ids.
    Prove {
        #[arg(long)]
        manifest: PathBuf,
        /// Document id; repeat for a batched multiproof.
        #[arg(long = "doc", required = true)]
        docs: Vec<String>,
        /// Output proof envelope (binary).
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a proof envelope against a root.
    Verify {
        #[arg(long)]
        proof: PathBuf,
        /// Expected root as 64 hex chars.
        #[arg(long)]
        root: String,
    },
}

// ---------------------------------------------------------------------------
// gate
// ---------------------------------------------------------------------------

#[derive(Subcommand, Debug)]
pub enum GateCmd {
    /// Run the decision gate over every scripted request in a fixture.
    Run {
        /// Fixture bundle JSON with hash-pinned file references.
        #[arg(long)]
        fixture: PathBuf,
        /// Output directory for traces, receipts, and summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in golden fixture into a directory.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub receipt: PathBuf,
    #[arg(long)]
    pub trust_store: PathBuf,
    /// Local KRN stream (JSONL), if available.
    #[arg(long)]
    pub local_krn: Option<PathBuf>,
    /// Substrate KRN stream (JSONL), if available.
    #[arg(long)]
    pub substrate_krn: Option<PathBuf>,
    /// Mirror state JSON ({"last_sync_ms": ..., "cursor": ...}).
    #[arg(long)]
    pub mirror: PathBuf,
    /// Require this route version in the receipt.
    #[arg(long, requires = "expected_contract_version")]
    pub expected_route_version: Option<String>,
    /// Require this contract version in the receipt.
    #[arg(long, requires = "expected_route_version")]
    pub expected_contract_version: Option<String>,
    /// Verification time; defaults to the receipt's signing time.
    #[arg(long)]
    pub now_ms: Option<u64>,
}

// ---------------------------------------------------------------------------
// krn
// ---------------------------------------------------------------------------

#[derive(Subcommand, Debug)]
pub enum KrnCmd {
    /// Mirror substrate events into the local stream.
    Mirror {
        /// Substrate event feed (JSON array).
        #[arg(long)]
        events: PathBuf,
        /// Local KRN stream (JSONL); created if absent, updated in place.
        #[arg(long)]
        local: PathBuf,
        /// Mirror state JSON; created if absent, updated in place.
        #[arg(long)]
        mirror: PathBuf,
        #[arg(long)]
        now_ms: u64,
    },
    /// Compare channels, backfill substrate-only entries, flag drift.
    Reconcile {
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        substrate: PathBuf,
        /// Optional kid → promotion-digest map (JSON object).
        #[arg(long)]
        promotions: Option<PathBuf>,
        #[arg(long)]
        now_ms: u64,
    },
    /// Report stream and mirror state; optionally check one kid.
    Status {
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        substrate: Option<PathBuf>,
        #[arg(long)]
        mirror: PathBuf,
        #[arg(long)]
        now_ms: u64,
        /// Check this key id with the dual-channel rule.
        #[arg(long, requires = "signed_at_ms")]
        kid: Option<String>,
        /// Signing time to check the kid at.
        #[arg(long, requires = "kid")]
        signed_at_ms: Option<u64>,
    },
}

// ---------------------------------------------------------------------------
// simulate / power / report
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file for the result (canonical JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run the analytic baseline checks; exit 1 if any fails.
    #[arg(long)]
    pub validate_baselines: bool,
}

#[derive(Args, Debug)]
pub struct PowerArgs {
    /// Baseline error rate; repeat for a table.
    #[arg(long = "p0", required = true)]
    pub p0: Vec<f64>,
    /// Relative drop defining the alternative (p1 = p0·(1−rel_drop)).
    #[arg(long)]
    pub rel_drop: f64,
    /// Target power.
    #[arg(long)]
    pub power: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Planning margin applied to the rounded n.
    #[arg(long, default_value_t = 0.10)]
    pub margin: f64,
    /// Output file for the table (canonical JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also bisect simulated power to a minimal n per row.
    #[arg(long)]
    pub overlay: bool,
    /// Simulation draws per overlay power estimate.
    #[arg(long, default_value_t = 20_000)]
    pub n_draws: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Gate-run output directory (traces.jsonl, receipts/, ...).
    #[arg(long)]
    pub run: PathBuf,
    /// Output file for the report (canonical JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}
