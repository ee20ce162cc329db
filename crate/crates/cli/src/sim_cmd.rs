//! Simulation and power-planning commands. Both are pure functions of
//! their config files and flags; outputs are canonical JSON.

use std::io::Write;

use serde::{Deserialize, Serialize};

use provenir_core::sim::{
    power_overlay, simulate, validate_baselines, BaselineReport, CascadeRule, DependenceModel,
    PowerRow, SimConfig, SimError, SimResult,
};
use provenir_core::stats::sample_size_two_proportions;

use crate::args::{PowerArgs, SimulateArgs};
use crate::io;
use crate::{CliError, EXIT_FAIL, EXIT_OK};

fn config_error(e: SimError) -> CliError {
    CliError::Config(e.to_string())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Output artifact: the result, plus the baseline report when requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateArtifact {
    pub result: SimResult,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baselines: Option<BaselineReport>,
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let config: SimConfig = io::read_json(&args.config)?;
    let result = simulate(&config).map_err(config_error)?;
    let baselines = if args.validate_baselines {
        Some(validate_baselines(&config).map_err(config_error)?)
    } else {
        None
    };
    writeln!(
        out,
        "claim_error {:.6} (se {:.6}) answer_error {:.6} fwer {:.6} fdr {:.6}",
        result.claim_error.value,
        result.claim_error.se,
        result.answer_error.value,
        result.fwer_post_holm.value,
        result.fdr_post_by.value
    )
    .ok();
    let baselines_pass = baselines.as_ref().map(|b| b.all_pass);
    if let Some(report) = &baselines {
        for entry in &report.entries {
            writeln!(
                out,
                "baseline {} {} (simulated {:.6}, oracle {:.6})",
                entry.label,
                if entry.pass { "pass" } else { "fail" },
                entry.simulated,
                entry.oracle
            )
            .ok();
        }
    }
    let artifact = SimulateArtifact { result, baselines };
    if let Some(path) = &args.out {
        io::write_canonical_json(path, &artifact)?;
    }
    Ok(match baselines_pass {
        Some(false) => EXIT_FAIL,
        _ => EXIT_OK,
    })
}

// ---------------------------------------------------------------------------
// power
// ---------------------------------------------------------------------------

/// One n-per-arm table row; the overlay column is present when simulated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTableRow {
    pub p0: f64,
    pub p1: f64,
    pub n_per_arm: u64,
    pub n_with_margin: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlay: Option<PowerRow>,
}

pub fn cmd_power(args: &PowerArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut rows = Vec::with_capacity(args.p0.len());
    for &p0 in &args.p0 {
        let plan = sample_size_two_proportions(p0, args.rel_drop, args.alpha, args.power, args.margin)
            .map_err(|e| CliError::Config(e.to_string()))?;
        rows.push(PowerTableRow {
            p0,
            p1: plan.p1,
            n_per_arm: plan.n_per_arm,
            n_with_margin: plan.n_with_margin,
            overlay: None,
        });
    }
    if args.overlay {
        let config = SimConfig {
            pair_fp: 0.05,
            pair_fn: 0.0,
            n_f: 5,
            n_c: 1,
            cascade_rule: CascadeRule::AnyRawFp,
            dependence: DependenceModel::Independent,
            n_draws: args.n_draws,
            seed: args.seed,
            alpha: args.alpha,
            q: 0.10,
        };
        let overlay =
            power_overlay(&config, &args.p0, args.rel_drop, args.power).map_err(config_error)?;
        for (row, sim) in rows.iter_mut().zip(overlay) {
            row.overlay = Some(sim);
        }
    }
    for row in &rows {
        let overlay = row
            .overlay
            .as_ref()
            .map(|o| format!(" n_simulated={} rel_gap={:.4}", o.n_simulated, o.rel_gap))
            .unwrap_or_default();
        writeln!(
            out,
            "p0={:.4} p1={:.4} n_per_arm={} n_with_margin={}{overlay}",
            row.p0, row.p1, row.n_per_arm, row.n_with_margin
        )
        .ok();
    }
    if let Some(path) = &args.out {
        io::write_canonical_json(path, &rows)?;
    }
    Ok(EXIT_OK)
}
