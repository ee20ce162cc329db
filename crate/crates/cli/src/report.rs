//! Ops report over a gate-run output directory.
//!
//! Everything in the report is recomputed from the persisted traces and
//! receipts — nothing is carried over from the run that produced them —
//! so the same artifacts always yield the same report. Latency figures
//! come from the scripted clock and are labeled accordingly; they are
//! engineering guidance, not hardware measurements.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use provenir_core::engine::DecisionTrace;
use provenir_core::keys::TrustStore;
use provenir_core::krn::{KrnStream, MirrorState};
use provenir_core::receipt::{verify_receipt, AnswerReceipt, VerifyContext};

use crate::io;
use crate::{CliError, EXIT_OK};

// ---------------------------------------------------------------------------
// Report shape
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBins {
    pub p50_ms: u64,
    pub p90_ms: u64,
    pub p95_ms: u64,
    pub p99_ms: u64,
    pub samples: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeavyShare {
    pub heavy: u64,
    pub total: u64,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentInterval {
    pub ticket: String,
    pub decisions: u64,
    pub first_request_id: String,
    pub last_request_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub start_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub end_ms: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationRate {
    pub checked: u64,
    pub passed: u64,
    pub pass_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProofSizeStats {
    pub p50_bytes: u64,
    pub p90_bytes: u64,
    pub max_bytes: u64,
    pub samples: u64,
    pub timeout_rate: f64,
}

/// The derived ops report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpsReport {
    /// Latency provenance: always "simulated-clock" for fixture runs.
    pub clock_label: String,
    pub requests: u64,
    pub stage_latency_ms: BTreeMap<String, LatencyBins>,
    pub heavy_share: HeavyShare,
    pub incident_intervals: Vec<IncidentInterval>,
    pub return_states: BTreeMap<String, u64>,
    pub abstain_reasons: BTreeMap<String, u64>,
    pub receipt_verification: VerificationRate,
    pub proof_sizes: ProofSizeStats,
}

fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = ((p / 100.0 * sorted.len() as f64).ceil() as usize).max(1) - 1;
    sorted[idx.min(sorted.len() - 1)]
}

// ---------------------------------------------------------------------------
// Command
// ---------------------------------------------------------------------------

pub fn cmd_report(run_dir: &Path, out_path: Option<&Path>, out: &mut dyn Write) -> Result<i32, CliError> {
    let traces: Vec<DecisionTrace> = io::read_jsonl(&run_dir.join("traces.jsonl"))?;
    if traces.is_empty() {
        return Err(CliError::Config(format!(
            "no traces found under {}",
            run_dir.display()
        )));
    }

    // --- receipts, keyed by request id (the file name).
    let mut receipts: BTreeMap<String, AnswerReceipt> = BTreeMap::new();
    let receipts_dir = run_dir.join("receipts");
    if receipts_dir.is_dir() {
        let mut paths: Vec<_> = std::fs::read_dir(&receipts_dir)
            .map_err(|e| CliError::Config(format!("cannot list {}: {e}", receipts_dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let request_id =
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            receipts.insert(request_id, io::read_json(&path)?);
        }
    }

    let mut report = OpsReport { clock_label: "simulated-clock".to_string(), ..Default::default() };
    report.requests = traces.len() as u64;

    // --- stage latency histograms.
    let mut per_stage: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for trace in &traces {
        for timing in &trace.stage_timings {
            per_stage.entry(timing.stage.clone()).or_default().push(timing.elapsed_ms);
        }
    }
    for (stage, mut samples) in per_stage {
        samples.sort_unstable();
        report.stage_latency_ms.insert(
            stage,
            LatencyBins {
                p50_ms: nearest_rank(&samples, 50.0),
                p90_ms: nearest_rank(&samples, 90.0),
                p95_ms: nearest_rank(&samples, 95.0),
                p99_ms: nearest_rank(&samples, 99.0),
                samples: samples.len() as u64,
            },
        );
    }

    // --- heavy share: heavy decisions over total decisions.
    let heavy = traces.iter().filter(|t| t.heavy_calls > 0).count() as u64;
    report.heavy_share = HeavyShare {
        heavy,
        total: report.requests,
        share: heavy as f64 / report.requests as f64,
    };

    // --- return states and abstentions.
    for trace in &traces {
        *report.return_states.entry(trace.return_state.to_string()).or_insert(0) += 1;
        if let Some(reason) = &trace.abstain_reason {
            *report.abstain_reasons.entry(reason.clone()).or_insert(0) += 1;
        }
    }

    // --- incident intervals, bounded by receipt signing times.
    let mut intervals: BTreeMap<String, IncidentInterval> = BTreeMap::new();
    for trace in &traces {
        let Some(ticket) = &trace.incident_ticket else { continue };
        let signed_at = receipts.get(&trace.request_id).map(|r| r.signed_at_ms);
        let interval = intervals.entry(ticket.clone()).or_insert_with(|| IncidentInterval {
            ticket: ticket.clone(),
            decisions: 0,
            first_request_id: trace.request_id.clone(),
            last_request_id: trace.request_id.clone(),
            start_ms: signed_at,
            end_ms: signed_at,
        });
        interval.decisions += 1;
        interval.last_request_id = trace.request_id.clone();
        if let Some(at) = signed_at {
            interval.start_ms = Some(interval.start_ms.map_or(at, |s| s.min(at)));
            interval.end_ms = Some(interval.end_ms.map_or(at, |e| e.max(at)));
        }
    }
    report.incident_intervals = intervals.into_values().collect();

    // --- offline re-verification of every receipt.
    let trust: Option<TrustStore> = {
        let path = run_dir.join("trust_store.json");
        if path.exists() { Some(io::read_json(&path)?) } else { None }
    };
    let mirror: MirrorState = {
        let path = run_dir.join("mirror.json");
        if path.exists() {
            io::read_json(&path)?
        } else {
            MirrorState { last_sync_ms: 0, cursor: 0 }
        }
    };
    let load_stream = |name: &str| -> Result<Option<KrnStream>, CliError> {
        let path = run_dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let text = io::read_string(&path)?;
        KrnStream::from_jsonl(&text)
            .map(Some)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
    };
    let local_krn = load_stream("krn_local.jsonl")?;
    let substrate_krn = load_stream("krn_substrate.jsonl")?;
    if let Some(trust) = &trust {
        for receipt in receipts.values() {
            let ctx = VerifyContext {
                trust,
                local_krn: local_krn.as_ref(),
                substrate_krn: substrate_krn.as_ref(),
                mirror: &mirror,
                expected_policy: None,
                now_ms: mirror.last_sync_ms.max(receipt.signed_at_ms),
            };
            report.receipt_verification.checked += 1;
            if verify_receipt(receipt, &ctx).pass {
                report.receipt_verification.passed += 1;
            }
        }
        if report.receipt_verification.checked > 0 {
            report.receipt_verification.pass_rate = report.receipt_verification.passed as f64
                / report.receipt_verification.checked as f64;
        }
    }

    // --- proof size distribution and timeout rate.
    let mut sizes: Vec<u64> = Vec::new();
    let mut timeouts = 0u64;
    for receipt in receipts.values() {
        sizes.push(receipt.proof_size_bytes);
        if receipt.proof_timed_out {
            timeouts += 1;
        }
    }
    sizes.sort_unstable();
    report.proof_sizes = ProofSizeStats {
        p50_bytes: nearest_rank(&sizes, 50.0),
        p90_bytes: nearest_rank(&sizes, 90.0),
        max_bytes: sizes.last().copied().unwrap_or(0),
        samples: sizes.len() as u64,
        timeout_rate: if receipts.is_empty() {
            0.0
        } else {
            timeouts as f64 / receipts.len() as f64
        },
    };

    // --- render.
    writeln!(out, "requests {}", report.requests).ok();
    writeln!(
        out,
        "heavy_share {}/{} = {:.4}",
        report.heavy_share.heavy, report.heavy_share.total, report.heavy_share.share
    )
    .ok();
    for interval in &report.incident_intervals {
        writeln!(
            out,
            "incident {} decisions {} [{} .. {}]",
            interval.ticket,
            interval.decisions,
            interval.start_ms.map(|v| v.to_string()).unwrap_or_else(|| "?".to_string()),
            interval.end_ms.map(|v| v.to_string()).unwrap_or_else(|| "?".to_string()),
        )
        .ok();
    }
    for (state, count) in &report.return_states {
        writeln!(out, "state {state} {count}").ok();
    }
    for (reason, count) in &report.abstain_reasons {
        writeln!(out, "abstain {reason} {count}").ok();
    }
    writeln!(
        out,
        "receipts verified {}/{}",
        report.receipt_verification.passed, report.receipt_verification.checked
    )
    .ok();
    if let Some(path) = out_path {
        io::write_canonical_json(path, &report)?;
    }
    Ok(EXIT_OK)
}
