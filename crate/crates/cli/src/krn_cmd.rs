//! Key-revocation notice operations: mirror the substrate feed into the
//! local stream, reconcile the two channels, and report stream/mirror
//! health (optionally checking one key id under the dual-channel rule).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use provenir_core::clock::ScriptedClock;
use provenir_core::hash::Digest;
use provenir_core::krn::{
    check_dual, mirror_sync, reconcile, KrnStream, MirrorState, SubstrateEvent,
    VerificationStatus,
};

use crate::io;
use crate::{CliError, EXIT_FAIL, EXIT_OK};

fn load_stream_or_empty(path: &Path) -> Result<KrnStream, CliError> {
    if !path.exists() {
        return Ok(KrnStream::new());
    }
    let text = io::read_string(path)?;
    KrnStream::from_jsonl(&text)
        .map_err(|e| CliError::Config(format!("cannot parse KRN stream {}: {e}", path.display())))
}

fn load_stream(path: &Path) -> Result<KrnStream, CliError> {
    let text = io::read_string(path)?;
    KrnStream::from_jsonl(&text)
        .map_err(|e| CliError::Config(format!("cannot parse KRN stream {}: {e}", path.display())))
}

fn store_stream(path: &Path, stream: &KrnStream) -> Result<(), CliError> {
    let text = stream
        .to_jsonl()
        .map_err(|e| CliError::Failure(format!("cannot serialize KRN stream: {e}")))?;
    io::atomic_write(path, text.as_bytes())
}

pub fn cmd_mirror(
    events_path: &Path,
    local_path: &Path,
    mirror_path: &Path,
    now_ms: u64,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let events: Vec<SubstrateEvent> = io::read_json(events_path)?;
    let mut local = load_stream_or_empty(local_path)?;
    let mut mirror: MirrorState = if mirror_path.exists() {
        io::read_json(mirror_path)?
    } else {
        MirrorState { last_sync_ms: 0, cursor: 0 }
    };
    let clock = ScriptedClock::starting_at(now_ms);
    let report = mirror_sync(&events, &mut local, &mut mirror, &clock)
        .map_err(|e| CliError::Failure(format!("mirror pass failed: {e}")))?;
    store_stream(local_path, &local)?;
    io::write_canonical_json(mirror_path, &mirror)?;
    writeln!(
        out,
        "appended {} cursor {} advanced {} gaps {}",
        report.appended.len(),
        report.cursor,
        report.advanced,
        report.gaps.len()
    )
    .ok();
    Ok(EXIT_OK)
}

pub fn cmd_reconcile(
    local_path: &Path,
    substrate_path: &Path,
    promotions_path: Option<&Path>,
    now_ms: u64,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let mut local = load_stream_or_empty(local_path)?;
    let substrate = load_stream(substrate_path)?;
    let promotions: BTreeMap<String, Digest> = match promotions_path {
        Some(path) => io::read_json(path)?,
        None => BTreeMap::new(),
    };
    let report = reconcile(&mut local, &substrate, &promotions, now_ms)
        .map_err(|e| CliError::Failure(format!("reconcile failed: {e}")))?;
    store_stream(local_path, &local)?;
    let bytes = provenir_core::canon::canonical_bytes(&report)
        .map_err(|e| CliError::Failure(format!("cannot serialize drift report: {e}")))?;
    out.write_all(&bytes).ok();
    writeln!(out).ok();
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_status(
    local_path: &Path,
    substrate_path: Option<&Path>,
    mirror_path: &Path,
    now_ms: u64,
    kid: Option<&str>,
    signed_at_ms: Option<u64>,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let local = load_stream(local_path)?;
    let substrate = substrate_path.map(load_stream).transpose()?;
    let mirror: MirrorState = io::read_json(mirror_path)?;
    let fresh = mirror.is_fresh(now_ms);
    writeln!(
        out,
        "local_entries {} cursor {} lag_ms {} fresh {fresh}",
        local.len(),
        mirror.cursor,
        mirror.lag_ms(now_ms)
    )
    .ok();

    let mut ok = fresh;
    if let (Some(kid), Some(at)) = (kid, signed_at_ms) {
        let status = check_dual(kid, at, Some(&local), substrate.as_ref(), &mirror, now_ms);
        writeln!(out, "kid {kid} status {:?} reason {}", status.status, status.reason).ok();
        ok &= status.status == VerificationStatus::Valid;
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAIL })
}
