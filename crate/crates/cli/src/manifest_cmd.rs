//! Manifest lifecycle commands: build a sealed shard manifest from an
//! entry list, prove inclusion (or absence) of document ids, and verify
//! a proof envelope against a root — all offline and deterministic.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use provenir_core::clock::ScriptedClock;
use provenir_core::hash::Digest;
use provenir_core::manifest::{
    build_manifest, verify_proof, DocumentEntry, ProofBudget, ProofEnvelope, ShardId,
    ShardManifest,
};

use crate::io;
use crate::{CliError, EXIT_FAIL, EXIT_OK};

/// Shard spec file: identity plus sealing time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub shard_id: ShardId,
    pub sealed_at_ms: u64,
}

pub fn cmd_build(entries: &Path, shard: &Path, out_path: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let entries: Vec<DocumentEntry> = io::read_jsonl(entries)?;
    let spec: ShardSpec = io::read_json(shard)?;
    let manifest = build_manifest(entries, spec.shard_id, spec.sealed_at_ms)
        .map_err(|e| CliError::Config(format!("cannot build manifest: {e}")))?;
    let bytes = manifest
        .to_canonical_json()
        .map_err(|e| CliError::Failure(format!("cannot serialize manifest: {e}")))?;
    io::atomic_write(out_path, &bytes)?;
    writeln!(out, "root {}", manifest.root.to_hex()).ok();
    writeln!(out, "leaves {}", manifest.leaf_count).ok();
    Ok(EXIT_OK)
}

fn load_manifest(path: &Path) -> Result<ShardManifest, CliError> {
    let text = io::read_string(path)?;
    ShardManifest::from_json(&text)
        .map_err(|e| CliError::Config(format!("cannot parse manifest {}: {e}", path.display())))
}

pub fn cmd_prove(manifest_path: &Path, docs: &[String], out_path: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let envelope = if docs.len() == 1 {
        // Single proof covers inclusion and provable absence alike.
        ProofEnvelope::Single(manifest.prove(&docs[0]))
    } else {
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        ProofEnvelope::Multi(
            manifest
                .prove_multi(&refs)
                .map_err(|e| CliError::Config(format!("cannot build multiproof: {e}")))?,
        )
    };
    let bytes = envelope.to_bytes();
    io::atomic_write(out_path, &bytes)?;
    writeln!(out, "root {}", manifest.root.to_hex()).ok();
    writeln!(out, "size_bytes {}", bytes.len()).ok();
    Ok(EXIT_OK)
}

pub fn cmd_verify(proof_path: &Path, root_hex: &str, out: &mut dyn Write) -> Result<i32, CliError> {
    let bytes = io::read_bytes(proof_path)?;
    let envelope = ProofEnvelope::from_bytes(&bytes)
        .map_err(|e| CliError::Config(format!("malformed proof envelope: {e}")))?;
    let root = Digest::from_hex(root_hex)
        .map_err(|e| CliError::Config(format!("malformed root: {e}")))?;
    let check = verify_proof(
        &root,
        &envelope,
        &ProofBudget::default(),
        &ScriptedClock::starting_at(0),
        None,
    )
    .map_err(|e| CliError::Config(format!("malformed proof: {e}")))?;
    let rendered = serde_json::json!({
        "valid": check.valid,
        "size_bytes": check.size_bytes,
        "elapsed_ms": check.elapsed_ms,
        "timed_out": check.timed_out,
    });
    writeln!(out, "{rendered}").ok();
    Ok(if check.valid && !check.timed_out { EXIT_OK } else { EXIT_FAIL })
}
