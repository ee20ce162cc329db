//! File plumbing shared by every command: error-tagged reads, canonical
//! JSON serialization, and atomic writes (temp file + rename in the
//! target directory, so a crash never leaves a half-written artifact).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest as _, Sha256};

use crate::CliError;

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn read_string(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_bytes(path)?)
        .map_err(|e| CliError::Config(format!("{} is not UTF-8: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
}

/// Parse a JSONL file, one value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_string(path)?
        .lines()
        .filter(|line| !line.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                CliError::Config(format!("cannot parse {} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Write atomically: the bytes land under a temp name in the target
/// directory and are renamed into place, creating parent directories as
/// needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Config(format!("cannot rename into {}: {e}", path.display())))
}

/// Serialize with the deterministic canonical encoding and write
/// atomically.
pub fn write_canonical_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = provenir_core::canon::canonical_bytes(value)
        .map_err(|e| CliError::Failure(format!("cannot canonicalize {}: {e}", path.display())))?;
    atomic_write(path, &bytes)
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
