//! SHA-256 digests and domain-separated hashing.
//!
//! Every hash in the system is SHA-256 over a domain-tagged byte string so
//! that digests from different contexts (tree leaves, tree nodes, receipt
//! bodies, approval messages) can never collide with each other.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::fmt;

/// A 32-byte SHA-256 digest, rendered as lowercase hex in JSON.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, HashError> {
        let raw = hex::decode(s).map_err(|_| HashError::BadHex(s.to_string()))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| HashError::BadLength(s.len() / 2))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}…)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HashError {
    #[error("invalid hex string: {0:?}")]
    BadHex(String),
    #[error("digest must be 32 bytes, got {0}")]
    BadLength(usize),
}

/// SHA-256 of the concatenation of `parts`, prefixed by a domain tag.
///
/// The tag is hashed as `len(tag) as u8 || tag` so that tag boundaries are
/// unambiguous; parts are hashed as-is (callers are responsible for fixed
/// widths or internal length prefixes where needed).
pub fn hash_domain(tag: &str, parts: &[&[u8]]) -> Digest {
    debug_assert!(tag.len() < 256, "domain tags are short constants");
    let mut h = Sha256::new();
    h.update([tag.len() as u8]);
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Plain SHA-256 (no domain tag) — used where an external convention fixes
/// the preimage, e.g. hash-pinned fixture files.
pub fn sha256(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest(h.finalize().into())
}

/// First 8 bytes of a domain-tagged hash as a big-endian u64, mapped to
/// [0, 1). Used for deterministic sampling and jitter draws.
pub fn hash_to_unit(tag: &str, parts: &[&[u8]]) -> f64 {
    let d = hash_domain(tag, parts);
    let mut b = [0u8; 8];
    b.copy_from_slice(&d.0[..8]);
    u64::from_be_bytes(b) as f64 / (u64::MAX as f64 + 1.0)
}
