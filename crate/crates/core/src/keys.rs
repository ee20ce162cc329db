//! Signing keys and the verifier trust store.
//!
//! A [`KeyHandle`] pairs a key id (`kid`) with secret material for one of the
//! supported algorithms. Both algorithms sign deterministically (Ed25519 per
//! RFC 8032, ECDSA P-256 per RFC 6979), which the replay tests rely on: the
//! same bytes signed by the same key must yield the same signature.
//!
//! Verifiers never see secret material; they hold a [`TrustStore`] mapping
//! `kid → (alg, public key, validity window)`. A kid binds exactly one
//! (alg, public key) pair — re-registering a kid with different material is
//! an error, not an update.

use crate::hash::Digest;
use ed25519_dalek::{Signer as _, Verifier as _};
use p256::ecdsa::signature::hazmat::PrehashVerifier as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigAlg {
    #[serde(rename = "ed25519")]
    Ed25519,
    #[serde(rename = "ecdsa-p256")]
    EcdsaP256,
}

impl std::fmt::Display for SigAlg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigAlg::Ed25519 => f.write_str("ed25519"),
            SigAlg::EcdsaP256 => f.write_str("ecdsa-p256"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("unknown kid {0:?}")]
    UnknownKid(String),
    #[error("kid {0:?} already bound to different key material")]
    KidRebound(String),
    #[error("kid {kid:?} not valid at t={at_ms}")]
    OutsideValidity { kid: String, at_ms: u64 },
    #[error("signature verification failed for kid {0:?}")]
    BadSignature(String),
    #[error("malformed key or signature encoding: {0}")]
    Encoding(String),
    #[error("invalid seed for {0}: {1}")]
    BadSeed(SigAlg, String),
}

enum Secret {
    Ed(ed25519_dalek::SigningKey),
    P256(p256::ecdsa::SigningKey),
}

/// A signing identity. Secret material is deliberately excluded from
/// `Debug`/serde output.
pub struct KeyHandle {
    kid: String,
    secret: Secret,
}

impl std::fmt::Debug for KeyHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyHandle")
            .field("kid", &self.kid)
            .field("alg", &self.alg())
            .finish_non_exhaustive()
    }
}

impl KeyHandle {
    /// Derive a key deterministically from a 32-byte seed.
    pub fn from_seed(kid: &str, alg: SigAlg, seed: &[u8; 32]) -> Result<Self, KeyError> {
        let secret = match alg {
            SigAlg::Ed25519 => Secret::Ed(ed25519_dalek::SigningKey::from_bytes(seed)),
            SigAlg::EcdsaP256 => Secret::P256(
                // A 32-byte seed is a valid scalar unless it is 0 or ≥ the
                // group order; reject rather than re-derive so key material
                // stays an explicit function of the seed.
                p256::ecdsa::SigningKey::from_slice(seed)
                    .map_err(|e| KeyError::BadSeed(alg, e.to_string()))?,
            ),
        };
        Ok(KeyHandle {
            kid: kid.to_string(),
            secret,
        })
    }

    pub fn kid(&self) -> &str {
        &self.kid
    }

    pub fn alg(&self) -> SigAlg {
        match self.secret {
            Secret::Ed(_) => SigAlg::Ed25519,
            Secret::P256(_) => SigAlg::EcdsaP256,
        }
    }

    /// Public key bytes: 32-byte Ed25519 point or 33-byte SEC1 compressed
    /// P-256 point, hex-encoded.
    pub fn public_key_hex(&self) -> String {
        match &self.secret {
            Secret::Ed(sk) => hex::encode(sk.verifying_key().to_bytes()),
            Secret::P256(sk) => {
                hex::encode(p256::ecdsa::VerifyingKey::from(sk).to_sec1_bytes())
            }
        }
    }

    /// Sign a 32-byte digest. Both schemes run over the digest (not the raw
    /// message) so that signing cost is independent of body size; callers
    /// hash canonical bytes first.
    pub fn sign_digest(&self, digest: &Digest) -> Vec<u8> {
        match &self.secret {
            Secret::Ed(sk) => sk.sign(digest.as_bytes()).to_vec(),
            Secret::P256(sk) => {
                use p256::ecdsa::signature::hazmat::PrehashSigner as _;
                let sig: p256::ecdsa::Signature =
                    sk.sign_prehash(digest.as_bytes()).expect("32-byte prehash");
                sig.to_vec()
            }
        }
    }

    /// Exportable public half for a trust store, valid over `[from, to)`
    /// when bounds are given.
    pub fn export_public(
        &self,
        valid_from_ms: Option<u64>,
        valid_to_ms: Option<u64>,
    ) -> TrustedKey {
        TrustedKey {
            kid: self.kid.clone(),
            alg: self.alg(),
            public_key_hex: self.public_key_hex(),
            valid_from_ms,
            valid_to_ms,
        }
    }
}

/// Public half of a key as stored in a trust store file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustedKey {
    pub kid: String,
    pub alg: SigAlg,
    pub public_key_hex: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_from_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_to_ms: Option<u64>,
}

/// kid → public key map used by verifiers. Serializes as a sorted JSON map.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrustStore {
    pub keys: BTreeMap<String, TrustedKey>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a key. Re-adding an identical record is idempotent; binding
    /// an existing kid to different material is rejected.
    pub fn add(&mut self, key: TrustedKey) -> Result<(), KeyError> {
        if let Some(existing) = self.keys.get(&key.kid) {
            if existing.alg != key.alg || existing.public_key_hex != key.public_key_hex {
                return Err(KeyError::KidRebound(key.kid));
            }
        }
        self.keys.insert(key.kid.clone(), key);
        Ok(())
    }

    pub fn get(&self, kid: &str) -> Option<&TrustedKey> {
        self.keys.get(kid)
    }

    /// Verify `sig` over `digest` for `kid` at wall time `at_ms`.
    pub fn verify_digest(
        &self,
        kid: &str,
        digest: &Digest,
        sig: &[u8],
        at_ms: u64,
    ) -> Result<(), KeyError> {
        let key = self
            .keys
            .get(kid)
            .ok_or_else(|| KeyError::UnknownKid(kid.to_string()))?;
        let from_ok = key.valid_from_ms.is_none_or(|t| at_ms >= t);
        let to_ok = key.valid_to_ms.is_none_or(|t| at_ms < t);
        if !(from_ok && to_ok) {
            return Err(KeyError::OutsideValidity {
                kid: kid.to_string(),
                at_ms,
            });
        }
        let pk_bytes = hex::decode(&key.public_key_hex)
            .map_err(|e| KeyError::Encoding(e.to_string()))?;
        match key.alg {
            SigAlg::Ed25519 => {
                let arr: [u8; 32] = pk_bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| KeyError::Encoding("ed25519 key must be 32 bytes".into()))?;
                let vk = ed25519_dalek::VerifyingKey::from_bytes(&arr)
                    .map_err(|e| KeyError::Encoding(e.to_string()))?;
                let sig = ed25519_dalek::Signature::from_slice(sig)
                    .map_err(|e| KeyError::Encoding(e.to_string()))?;
                vk.verify(digest.as_bytes(), &sig)
                    .map_err(|_| KeyError::BadSignature(kid.to_string()))
            }
            SigAlg::EcdsaP256 => {
                let vk = p256::ecdsa::VerifyingKey::from_sec1_bytes(&pk_bytes)
                    .map_err(|e| KeyError::Encoding(e.to_string()))?;
                let sig = p256::ecdsa::Signature::from_slice(sig)
                    .map_err(|e| KeyError::Encoding(e.to_string()))?;
                vk.verify_prehash(digest.as_bytes(), &sig)
                    .map_err(|_| KeyError::BadSignature(kid.to_string()))
            }
        }
    }
}
