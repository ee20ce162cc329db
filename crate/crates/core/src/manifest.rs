//! Shard manifests committed to a sparse Merkle tree.
//!
//! A shard's document listing is committed to a fixed-depth sparse Merkle
//! tree over a 256-bit keyspace, `key = SHA-256(doc_id)`. Fixed depth makes
//! non-inclusion well defined: the proof for an absent key recomputes the
//! root with the default-empty leaf at that key. Default (all-empty) subtree
//! digests are precomputed per level, and proofs omit default siblings behind
//! a presence bitvector, which keeps proof sizes far under the 64 KB p90 SLO
//! even at the 65,536-leaf cap.
//!
//! Leaf hashes are domain-separated from internal node hashes so a leaf can
//! never be reinterpreted as an interior node (second-preimage hygiene).
//!
//! ## Wire format
//!
//! Single proofs and multiproofs share one binary layout so that a one-key
//! multiproof is byte-identical to the single proof except for the kind byte
//! (and aggregation can never cost more than the equivalent single proofs):
//!
//! ```text
//! [version u8 = 1] [kind u8: 0 incl | 1 non-incl | 2 multi]
//! [n_keys u16 BE] [keys: 32·n, sorted ascending]
//! [key presence bitvector: ceil(n/8) bytes, bit i = key i has a leaf]
//! [leaf hashes: 32 bytes per present key, key order]
//! [n_digests u32 BE] [digests: 32·n_digests, DFS consumption order]
//! [consumption bitvector: remaining bytes, bit j = consumption point j
//!  is a provided digest (1) or the default for its level (0)]
//! ```
//!
//! The verifier re-runs the same depth-first recursion over the sorted keys
//! that the prover ran, so consumption order — and therefore which digest or
//! default each bit refers to — is fully determined without explicit
//! position records.

use crate::canon::canonical_bytes;
use crate::clock::Clock;
use crate::hash::{hash_domain, sha256, Digest};
use crate::keys::{KeyHandle, TrustStore};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::OnceLock;

pub const MAX_LEAVES: usize = 65_536;
pub const MAX_SELECTOR_BYTES: usize = 128;
const TREE_DEPTH: usize = 256;
const WIRE_VERSION: u8 = 1;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("leaf cap exceeded: {0} entries > {MAX_LEAVES}")]
    LeafCapExceeded(usize),
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("malformed entry {doc_id:?}: {reason}")]
    MalformedEntry { doc_id: String, reason: String },
    #[error("manifest must contain at least one entry")]
    EmptyEntrySet,
    #[error("multiproof requires at least one key")]
    EmptyKeySet,
    #[error("malformed proof: {0}")]
    MalformedProof(String),
    #[error("stored root {stored} does not match recomputed root {computed}")]
    RootMismatch { stored: Digest, computed: Digest },
    #[error("signer kid {0:?} is revoked")]
    SignerRevoked(String),
    #[error("substrate write failure: {0}")]
    SubstrateWriteFailure(String),
    #[error(transparent)]
    Canon(#[from] crate::canon::CanonError),
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// License terms attached to a document entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct License {
    pub terms_id: String,
    /// Epoch milliseconds after which cached copies must be dropped.
    pub ttl_expiry_ms: u64,
}

/// One document committed in a shard manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentEntry {
    pub doc_id: String,
    pub version_hash: Digest,
    pub license: License,
    /// Selector strings locating citable spans; each ≤ 128 bytes.
    pub anchors: Vec<String>,
    /// Small ordinal, 0 = lowest trust.
    pub trust_tier: u8,
    pub issuer: String,
    pub author: String,
}

impl DocumentEntry {
    fn validate(&self) -> Result<(), ManifestError> {
        for a in &self.anchors {
            if a.len() > MAX_SELECTOR_BYTES {
                return Err(ManifestError::MalformedEntry {
                    doc_id: self.doc_id.clone(),
                    reason: format!(
                        "selector is {} bytes, cap is {MAX_SELECTOR_BYTES}",
                        a.len()
                    ),
                });
            }
        }
        if self.doc_id.is_empty() {
            return Err(ManifestError::MalformedEntry {
                doc_id: self.doc_id.clone(),
                reason: "empty doc_id".to_string(),
            });
        }
        Ok(())
    }

    pub fn key(&self) -> Digest {
        sha256(self.doc_id.as_bytes())
    }

    fn leaf_hash(&self) -> Result<Digest, ManifestError> {
        Ok(hash_domain("smt:leaf:v1", &[&canonical_bytes(self)?]))
    }
}

/// Shard identity: which issuer/corpus/jurisdiction this manifest covers and
/// its effective-date window (epoch ms, half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardId {
    pub issuer: String,
    pub corpus: String,
    pub jurisdiction: String,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
}

impl ShardId {
    /// Stable string label used as a map key in traces and receipts.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}-{}",
            self.issuer, self.corpus, self.jurisdiction, self.window_start_ms, self.window_end_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupersededRoot {
    pub root: Digest,
    pub sealed_at_ms: u64,
}

/// A sealed, immutable shard manifest. Updates build a new manifest and
/// archive the previous root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shard_id: ShardId,
    /// Committed listing, canonically ordered by key digest.
    pub entries: Vec<DocumentEntry>,
    pub root: Digest,
    pub leaf_count: u32,
    pub sealed_at_ms: u64,
    pub superseded_roots: Vec<SupersededRoot>,
    #[serde(skip, default)]
    index: TreeIndex,
}

// ---------------------------------------------------------------------------
// Default-subtree digests and node hashing
// ---------------------------------------------------------------------------

fn node_hash(left: &Digest, right: &Digest) -> Digest {
    hash_domain("smt:node:v1", &[left.as_bytes(), right.as_bytes()])
}

/// defaults[d] = digest of the all-empty subtree rooted at depth d
/// (defaults[256] is the empty-leaf marker, defaults[0] the empty-tree root).
fn defaults() -> &'static [Digest; TREE_DEPTH + 1] {
    static TABLE: OnceLock<[Digest; TREE_DEPTH + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Digest::ZERO; TREE_DEPTH + 1];
        t[TREE_DEPTH] = hash_domain("smt:empty:v1", &[]);
        for d in (0..TREE_DEPTH).rev() {
            t[d] = node_hash(&t[d + 1], &t[d + 1]);
        }
        t
    })
}

/// Bit `i` (0 = most significant, selects the child of the root) of a key.
fn key_bit(key: &Digest, i: usize) -> bool {
    (key.0[i / 8] >> (7 - (i % 8))) & 1 == 1
}

// ---------------------------------------------------------------------------
// Tree index: sorted leaves + memoized branch digests
// ---------------------------------------------------------------------------

/// Derived (non-serialized) state for a sealed manifest: keys and leaf hashes
/// sorted ascending, plus memoized digests for every subtree holding ≥ 2
/// leaves. Single-leaf subtrees fold on demand against default siblings.
#[derive(Debug, Clone, Default)]
struct TreeIndex {
    keys: Vec<Digest>,
    leaf_hashes: Vec<Digest>,
    branch_memo: HashMap<(u16, u32, u32), Digest>,
}

impl TreeIndex {
    fn build(entries: &[DocumentEntry]) -> Result<(Self, Digest), ManifestError> {
        let mut idx = TreeIndex {
            keys: entries.iter().map(|e| e.key()).collect(),
            leaf_hashes: entries
                .iter()
                .map(|e| e.leaf_hash())
                .collect::<Result<_, _>>()?,
            branch_memo: HashMap::new(),
        };
        // Entries are pre-sorted by key; assert rather than re-sort.
        debug_assert!(idx.keys.windows(2).all(|w| w[0] < w[1]));
        let root = idx.seal(0, 0, idx.keys.len());
        Ok((idx, root))
    }

    /// Fold a single leaf up from the bottom of the tree to `depth`,
    /// combining with default siblings at every level.
    fn chain_fold(&self, pos: usize, depth: usize) -> Digest {
        let key = &self.keys[pos];
        let mut cur = self.leaf_hashes[pos];
        let d = defaults();
        for level in (depth..TREE_DEPTH).rev() {
            // cur sits at depth level+1; its sibling there is empty.
            cur = if key_bit(key, level) {
                node_hash(&d[level + 1], &cur)
            } else {
                node_hash(&cur, &d[level + 1])
            };
        }
        cur
    }

    /// First index in `[lo, hi)` whose key has bit `depth` set. Keys sorted
    /// ascending sort 0-bits before 1-bits at every level.
    fn split(&self, depth: usize, lo: usize, hi: usize) -> usize {
        lo + self.keys[lo..hi].partition_point(|k| !key_bit(k, depth))
    }

    fn seal(&mut self, depth: usize, lo: usize, hi: usize) -> Digest {
        match hi - lo {
            0 => defaults()[depth],
            1 => self.chain_fold(lo, depth),
            _ => {
                let mid = self.split(depth, lo, hi);
                let left = self.seal(depth + 1, lo, mid);
                let right = self.seal(depth + 1, mid, hi);
                let h = node_hash(&left, &right);
                self.branch_memo
                    .insert((depth as u16, lo as u32, hi as u32), h);
                h
            }
        }
    }

    /// Digest of the subtree at `depth` covering sorted positions `[lo, hi)`.
    fn subtree_digest(&self, depth: usize, lo: usize, hi: usize) -> Digest {
        match hi - lo {
            0 => defaults()[depth],
            1 => self.chain_fold(lo, depth),
            _ => *self
                .branch_memo
                .get(&(depth as u16, lo as u32, hi as u32))
                .expect("sealed index covers every multi-leaf subtree"),
        }
    }

    fn position_of(&self, key: &Digest) -> Option<usize> {
        self.keys.binary_search(key).ok()
    }
}

// ---------------------------------------------------------------------------
// Proof structures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProofKind {
    Inclusion,
    NonInclusion,
}

/// One sibling on a single proof's path (JSON debug rendering).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathElem {
    /// Depth of the sibling subtree (1 = child of the root, 256 = leaf level).
    pub level: u16,
    pub sibling: Digest,
}

/// Proof of inclusion or non-inclusion for one key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmtProof {
    pub key: Digest,
    pub kind: ProofKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaf_hash: Option<Digest>,
    /// Non-default siblings, ordered root→leaf.
    pub path: Vec<PathElem>,
    pub size_bytes: usize,
}

/// Aggregated proof for several keys against one root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Multiproof {
    /// Query keys, sorted ascending, deduplicated.
    pub keys: Vec<Digest>,
    /// Per-key leaf hash (`None` = non-inclusion / default-empty leaf).
    pub leaves: Vec<Option<Digest>>,
    /// Deduplicated off-path subtree digests in DFS consumption order; the
    /// recursion over `keys` fixes each digest's (depth, prefix) position.
    pub shared_nodes: Vec<Digest>,
    /// Consumption bitvector: bit j says whether consumption point j takes
    /// the next shared node (1) or the level default (0).
    pub presence: Vec<u8>,
    pub n_consumed: u32,
    pub size_bytes: usize,
}

/// Parsed proof wire envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProofEnvelope {
    Single(SmtProof),
    Multi(Multiproof),
}

impl ProofEnvelope {
    pub fn size_bytes(&self) -> usize {
        match self {
            ProofEnvelope::Single(p) => p.size_bytes,
            ProofEnvelope::Multi(p) => p.size_bytes,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            ProofEnvelope::Single(p) => p.to_bytes(),
            ProofEnvelope::Multi(p) => p.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ManifestError> {
        parse_envelope(bytes)
    }
}

/// Shared serializer for the unified layout described in the module docs.
fn encode_wire(
    kind_byte: u8,
    items: &[(Digest, Option<Digest>)],
    digests: &[Digest],
    bits: &[u8],
    n_bits: u32,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        4 + 33 * items.len() + items.len() / 8 + 32 * digests.len() + bits.len() + 8,
    );
    out.push(WIRE_VERSION);
    out.push(kind_byte);
    out.extend_from_slice(&(items.len() as u16).to_be_bytes());
    for (k, _) in items {
        out.extend_from_slice(k.as_bytes());
    }
    let mut key_presence = vec![0u8; items.len().div_ceil(8)];
    for (i, (_, leaf)) in items.iter().enumerate() {
        if leaf.is_some() {
            key_presence[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&key_presence);
    for (_, leaf) in items {
        if let Some(l) = leaf {
            out.extend_from_slice(l.as_bytes());
        }
    }
    out.extend_from_slice(&(digests.len() as u32).to_be_bytes());
    for d in digests {
        out.extend_from_slice(d.as_bytes());
    }
    // n_bits is implicit in verification (the recursion over the keys
    // consumes exactly as many bits as the prover emitted), but is encoded
    // for structural checking of padding.
    debug_assert_eq!(bits.len(), (n_bits as usize).div_ceil(8));
    out.extend_from_slice(bits);
    out
}

/// DFS consumption order of the 256 off-path sibling levels for one key:
/// a left-of-path sibling (key bit 1) is consumed before descending, a
/// right-of-path sibling (key bit 0) after the descent returns.
fn singleton_consumption_levels(key: &Digest) -> Vec<u16> {
    let mut order = Vec::with_capacity(TREE_DEPTH);
    for d in 0..TREE_DEPTH {
        if key_bit(key, d) {
            order.push((d + 1) as u16);
        }
    }
    for d in (0..TREE_DEPTH).rev() {
        if !key_bit(key, d) {
            order.push((d + 1) as u16);
        }
    }
    order
}

/// Arrange a single proof's (level-ascending) path into DFS consumption
/// order: (digests in consumption order, consumption bitvector).
fn singleton_wire_parts(
    key: &Digest,
    path: &[PathElem],
) -> Result<(Vec<Digest>, Vec<u8>), ManifestError> {
    let mut by_level: HashMap<u16, Digest> = HashMap::with_capacity(path.len());
    for elem in path {
        if elem.level == 0 || elem.level as usize > TREE_DEPTH {
            return Err(ManifestError::MalformedProof(format!(
                "sibling level {} out of range",
                elem.level
            )));
        }
        if by_level.insert(elem.level, elem.sibling).is_some() {
            return Err(ManifestError::MalformedProof(format!(
                "duplicate sibling at level {}",
                elem.level
            )));
        }
    }
    let mut digests = Vec::with_capacity(path.len());
    let mut bits = vec![0u8; TREE_DEPTH / 8];
    for (j, level) in singleton_consumption_levels(key).iter().enumerate() {
        if let Some(d) = by_level.get(level) {
            bits[j / 8] |= 1 << (j % 8);
            digests.push(*d);
        }
    }
    Ok((digests, bits))
}

impl SmtProof {
    pub fn to_bytes(&self) -> Vec<u8> {
        let kind_byte = match self.kind {
            ProofKind::Inclusion => 0,
            ProofKind::NonInclusion => 1,
        };
        let (digests, bits) =
            singleton_wire_parts(&self.key, &self.path).expect("proofs we build are well-formed");
        encode_wire(
            kind_byte,
            &[(self.key, self.leaf_hash)],
            &digests,
            &bits,
            TREE_DEPTH as u32,
        )
    }
}

impl Multiproof {
    pub fn to_bytes(&self) -> Vec<u8> {
        let items: Vec<(Digest, Option<Digest>)> = self
            .keys
            .iter()
            .copied()
            .zip(self.leaves.iter().copied())
            .collect();
        encode_wire(2, &items, &self.shared_nodes, &self.presence, self.n_consumed)
    }
}

struct WireReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ManifestError> {
        if self.pos + n > self.buf.len() {
            return Err(ManifestError::MalformedProof(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_digest(&mut self, what: &str) -> Result<Digest, ManifestError> {
        let s = self.take(32, what)?;
        Ok(Digest(s.try_into().expect("slice is 32 bytes")))
    }

    fn rest(self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn parse_envelope(bytes: &[u8]) -> Result<ProofEnvelope, ManifestError> {
    let mut r = WireReader { buf: bytes, pos: 0 };
    let version = r.take(1, "version")?[0];
    if version != WIRE_VERSION {
        return Err(ManifestError::MalformedProof(format!(
            "unsupported version {version}"
        )));
    }
    let kind = r.take(1, "kind")?[0];
    let n_keys = u16::from_be_bytes(r.take(2, "key count")?.try_into().unwrap()) as usize;
    if n_keys == 0 {
        return Err(ManifestError::MalformedProof("zero keys".to_string()));
    }
    if kind != 2 && n_keys != 1 {
        return Err(ManifestError::MalformedProof(
            "single-proof kind with multiple keys".to_string(),
        ));
    }
    let mut keys = Vec::with_capacity(n_keys);
    for _ in 0..n_keys {
        keys.push(r.take_digest("key")?);
    }
    if !keys.windows(2).all(|w| w[0] < w[1]) {
        return Err(ManifestError::MalformedProof(
            "keys not strictly ascending".to_string(),
        ));
    }
    let presence = r.take(n_keys.div_ceil(8), "key presence")?.to_vec();
    let mut leaves = Vec::with_capacity(n_keys);
    for i in 0..n_keys {
        if presence[i / 8] >> (i % 8) & 1 == 1 {
            leaves.push(Some(r.take_digest("leaf hash")?));
        } else {
            leaves.push(None);
        }
    }
    let n_digests =
        u32::from_be_bytes(r.take(4, "digest count")?.try_into().unwrap()) as usize;
    let mut shared = Vec::with_capacity(n_digests);
    for _ in 0..n_digests {
        shared.push(r.take_digest("shared node")?);
    }
    let bits = r.rest().to_vec();
    // The exact bit count is recovered during verification; structurally we
    // only require the provided digest count to be coverable by the bits.
    let n_consumed = (bits.len() * 8) as u32;
    let size_bytes = bytes.len();
    match kind {
        0 | 1 => {
            let leaf = leaves[0];
            if kind == 0 && leaf.is_none() {
                return Err(ManifestError::MalformedProof(
                    "inclusion proof without leaf hash".to_string(),
                ));
            }
            if kind == 1 && leaf.is_some() {
                return Err(ManifestError::MalformedProof(
                    "non-inclusion proof carries leaf hash".to_string(),
                ));
            }
            if bits.len() != TREE_DEPTH / 8 {
                return Err(ManifestError::MalformedProof(format!(
                    "single proof bitvector must be {} bytes, got {}",
                    TREE_DEPTH / 8,
                    bits.len()
                )));
            }
            let order = singleton_consumption_levels(&keys[0]);
            let mut path = Vec::new();
            let mut di = 0usize;
            for (j, level) in order.iter().enumerate() {
                if bits[j / 8] >> (j % 8) & 1 == 1 {
                    if di >= shared.len() {
                        return Err(ManifestError::MalformedProof(
                            "bitvector references more digests than provided".to_string(),
                        ));
                    }
                    path.push(PathElem {
                        level: *level,
                        sibling: shared[di],
                    });
                    di += 1;
                }
            }
            if di != shared.len() {
                return Err(ManifestError::MalformedProof(
                    "unused trailing digests".to_string(),
                ));
            }
            path.sort_by_key(|e| e.level);
            Ok(ProofEnvelope::Single(SmtProof {
                key: keys[0],
                kind: if kind == 0 {
                    ProofKind::Inclusion
                } else {
                    ProofKind::NonInclusion
                },
                leaf_hash: leaf,
                path,
                size_bytes,
            }))
        }
        2 => Ok(ProofEnvelope::Multi(Multiproof {
            keys,
            leaves,
            shared_nodes: shared,
            presence: bits,
            n_consumed,
            size_bytes,
        })),
        other => Err(ManifestError::MalformedProof(format!(
            "unknown kind byte {other}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Shared verification recursion
// ---------------------------------------------------------------------------

struct BitCursor<'a> {
    bits: &'a [u8],
    pos: usize,
}

impl BitCursor<'_> {
    fn next(&mut self) -> Result<bool, ManifestError> {
        if self.pos >= self.bits.len() * 8 {
            return Err(ManifestError::MalformedProof(
                "consumption bitvector exhausted".to_string(),
            ));
        }
        let b = self.bits[self.pos / 8] >> (self.pos % 8) & 1 == 1;
        self.pos += 1;
        Ok(b)
    }
}

/// Recompute the root implied by a proof: DFS over the sorted query keys,
/// consuming provided digests / level defaults for every off-path subtree.
fn recompute_root(
    items: &[(Digest, Option<Digest>)],
    digests: &[Digest],
    bits: &[u8],
) -> Result<Digest, ManifestError> {
    struct Ctx<'a> {
        digests: &'a [Digest],
        di: usize,
        bits: BitCursor<'a>,
    }
    impl Ctx<'_> {
        fn consume(&mut self, depth: usize) -> Result<Digest, ManifestError> {
            if self.bits.next()? {
                let d = *self.digests.get(self.di).ok_or_else(|| {
                    ManifestError::MalformedProof("digest list exhausted".to_string())
                })?;
                self.di += 1;
                Ok(d)
            } else {
                Ok(defaults()[depth])
            }
        }
    }
    fn rec(
        ctx: &mut Ctx<'_>,
        depth: usize,
        items: &[(Digest, Option<Digest>)],
    ) -> Result<Digest, ManifestError> {
        if depth == TREE_DEPTH {
            debug_assert_eq!(items.len(), 1);
            return Ok(items[0].1.unwrap_or(defaults()[TREE_DEPTH]));
        }
        let split = items.partition_point(|(k, _)| !key_bit(k, depth));
        let (left_items, right_items) = items.split_at(split);
        let left = if left_items.is_empty() {
            ctx.consume(depth + 1)?
        } else {
            rec(ctx, depth + 1, left_items)?
        };
        let right = if right_items.is_empty() {
            ctx.consume(depth + 1)?
        } else {
            rec(ctx, depth + 1, right_items)?
        };
        Ok(node_hash(&left, &right))
    }

    let mut ctx = Ctx {
        digests,
        di: 0,
        bits: BitCursor { bits, pos: 0 },
    };
    let root = rec(&mut ctx, 0, items)?;
    if ctx.di != digests.len() {
        return Err(ManifestError::MalformedProof(
            "unused trailing digests".to_string(),
        ));
    }
    // Remaining bits are byte padding and must be zero.
    for p in ctx.bits.pos..bits.len() * 8 {
        if bits[p / 8] >> (p % 8) & 1 == 1 {
            return Err(ManifestError::MalformedProof(
                "nonzero padding bits".to_string(),
            ));
        }
    }
    Ok(root)
}

// ---------------------------------------------------------------------------
// Proof policy / verification report
// ---------------------------------------------------------------------------

/// Verification budget; `proof_timeout_ms` defaults to 300.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProofBudget {
    pub proof_timeout_ms: u64,
}

impl Default for ProofBudget {
    fn default() -> Self {
        ProofBudget {
            proof_timeout_ms: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofCheck {
    pub valid: bool,
    pub size_bytes: usize,
    pub elapsed_ms: u64,
    pub timed_out: bool,
}

/// Verify a proof against `root`. `injected_delay_ms` lets replay harnesses
/// model slow verification through the clock abstraction; the check still
/// completes (degrade decisions happen in the engine, not here).
pub fn verify_proof(
    root: &Digest,
    proof: &ProofEnvelope,
    budget: &ProofBudget,
    clock: &dyn Clock,
    injected_delay_ms: Option<u64>,
) -> Result<ProofCheck, ManifestError> {
    let start = clock.now_ms();
    let (items, digests, bits) = match proof {
        ProofEnvelope::Single(p) => {
            if matches!(p.kind, ProofKind::Inclusion) && p.leaf_hash.is_none() {
                return Err(ManifestError::MalformedProof(
                    "inclusion proof without leaf hash".to_string(),
                ));
            }
            let (digests, bits) = singleton_wire_parts(&p.key, &p.path)?;
            (vec![(p.key, p.leaf_hash)], digests, bits)
        }
        ProofEnvelope::Multi(p) => {
            if p.keys.len() != p.leaves.len() {
                return Err(ManifestError::MalformedProof(
                    "keys/leaves length mismatch".to_string(),
                ));
            }
            (
                p.keys.iter().copied().zip(p.leaves.iter().copied()).collect(),
                p.shared_nodes.clone(),
                p.presence.clone(),
            )
        }
    };
    let computed = recompute_root(&items, &digests, &bits)?;
    clock.advance(injected_delay_ms.unwrap_or(0));
    let elapsed_ms = clock.now_ms() - start;
    Ok(ProofCheck {
        valid: computed == *root,
        size_bytes: proof.size_bytes(),
        elapsed_ms,
        timed_out: elapsed_ms > budget.proof_timeout_ms,
    })
}

// ---------------------------------------------------------------------------
// Manifest construction and proving
// ---------------------------------------------------------------------------

/// Build a sealed manifest from `entries` (any order; the committed listing
/// is sorted by key digest).
pub fn build_manifest(
    entries: Vec<DocumentEntry>,
    shard_id: ShardId,
    sealed_at_ms: u64,
) -> Result<ShardManifest, ManifestError> {
    if entries.is_empty() {
        return Err(ManifestError::EmptyEntrySet);
    }
    if entries.len() > MAX_LEAVES {
        return Err(ManifestError::LeafCapExceeded(entries.len()));
    }
    for e in &entries {
        e.validate()?;
    }
    let mut sorted = entries;
    sorted.sort_by_key(|e| e.key());
    for w in sorted.windows(2) {
        if w[0].key() == w[1].key() {
            return Err(ManifestError::DuplicateDocId(w[1].doc_id.clone()));
        }
    }
    let (index, root) = TreeIndex::build(&sorted)?;
    Ok(ShardManifest {
        shard_id,
        leaf_count: sorted.len() as u32,
        entries: sorted,
        root,
        sealed_at_ms,
        superseded_roots: Vec::new(),
        index,
    })
}

impl ShardManifest {
    /// Replace the entry set, archiving the current root.
    pub fn update(
        &self,
        entries: Vec<DocumentEntry>,
        sealed_at_ms: u64,
    ) -> Result<ShardManifest, ManifestError> {
        let mut next = build_manifest(entries, self.shard_id.clone(), sealed_at_ms)?;
        next.superseded_roots = self.superseded_roots.clone();
        next.superseded_roots.push(SupersededRoot {
            root: self.root,
            sealed_at_ms: self.sealed_at_ms,
        });
        Ok(next)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.index.position_of(&sha256(doc_id.as_bytes())).is_some()
    }

    pub fn entry(&self, doc_id: &str) -> Option<&DocumentEntry> {
        self.index
            .position_of(&sha256(doc_id.as_bytes()))
            .map(|p| &self.entries[p])
    }

    /// Inclusion proof if `doc_id` is committed, non-inclusion proof
    /// otherwise. Absence is a result, not an error.
    pub fn prove(&self, doc_id: &str) -> SmtProof {
        let key = sha256(doc_id.as_bytes());
        let idx = &self.index;
        let (mut lo, mut hi) = (0usize, idx.keys.len());
        let mut path = Vec::new();
        for depth in 0..TREE_DEPTH {
            let mid = if hi > lo { idx.split(depth, lo, hi) } else { lo };
            let (child, sib) = if key_bit(&key, depth) {
                ((mid, hi), (lo, mid))
            } else {
                ((lo, mid), (mid, hi))
            };
            let sibling = idx.subtree_digest(depth + 1, sib.0, sib.1);
            if sibling != defaults()[depth + 1] {
                path.push(PathElem {
                    level: (depth + 1) as u16,
                    sibling,
                });
            }
            (lo, hi) = child;
        }
        let leaf_hash = (hi > lo).then(|| {
            debug_assert_eq!(hi - lo, 1);
            debug_assert_eq!(idx.keys[lo], key);
            idx.leaf_hashes[lo]
        });
        let kind = if leaf_hash.is_some() {
            ProofKind::Inclusion
        } else {
            ProofKind::NonInclusion
        };
        let mut proof = SmtProof {
            key,
            kind,
            leaf_hash,
            path,
            size_bytes: 0,
        };
        proof.size_bytes = proof.to_bytes().len();
        proof
    }

    /// Aggregated proof over `doc_ids` (mixed inclusion/non-inclusion;
    /// duplicates collapse).
    pub fn prove_multi(&self, doc_ids: &[&str]) -> Result<Multiproof, ManifestError> {
        if doc_ids.is_empty() {
            return Err(ManifestError::EmptyKeySet);
        }
        let mut keys: Vec<Digest> = doc_ids.iter().map(|d| sha256(d.as_bytes())).collect();
        keys.sort();
        keys.dedup();

        struct Gen<'a> {
            idx: &'a TreeIndex,
            digests: Vec<Digest>,
            bits: Vec<u8>,
            n_bits: u32,
        }
        impl Gen<'_> {
            fn push_bit(&mut self, b: bool) {
                let j = self.n_bits as usize;
                if j % 8 == 0 {
                    self.bits.push(0);
                }
                if b {
                    self.bits[j / 8] |= 1 << (j % 8);
                }
                self.n_bits += 1;
            }

            fn consume(&mut self, depth: usize, lo: usize, hi: usize) {
                let d = self.idx.subtree_digest(depth, lo, hi);
                if d == defaults()[depth] {
                    self.push_bit(false);
                } else {
                    self.push_bit(true);
                    self.digests.push(d);
                }
            }

            fn rec(
                &mut self,
                depth: usize,
                q: &[Digest],
                lo: usize,
                hi: usize,
                leaves: &mut Vec<Option<Digest>>,
            ) {
                if depth == TREE_DEPTH {
                    debug_assert_eq!(q.len(), 1);
                    if hi > lo {
                        debug_assert_eq!(self.idx.keys[lo], q[0]);
                        leaves.push(Some(self.idx.leaf_hashes[lo]));
                    } else {
                        leaves.push(None);
                    }
                    return;
                }
                let qs = q.partition_point(|k| !key_bit(k, depth));
                let (ql, qr) = q.split_at(qs);
                let mid = if hi > lo {
                    self.idx.split(depth, lo, hi)
                } else {
                    lo
                };
                if ql.is_empty() {
                    self.consume(depth + 1, lo, mid);
                } else {
                    self.rec(depth + 1, ql, lo, mid, leaves);
                }
                if qr.is_empty() {
                    self.consume(depth + 1, mid, hi);
                } else {
                    self.rec(depth + 1, qr, mid, hi, leaves);
                }
            }
        }

        let mut gen = Gen {
            idx: &self.index,
            digests: Vec::new(),
            bits: Vec::new(),
            n_bits: 0,
        };
        let mut leaves = Vec::with_capacity(keys.len());
        gen.rec(0, &keys, 0, self.index.keys.len(), &mut leaves);
        let mut proof = Multiproof {
            keys,
            leaves,
            shared_nodes: gen.digests,
            presence: gen.bits,
            n_consumed: gen.n_bits,
            size_bytes: 0,
        };
        proof.size_bytes = proof.to_bytes().len();
        Ok(proof)
    }

    /// Canonical JSON bytes of the manifest (sorted keys, lowercase hex).
    pub fn to_canonical_json(&self) -> Result<Vec<u8>, ManifestError> {
        Ok(canonical_bytes(self)?)
    }

    /// Load a manifest from JSON, rebuilding the tree index and checking the
    /// stored root against the recomputed one.
    pub fn from_json(json: &str) -> Result<ShardManifest, ManifestError> {
        let parsed: ShardManifest = serde_json::from_str(json).map_err(|e| {
            ManifestError::MalformedEntry {
                doc_id: String::new(),
                reason: format!("manifest JSON: {e}"),
            }
        })?;
        let mut rebuilt = build_manifest(
            parsed.entries,
            parsed.shard_id,
            parsed.sealed_at_ms,
        )?;
        rebuilt.superseded_roots = parsed.superseded_roots;
        if rebuilt.root != parsed.root {
            return Err(ManifestError::RootMismatch {
                stored: parsed.root,
                computed: rebuilt.root,
            });
        }
        Ok(rebuilt)
    }
}

// ---------------------------------------------------------------------------
// Root anchoring
// ---------------------------------------------------------------------------

/// Signed record anchoring a manifest root to a timestamped substrate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub root: Digest,
    pub anchored_at_ms: u64,
    pub substrate_id: String,
    pub seq: u64,
    pub kid: String,
    pub signature_hex: String,
}

/// Append-only anchoring sink with monotonic sequence numbers. The default
/// implementation is a local JSONL file; tests use in-memory sinks.
pub trait AnchorSink {
    fn substrate_id(&self) -> String;
    /// Append one serialized record; returns the assigned sequence number.
    fn append(&mut self, line: &str) -> Result<u64, String>;
}

/// In-memory sink.
#[derive(Debug, Default)]
pub struct MemAnchorSink {
    pub lines: Vec<String>,
}

impl AnchorSink for MemAnchorSink {
    fn substrate_id(&self) -> String {
        "mem:anchors".to_string()
    }

    fn append(&mut self, line: &str) -> Result<u64, String> {
        self.lines.push(line.to_string());
        Ok(self.lines.len() as u64 - 1)
    }
}

/// File-backed JSONL sink.
pub struct FileAnchorSink {
    path: std::path::PathBuf,
}

impl FileAnchorSink {
    pub fn new(path: impl Into<std::path::PathBuf>) -> Self {
        FileAnchorSink { path: path.into() }
    }
}

impl AnchorSink for FileAnchorSink {
    fn substrate_id(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn append(&mut self, line: &str) -> Result<u64, String> {
        use std::io::Write as _;
        let existing = match std::fs::read_to_string(&self.path) {
            Ok(s) => s.lines().count() as u64,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.to_string()),
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| e.to_string())?;
        writeln!(f, "{line}").map_err(|e| e.to_string())?;
        Ok(existing)
    }
}

fn anchor_digest(root: &Digest, anchored_at_ms: u64, substrate_id: &str) -> Digest {
    #[derive(Serialize)]
    struct Span<'a> {
        root: &'a Digest,
        anchored_at_ms: u64,
        substrate_id: &'a str,
    }
    let bytes = canonical_bytes(&Span {
        root,
        anchored_at_ms,
        substrate_id,
    })
    .expect("anchor span is canonical by construction");
    hash_domain("anchor:v1", &[&bytes])
}

/// Sign and append an anchor record for a sealed manifest root.
/// `is_revoked` consults the revocation stream for the signer's kid.
pub fn anchor_root(
    manifest: &ShardManifest,
    signer: &KeyHandle,
    sink: &mut dyn AnchorSink,
    is_revoked: impl Fn(&str) -> bool,
    now_ms: u64,
) -> Result<AnchorRecord, ManifestError> {
    if is_revoked(signer.kid()) {
        return Err(ManifestError::SignerRevoked(signer.kid().to_string()));
    }
    let substrate_id = sink.substrate_id();
    let digest = anchor_digest(&manifest.root, now_ms, &substrate_id);
    let mut record = AnchorRecord {
        root: manifest.root,
        anchored_at_ms: now_ms,
        substrate_id,
        seq: 0,
        kid: signer.kid().to_string(),
        signature_hex: hex::encode(signer.sign_digest(&digest)),
    };
    let line = serde_json::to_string(&record).expect("anchor record serializes");
    record.seq = sink
        .append(&line)
        .map_err(ManifestError::SubstrateWriteFailure)?;
    Ok(record)
}

/// Verify an anchor record's signature against a trust store.
pub fn verify_anchor(record: &AnchorRecord, trust: &TrustStore) -> bool {
    let digest = anchor_digest(&record.root, record.anchored_at_ms, &record.substrate_id);
    match hex::decode(&record.signature_hex) {
        Ok(sig) => trust
            .verify_digest(&record.kid, &digest, &sig, record.anchored_at_ms)
            .is_ok(),
        Err(_) => false,
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ScriptedClock;
    use crate::keys::SigAlg;
    use rand::rngs::StdRng;
    use rand::{Rng as _, SeedableRng as _};

    fn make_entry(doc_id: &str) -> DocumentEntry {
        DocumentEntry {
            doc_id: doc_id.to_string(),
            version_hash: sha256(format!("body of {doc_id}").as_bytes()),
            license: License {
                terms_id: "CC-BY-4.0".to_string(),
                ttl_expiry_ms: 4_102_444_800_000,
            },
            anchors: vec![format!("p1/{doc_id}")],
            trust_tier: 1,
            issuer: format!("issuer-{}", doc_id.len() % 3),
            author: "author-x".to_string(),
        }
    }

    fn make_shard_id() -> ShardId {
        ShardId {
            issuer: "eur-lex".to_string(),
            corpus: "regulations".to_string(),
            jurisdiction: "EU".to_string(),
            window_start_ms: 1_577_836_800_000,
            window_end_ms: 1_735_689_600_000,
        }
    }

    fn make_manifest(n: usize) -> ShardManifest {
        let entries = (0..n).map(|i| make_entry(&format!("doc-{i:05}"))).collect();
        build_manifest(entries, make_shard_id(), 1_700_000_000_000).unwrap()
    }

    #[test]
    fn identical_entry_sets_produce_identical_roots() {
        let a = make_manifest(3);
        let entries: Vec<_> = (0..3).rev().map(|i| make_entry(&format!("doc-{i:05}"))).collect();
        let b = build_manifest(entries, make_shard_id(), 1).unwrap();
        assert_eq!(a.root, b.root, "root must not depend on insertion order");
    }

    #[test]
    fn leaf_cap_enforced() {
        let entries: Vec<_> = (0..MAX_LEAVES + 1)
            .map(|i| DocumentEntry {
                anchors: vec![],
                ..make_entry(&format!("d{i}"))
            })
            .collect();
        match build_manifest(entries, make_shard_id(), 0) {
            Err(ManifestError::LeafCapExceeded(n)) => assert_eq!(n, MAX_LEAVES + 1),
            other => panic!("expected LeafCapExceeded, got {other:?}"),
        }
    }

    #[test]
    fn oversize_selector_rejected() {
        let mut e = make_entry("doc-a");
        e.anchors = vec!["x".repeat(129)];
        match build_manifest(vec![e], make_shard_id(), 0) {
            Err(ManifestError::MalformedEntry { reason, .. }) => {
                assert!(reason.contains("129"), "{reason}")
            }
            other => panic!("expected MalformedEntry, got {other:?}"),
        }
        // 128 bytes is exactly at the cap and fine.
        let mut ok = make_entry("doc-a");
        ok.anchors = vec!["x".repeat(128)];
        build_manifest(vec![ok], make_shard_id(), 0).unwrap();
    }

    #[test]
    fn duplicate_doc_id_rejected() {
        let entries = vec![make_entry("doc-a"), make_entry("doc-a")];
        assert!(matches!(
            build_manifest(entries, make_shard_id(), 0),
            Err(ManifestError::DuplicateDocId(_))
        ));
    }

    #[test]
    fn empty_entry_set_rejected() {
        assert!(matches!(
            build_manifest(vec![], make_shard_id(), 0),
            Err(ManifestError::EmptyEntrySet)
        ));
    }

    #[test]
    fn inclusion_proof_roundtrip() {
        let m = make_manifest(16);
        let clock = ScriptedClock::starting_at(0);
        for i in 0..16 {
            let p = m.prove(&format!("doc-{i:05}"));
            assert_eq!(p.kind, ProofKind::Inclusion);
            let check = verify_proof(
                &m.root,
                &ProofEnvelope::Single(p),
                &ProofBudget::default(),
                &clock,
                None,
            )
            .unwrap();
            assert!(check.valid);
            assert!(!check.timed_out);
        }
    }

    #[test]
    fn non_inclusion_proof_roundtrip_with_linear_scan_oracle() {
        let m = make_manifest(16);
        let clock = ScriptedClock::starting_at(0);
        let absent = "doc-unseen";
        // Oracle: linear scan confirms absence before trusting the proof.
        assert!(m.entries.iter().all(|e| e.doc_id != absent));
        let p = m.prove(absent);
        assert_eq!(p.kind, ProofKind::NonInclusion);
        assert!(p.leaf_hash.is_none());
        let check = verify_proof(
            &m.root,
            &ProofEnvelope::Single(p),
            &ProofBudget::default(),
            &clock,
            None,
        )
        .unwrap();
        assert!(check.valid);
    }

    #[test]
    fn proof_against_wrong_root_fails() {
        let m = make_manifest(8);
        let other = make_manifest(9);
        let clock = ScriptedClock::starting_at(0);
        let p = m.prove("doc-00003");
        let check = verify_proof(
            &other.root,
            &ProofEnvelope::Single(p),
            &ProofBudget::default(),
            &clock,
            None,
        )
        .unwrap();
        assert!(!check.valid);
    }

    #[test]
    fn proof_wire_roundtrip() {
        let m = make_manifest(32);
        for doc in ["doc-00007", "doc-missing"] {
            let p = m.prove(doc);
            let bytes = p.to_bytes();
            assert_eq!(bytes.len(), p.size_bytes);
            match ProofEnvelope::from_bytes(&bytes).unwrap() {
                ProofEnvelope::Single(back) => assert_eq!(back, p),
                other => panic!("expected single proof, got {other:?}"),
            }
        }
    }

    #[test]
    fn truncated_proof_is_malformed() {
        let m = make_manifest(8);
        let bytes = m.prove("doc-00001").to_bytes();
        for cut in [0, 1, 3, 40, bytes.len() - 1] {
            assert!(
                matches!(
                    ProofEnvelope::from_bytes(&bytes[..cut]),
                    Err(ManifestError::MalformedProof(_))
                ),
                "cut at {cut} should be malformed"
            );
        }
    }

    #[test]
    fn injected_delay_marks_timeout() {
        let m = make_manifest(4);
        let clock = ScriptedClock::starting_at(10_000);
        let p = ProofEnvelope::Single(m.prove("doc-00000"));
        let check = verify_proof(&m.root, &p, &ProofBudget::default(), &clock, Some(350)).unwrap();
        assert!(check.valid, "slow verification still completes");
        assert!(check.timed_out);
        assert_eq!(check.elapsed_ms, 350);
        let fast = verify_proof(&m.root, &p, &ProofBudget::default(), &clock, Some(300)).unwrap();
        assert!(!fast.timed_out, "budget boundary is inclusive");
    }

    #[test]
    fn multiproof_covers_mixed_keys_and_is_smaller_than_singles() {
        let m = make_manifest(1024);
        let clock = ScriptedClock::starting_at(0);
        let ids = [
            "doc-00000", "doc-00100", "doc-00200", "doc-00300", "doc-00400", "doc-00500",
            "doc-absent-1", "doc-absent-2",
        ];
        let multi = m.prove_multi(&ids).unwrap();
        let check = verify_proof(
            &m.root,
            &ProofEnvelope::Multi(multi.clone()),
            &ProofBudget::default(),
            &clock,
            None,
        )
        .unwrap();
        assert!(check.valid);
        let single_sum: usize = ids.iter().map(|d| m.prove(d).size_bytes).sum();
        assert!(
            multi.size_bytes < single_sum,
            "multiproof {} should beat singles {}",
            multi.size_bytes,
            single_sum
        );
    }

    #[test]
    fn singleton_multiproof_matches_single_proof_modulo_kind_byte() {
        let m = make_manifest(64);
        for doc in ["doc-00042", "doc-not-there"] {
            let single = m.prove(doc).to_bytes();
            let multi = m.prove_multi(&[doc]).unwrap().to_bytes();
            assert_eq!(single.len(), multi.len());
            assert_ne!(single[1], multi[1], "kind byte differs");
            assert_eq!(single[..1], multi[..1]);
            assert_eq!(single[2..], multi[2..], "payload is byte-identical");
        }
    }

    #[test]
    fn multiproof_tampered_leaf_fails() {
        let m = make_manifest(64);
        let clock = ScriptedClock::starting_at(0);
        let mut multi = m.prove_multi(&["doc-00001", "doc-00002"]).unwrap();
        let mut leaf = multi.leaves[0].unwrap();
        leaf.0[5] ^= 0xff;
        multi.leaves[0] = Some(leaf);
        let check = verify_proof(
            &m.root,
            &ProofEnvelope::Multi(multi),
            &ProofBudget::default(),
            &clock,
            None,
        )
        .unwrap();
        assert!(!check.valid);
    }

    #[test]
    fn multiproof_agrees_with_single_proof_conjunction() {
        // Random key sets (present + absent mixed) on a mid-size manifest:
        // the multiproof verdict must equal the conjunction of singles.
        let m = make_manifest(512);
        let clock = ScriptedClock::starting_at(0);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..32 {
            let n = rng.gen_range(1..=16);
            let ids: Vec<String> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.7) {
                        format!("doc-{:05}", rng.gen_range(0..512))
                    } else {
                        format!("ghost-{}", rng.gen_range(0..1000))
                    }
                })
                .collect();
            let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
            let multi = m.prove_multi(&id_refs).unwrap();
            let singles_ok = ids.iter().all(|d| {
                let p = m.prove(d);
                verify_proof(
                    &m.root,
                    &ProofEnvelope::Single(p),
                    &ProofBudget::default(),
                    &clock,
                    None,
                )
                .unwrap()
                .valid
            });
            let single_sum: usize = {
                let mut uniq: Vec<&String> = ids.iter().collect();
                uniq.sort();
                uniq.dedup();
                uniq.iter().map(|d| m.prove(d).size_bytes).sum()
            };
            assert!(multi.size_bytes <= single_sum);
            let multi_ok = verify_proof(
                &m.root,
                &ProofEnvelope::Multi(multi),
                &ProofBudget::default(),
                &clock,
                None,
            )
            .unwrap()
            .valid;
            assert_eq!(multi_ok, singles_ok);
        }
    }

    #[test]
    fn flipping_any_committed_field_changes_root() {
        let base = make_manifest(8);
        let mutations: Vec<Box<dyn Fn(&mut DocumentEntry)>> = vec![
            Box::new(|e| e.version_hash.0[0] ^= 1),
            Box::new(|e| e.license.terms_id.push('X')),
            Box::new(|e| e.license.ttl_expiry_ms += 1),
            Box::new(|e| e.anchors.push("extra".to_string())),
            Box::new(|e| e.trust_tier += 1),
            Box::new(|e| e.issuer.push('Y')),
            Box::new(|e| e.author.push('Z')),
        ];
        for i in 0..base.entries.len() {
            for (mi, mutate) in mutations.iter().enumerate() {
                let mut entries = base.entries.clone();
                mutate(&mut entries[i]);
                let m2 = build_manifest(entries, make_shard_id(), 0).unwrap();
                assert_ne!(
                    m2.root, base.root,
                    "mutation {mi} on entry {i} must change the root"
                );
            }
        }
    }

    #[test]
    fn update_archives_previous_root() {
        let m1 = make_manifest(4);
        let mut entries = m1.entries.clone();
        entries.push(make_entry("doc-new"));
        let m2 = m1.update(entries, 1_800_000_000_000).unwrap();
        assert_ne!(m1.root, m2.root);
        assert_eq!(m2.superseded_roots.len(), 1);
        assert_eq!(m2.superseded_roots[0].root, m1.root);
        assert_eq!(m2.superseded_roots[0].sealed_at_ms, m1.sealed_at_ms);
    }

    #[test]
    fn manifest_json_roundtrip_checks_root() {
        let m = make_manifest(8);
        let json = String::from_utf8(m.to_canonical_json().unwrap()).unwrap();
        let back = ShardManifest::from_json(&json).unwrap();
        assert_eq!(back.root, m.root);
        assert!(back.contains("doc-00003"));
        // Corrupt the stored root → load must fail.
        let bad = json.replace(&m.root.to_hex(), &Digest::ZERO.to_hex());
        assert!(matches!(
            ShardManifest::from_json(&bad),
            Err(ManifestError::RootMismatch { .. })
        ));
    }

    #[test]
    fn anchor_roundtrip_and_revoked_signer_rejected() {
        let m = make_manifest(4);
        let signer = KeyHandle::from_seed("anchor-key", SigAlg::Ed25519, &[5u8; 32]).unwrap();
        let mut sink = MemAnchorSink::default();
        let rec = anchor_root(&m, &signer, &mut sink, |_| false, 1_700_000_000_000).unwrap();
        assert_eq!(rec.seq, 0);
        let mut trust = TrustStore::new();
        trust.add(signer.export_public(None, None)).unwrap();
        assert!(verify_anchor(&rec, &trust));
        let mut tampered = rec.clone();
        tampered.anchored_at_ms += 1;
        assert!(!verify_anchor(&tampered, &trust));

        match anchor_root(&m, &signer, &mut sink, |kid| kid == "anchor-key", 0) {
            Err(ManifestError::SignerRevoked(k)) => assert_eq!(k, "anchor-key"),
            other => panic!("expected SignerRevoked, got {other:?}"),
        }
        assert_eq!(sink.lines.len(), 1, "failed anchor writes nothing");
    }

    #[test]
    fn unwritable_sink_reports_substrate_failure() {
        struct BrokenSink;
        impl AnchorSink for BrokenSink {
            fn substrate_id(&self) -> String {
                "mem:broken".to_string()
            }
            fn append(&mut self, _line: &str) -> Result<u64, String> {
                Err("disk full".to_string())
            }
        }
        let m = make_manifest(2);
        let signer = KeyHandle::from_seed("k", SigAlg::Ed25519, &[5u8; 32]).unwrap();
        assert!(matches!(
            anchor_root(&m, &signer, &mut BrokenSink, |_| false, 0),
            Err(ManifestError::SubstrateWriteFailure(_))
        ));
    }

    #[test]
    fn file_anchor_sink_sequences_monotonically() {
        let dir = std::env::temp_dir().join(format!("anchors-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("anchors.jsonl");
        let _ = std::fs::remove_file(&path);
        let mut sink = FileAnchorSink::new(&path);
        assert_eq!(sink.append("{\"a\":1}").unwrap(), 0);
        assert_eq!(sink.append("{\"a\":2}").unwrap(), 1);
        assert_eq!(sink.append("{\"a\":3}").unwrap(), 2);
        std::fs::remove_file(&path).unwrap();
    }
}
