//! Key revocation notices, substrate mirroring, and dual-channel
//! verification status.
//!
//! Revocations are scoped by key id and time window and recorded in an
//! append-only stream. A local stream mirrors an external substrate feed
//! (modeled as sequence-numbered events); verification consults both
//! channels and fails closed: a key is treated as usable only when both
//! channels agree it is unrevoked, the mirror is fresh (within the 5-minute
//! SLO), and both channels could actually be read. Every other combination
//! degrades to a revoked-pending or revoked status, never to valid.
//!
//! Revoking a window freezes promotions and flags affected receipts for
//! review; each flagged receipt either returns to valid under a fresh
//! signature or is marked unreissuable with a recorded rationale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::clock::Clock;
use crate::hash::{hash_domain, Digest};
use crate::keys::TrustStore;

/// Domain tag for KRN entry content addressing.
const KRN_ENTRY_TAG: &str = "krn:entry:v1";

/// Maximum tolerated mirror lag before verification fails closed.
pub const MIRROR_FRESHNESS_SLO_MS: u64 = 5 * 60 * 1000;

/// Scheduled reconciliation interval between the two channels.
pub const RECONCILE_INTERVAL_MS: u64 = 15 * 60 * 1000;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Errors raised by revocation bookkeeping.
#[derive(Debug, Error)]
pub enum KrnError {
    /// The key id is not present in the trust store.
    #[error("unknown key id `{kid}`")]
    UnknownKid { kid: String },
    /// A revocation window ends before it starts.
    #[error("revocation window start {t0} is after end {t1}")]
    InvalidWindow { t0: u64, t1: u64 },
    /// An entry's stored hash does not match its content.
    #[error("KRN entry hash mismatch for kid `{kid}`")]
    HashMismatch { kid: String },
    /// A receipt id is not flagged in this revocation case.
    #[error("receipt `{receipt_id}` is not flagged in this revocation case")]
    NotFlagged { receipt_id: String },
    /// A flagged receipt's status only moves forward.
    #[error("receipt `{receipt_id}` is {status:?}; only under-review receipts can transition")]
    NotUnderReview { receipt_id: String, status: VerificationStatus },
    /// Substrate events arrived with a sequence gap.
    #[error("substrate sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    /// Serialization failure.
    #[error("canonicalization failed: {0}")]
    Canon(#[from] canon::CanonError),
    /// A stream line could not be parsed.
    #[error("malformed KRN stream line {line}: {reason}")]
    MalformedStream { line: usize, reason: String },
}

// ---------------------------------------------------------------------------
// Entries and streams
// ---------------------------------------------------------------------------

/// Which channel recorded a revocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrnSource {
    Local,
    Substrate,
}

/// Reference to the substrate event a mirrored entry came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubstrateRef {
    pub seq: u64,
    pub event_id: String,
}

/// One revocation notice: a key id and the time window of signatures it
/// invalidates. Content-addressed; the stored hash excludes itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrnEntry {
    pub kid: String,
    /// Start of the revocation window (epoch ms, inclusive).
    pub window_start_ms: u64,
    /// End of the revocation window (epoch ms, inclusive);
    /// `u64::MAX` means open-ended.
    pub window_end_ms: u64,
    pub source: KrnSource,
    pub entry_hash: Digest,
    pub recorded_at_ms: u64,
    /// Substrate event reference; absent for locally originated entries.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linkage: Option<SubstrateRef>,
}

impl KrnEntry {
    /// Build and content-address a new entry.
    pub fn new(
        kid: &str,
        window: (u64, u64),
        source: KrnSource,
        recorded_at_ms: u64,
        linkage: Option<SubstrateRef>,
    ) -> Result<KrnEntry, KrnError> {
        let (t0, t1) = window;
        if t0 > t1 {
            return Err(KrnError::InvalidWindow { t0, t1 });
        }
        let mut entry = KrnEntry {
            kid: kid.to_string(),
            window_start_ms: t0,
            window_end_ms: t1,
            source,
            entry_hash: Digest::ZERO,
            recorded_at_ms,
            linkage,
        };
        entry.entry_hash = entry.compute_hash()?;
        Ok(entry)
    }

    /// Content address over every field except `entry_hash`.
    pub fn compute_hash(&self) -> Result<Digest, KrnError> {
        let mut value = serde_json::to_value(self).map_err(canon::CanonError::from)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("entry_hash");
        }
        let bytes = canon::canonical_value_bytes(&value)?;
        Ok(hash_domain(KRN_ENTRY_TAG, &[&bytes]))
    }

    /// True when the stored hash matches the content.
    pub fn verify_hash(&self) -> Result<bool, KrnError> {
        Ok(self.entry_hash == self.compute_hash()?)
    }

    /// True when a signature made at `t` falls inside this entry's window.
    pub fn covers(&self, kid: &str, t: u64) -> bool {
        self.kid == kid && (self.window_start_ms..=self.window_end_ms).contains(&t)
    }
}

/// An append-only stream of revocation notices. Entries are validated on
/// append and never removed or mutated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KrnStream {
    entries: Vec<KrnEntry>,
}

impl KrnStream {
    pub fn new() -> KrnStream {
        KrnStream::default()
    }

    /// Append a validated entry.
    pub fn append(&mut self, entry: KrnEntry) -> Result<(), KrnError> {
        if entry.window_start_ms > entry.window_end_ms {
            return Err(KrnError::InvalidWindow {
                t0: entry.window_start_ms,
                t1: entry.window_end_ms,
            });
        }
        if !entry.verify_hash()? {
            return Err(KrnError::HashMismatch { kid: entry.kid.clone() });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[KrnEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when any entry revokes `kid` at instant `t`.
    pub fn is_revoked_at(&self, kid: &str, t: u64) -> bool {
        self.entries.iter().any(|e| e.covers(kid, t))
    }

    /// True when a mirrored entry with this linkage already exists.
    pub fn has_linkage(&self, linkage: &SubstrateRef) -> bool {
        self.entries.iter().any(|e| e.linkage.as_ref() == Some(linkage))
    }

    /// Serialize as JSON lines, one entry per line.
    pub fn to_jsonl(&self) -> Result<String, KrnError> {
        let mut out = String::new();
        for e in &self.entries {
            let bytes = canon::canonical_bytes(e)?;
            out.push_str(std::str::from_utf8(&bytes).expect("canonical JSON is UTF-8"));
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse a JSON-lines stream, validating every entry hash.
    pub fn from_jsonl(text: &str) -> Result<KrnStream, KrnError> {
        let mut stream = KrnStream::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: KrnEntry =
                serde_json::from_str(line).map_err(|e| KrnError::MalformedStream {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            stream.append(entry)?;
        }
        Ok(stream)
    }
}

// ---------------------------------------------------------------------------
// Mirror state
// ---------------------------------------------------------------------------

/// Cursor and freshness of the substrate mirror.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorState {
    /// Last time a gap-free sync completed (epoch ms).
    pub last_sync_ms: u64,
    /// Highest substrate sequence number applied.
    pub cursor: u64,
}

impl MirrorState {
    /// Mirror lag at `now_ms`; non-negative by construction.
    pub fn lag_ms(&self, now_ms: u64) -> u64 {
        now_ms.saturating_sub(self.last_sync_ms)
    }

    /// True when the mirror is within the freshness SLO.
    pub fn is_fresh(&self, now_ms: u64) -> bool {
        self.lag_ms(now_ms) <= MIRROR_FRESHNESS_SLO_MS
    }
}

// ---------------------------------------------------------------------------
// Dual-channel status
// ---------------------------------------------------------------------------

/// Verification status of a key (or of a receipt flagged by revocation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerificationStatus {
    Valid,
    Revoked,
    RevokedPendingMirror,
    UnderReview,
    Unreissuable,
}

/// A status with the reason it was assigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub status: VerificationStatus,
    pub reason: String,
}

/// Adjudicate the dual-channel revocation status of `kid` for a signature
/// made at `signed_at_ms`.
///
/// `None` for either channel means that channel could not be fetched.
///// VALID requires all of: both channels readable, unrevoked in both at the
/// signing instant, and mirror lag within the 5-minute SLO. Agreement on
/// revocation yields REVOKED; disagreement (or any ambiguity: fetch
/// failure, stale mirror) fails closed as REVOKED_PENDING_MIRROR.
pub fn check_dual(
    kid: &str,
    signed_at_ms: u64,
    local: Option<&KrnStream>,
    substrate: Option<&KrnStream>,
    mirror: &MirrorState,
    now_ms: u64,
) -> StatusReport {
    let (Some(local), Some(substrate)) = (local, substrate) else {
        return StatusReport {
            status: VerificationStatus::RevokedPendingMirror,
            reason: "fetch_failure: a revocation channel was unreadable; failing closed"
                .to_string(),
        };
    };

    let revoked_local = local.is_revoked_at(kid, signed_at_ms);
    let revoked_substrate = substrate.is_revoked_at(kid, signed_at_ms);

    match (revoked_local, revoked_substrate) {
        (true, true) => StatusReport {
            status: VerificationStatus::Revoked,
            reason: format!("kid `{kid}` revoked in both channels at {signed_at_ms}"),
        },
        (true, false) | (false, true) => {
            let which = if revoked_local { "local" } else { "substrate" };
            StatusReport {
                status: VerificationStatus::RevokedPendingMirror,
                reason: format!(
                    "kid `{kid}` revoked in the {which} channel only; failing closed pending mirror agreement"
                ),
            }
        }
        (false, false) => {
            if mirror.is_fresh(now_ms) {
                StatusReport {
                    status: VerificationStatus::Valid,
                    reason: format!(
                        "kid `{kid}` unrevoked in both channels; mirror lag {} ms within SLO",
                        mirror.lag_ms(now_ms)
                    ),
                }
            } else {
                StatusReport {
                    status: VerificationStatus::RevokedPendingMirror,
                    reason: format!(
                        "stale_mirror: lag {} ms exceeds the {} ms SLO; failing closed",
                        mirror.lag_ms(now_ms),
                        MIRROR_FRESHNESS_SLO_MS
                    ),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Mirroring
// ---------------------------------------------------------------------------

/// One revocation event from the substrate feed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstrateEvent {
    pub seq: u64,
    pub event_id: String,
    pub kid: String,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
}

/// Outcome of one mirror pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    /// Entry hashes appended this pass, in order.
    pub appended: Vec<Digest>,
    /// Sequence gaps encountered (expected, found). Events after a gap are
    /// withheld until backfill.
    pub gaps: Vec<(u64, u64)>,
    /// Cursor after the pass.
    pub cursor: u64,
    /// Whether `last_sync` advanced (no gap encountered).
    pub advanced: bool,
}

/// Mirror substrate revocation events into the local stream.
///
/// Events must arrive in ascending sequence order. Each new event appends
/// a linked entry; replays deduplicate by linkage. A sequence gap is
/// recorded, later events are withheld, and `last_sync` does not advance
/// until the gap is backfilled — the growing lag eventually trips the
/// freshness SLO, which is the fail-closed backstop.
pub fn mirror_sync(
    events: &[SubstrateEvent],
    local: &mut KrnStream,
    mirror: &mut MirrorState,
    clock: &dyn Clock,
) -> Result<SyncReport, KrnError> {
    let mut report = SyncReport { cursor: mirror.cursor, ..SyncReport::default() };

    for event in events {
        if event.seq > mirror.cursor + 1 {
            report.gaps.push((mirror.cursor + 1, event.seq));
            break;
        }
        let linkage = SubstrateRef { seq: event.seq, event_id: event.event_id.clone() };
        if !local.has_linkage(&linkage) {
            let entry = KrnEntry::new(
                &event.kid,
                (event.window_start_ms, event.window_end_ms),
                KrnSource::Substrate,
                clock.now_ms(),
                Some(linkage),
            )?;
            report.appended.push(entry.entry_hash);
            local.append(entry)?;
        }
        mirror.cursor = mirror.cursor.max(event.seq);
    }

    report.cursor = mirror.cursor;
    report.advanced = report.gaps.is_empty();
    if report.advanced {
        mirror.last_sync_ms = clock.now_ms();
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Window revocation and receipt review
// ---------------------------------------------------------------------------

/// Minimal view of a stored receipt needed for revocation scans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptIndexEntry {
    pub receipt_id: String,
    pub kid: String,
    pub signed_at_ms: u64,
}

/// An open revocation case: the window, the frozen-promotions flag, and
/// the review status of every affected receipt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevocationCase {
    pub kid: String,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
    /// Always set when a case opens: promotions freeze immediately.
    pub promotions_frozen: bool,
    /// The local KRN entry recording this revocation.
    pub entry: KrnEntry,
    /// Review status per affected receipt id.
    pub flagged: BTreeMap<String, StatusReport>,
}

impl RevocationCase {
    /// Receipt ids currently flagged, in id order.
    pub fn flagged_ids(&self) -> Vec<&str> {
        self.flagged.keys().map(String::as_str).collect()
    }

    /// Mark a flagged receipt re-attested under a fresh signature. Only
    /// under-review receipts can transition; statuses never move backwards.
    pub fn reattest(&mut self, receipt_id: &str, new_kid: &str) -> Result<(), KrnError> {
        let report = self
            .flagged
            .get_mut(receipt_id)
            .ok_or_else(|| KrnError::NotFlagged { receipt_id: receipt_id.to_string() })?;
        if report.status != VerificationStatus::UnderReview {
            return Err(KrnError::NotUnderReview {
                receipt_id: receipt_id.to_string(),
                status: report.status,
            });
        }
        *report = StatusReport {
            status: VerificationStatus::Valid,
            reason: format!("re-attested and re-signed under kid `{new_kid}`"),
        };
        Ok(())
    }

    /// Mark a flagged receipt permanently unreissuable, with the rationale
    /// recorded.
    pub fn mark_unreissuable(
        &mut self,
        receipt_id: &str,
        rationale: &str,
    ) -> Result<(), KrnError> {
        let report = self
            .flagged
            .get_mut(receipt_id)
            .ok_or_else(|| KrnError::NotFlagged { receipt_id: receipt_id.to_string() })?;
        if report.status != VerificationStatus::UnderReview {
            return Err(KrnError::NotUnderReview {
                receipt_id: receipt_id.to_string(),
                status: report.status,
            });
        }
        *report = StatusReport {
            status: VerificationStatus::Unreissuable,
            reason: format!("unreissuable: {rationale}"),
        };
        Ok(())
    }
}

/// Revoke `kid` for the window `[t0, t1]`: append a local KRN entry,
/// freeze promotions, and flag every receipt signed by that key inside the
/// window as under review.
pub fn revoke_window(
    kid: &str,
    t0: u64,
    t1: u64,
    receipts: &[ReceiptIndexEntry],
    trust: &TrustStore,
    local: &mut KrnStream,
    now_ms: u64,
) -> Result<RevocationCase, KrnError> {
    if trust.get(kid).is_none() {
        return Err(KrnError::UnknownKid { kid: kid.to_string() });
    }
    let entry = KrnEntry::new(kid, (t0, t1), KrnSource::Local, now_ms, None)?;
    local.append(entry.clone())?;

    let flagged: BTreeMap<String, StatusReport> = receipts
        .iter()
        .filter(|r| r.kid == kid && (t0..=t1).contains(&r.signed_at_ms))
        .map(|r| {
            (
                r.receipt_id.clone(),
                StatusReport {
                    status: VerificationStatus::UnderReview,
                    reason: format!(
                        "signed by revoked kid `{kid}` at {} inside [{t0}, {t1}]",
                        r.signed_at_ms
                    ),
                },
            )
        })
        .collect();

    Ok(RevocationCase {
        kid: kid.to_string(),
        window_start_ms: t0,
        window_end_ms: t1,
        promotions_frozen: true,
        entry,
        flagged,
    })
}

// ---------------------------------------------------------------------------
// Reconciliation
// ---------------------------------------------------------------------------

/// Direction of a channel mismatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftDirection {
    /// Present in the substrate, missing locally: backfilled automatically.
    SubstrateOnly,
    /// Present locally, unknown to the substrate: left for operator review.
    LocalOnly,
}

/// One mismatch between the channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub direction: DriftDirection,
    pub kid: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linkage: Option<SubstrateRef>,
    pub detail: String,
}

/// An incident record emitted for a drift finding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub incident_id: String,
    pub opened_at_ms: u64,
    /// Digest of the key-promotion event for the affected kid, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub promotion_digest: Option<Digest>,
    pub detail: String,
}

/// Outcome of a reconciliation pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub drift: Vec<DriftEntry>,
    pub incidents: Vec<IncidentRecord>,
    /// Number of substrate-only entries backfilled into the local stream.
    pub backfilled: usize,
    /// When the next scheduled pass is due.
    pub next_due_ms: u64,
}

/// Compare the channels by linkage, backfill substrate-only revocations,
/// and flag local-only ones for operator review. Each mismatch emits an
/// incident record referencing the kid's promotion digest when available.
pub fn reconcile(
    local: &mut KrnStream,
    substrate: &KrnStream,
    promotion_digests: &BTreeMap<String, Digest>,
    now_ms: u64,
) -> Result<DriftReport, KrnError> {
    let mut report = DriftReport { next_due_ms: now_ms + RECONCILE_INTERVAL_MS, ..Default::default() };
    let mut incident_seq = 0u32;

    let mut emit_incident = |report: &mut DriftReport, kid: &str, detail: String| {
        incident_seq += 1;
        report.incidents.push(IncidentRecord {
            incident_id: format!("krn-drift-{now_ms}-{incident_seq}"),
            opened_at_ms: now_ms,
            promotion_digest: promotion_digests.get(kid).copied(),
            detail,
        });
    };

    // Substrate-only: any substrate linkage unseen locally is backfilled.
    let substrate_only: Vec<KrnEntry> = substrate
        .entries()
        .iter()
        .filter(|e| e.linkage.as_ref().is_some_and(|l| !local.has_linkage(l)))
        .cloned()
        .collect();
    for entry in substrate_only {
        let detail = format!(
            "substrate revocation of kid `{}` (seq {}) missing locally; backfilled",
            entry.kid,
            entry.linkage.as_ref().map(|l| l.seq).unwrap_or_default()
        );
        report.drift.push(DriftEntry {
            direction: DriftDirection::SubstrateOnly,
            kid: entry.kid.clone(),
            linkage: entry.linkage.clone(),
            detail: detail.clone(),
        });
        emit_incident(&mut report, &entry.kid.clone(), detail);
        local.append(entry)?;
        report.backfilled += 1;
    }

    // Local-only: a locally originated revocation with no substrate entry
    // covering the same kid and window. Not auto-resolved.
    for entry in local.entries() {
        if entry.source != KrnSource::Local {
            continue;
        }
        let corroborated = substrate.entries().iter().any(|s| {
            s.kid == entry.kid
                && s.window_start_ms <= entry.window_start_ms
                && s.window_end_ms >= entry.window_end_ms
        });
        if !corroborated {
            let detail = format!(
                "local revocation of kid `{}` [{}, {}] has no substrate counterpart; operator review required",
                entry.kid, entry.window_start_ms, entry.window_end_ms
            );
            report.drift.push(DriftEntry {
                direction: DriftDirection::LocalOnly,
                kid: entry.kid.clone(),
                linkage: None,
                detail: detail.clone(),
            });
            emit_incident(&mut report, &entry.kid, detail);
        }
    }

    Ok(report)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ScriptedClock;
    use crate::keys::{KeyHandle, SigAlg, TrustStore};

    const T_SIGNED: u64 = 1_700_000_000_000;
    const MIN: u64 = 60 * 1000;

    fn stream_with(kid: &str, window: (u64, u64)) -> KrnStream {
        let mut s = KrnStream::new();
        s.append(KrnEntry::new(kid, window, KrnSource::Local, T_SIGNED, None).unwrap())
            .unwrap();
        s
    }

    fn trust_with(kid: &str) -> TrustStore {
        let mut trust = TrustStore::new();
        let key = KeyHandle::from_seed(kid, SigAlg::Ed25519, &[7u8; 32]).unwrap();
        trust.add(key.export_public(None, None)).unwrap();
        trust
    }

    // -- entries and streams -------------------------------------------------

    #[test]
    fn entry_hash_covers_content_and_excludes_itself() {
        let entry =
            KrnEntry::new("kid-1", (10, 20), KrnSource::Local, 1000, None).unwrap();
        assert!(entry.verify_hash().unwrap());

        let mut tampered = entry.clone();
        tampered.window_end_ms = 21;
        assert!(!tampered.verify_hash().unwrap());

        let mut rehashed = entry.clone();
        rehashed.entry_hash = Digest::ZERO;
        assert_eq!(rehashed.compute_hash().unwrap(), entry.entry_hash);
    }

    #[test]
    fn inverted_window_is_rejected() {
        assert!(matches!(
            KrnEntry::new("kid-1", (20, 10), KrnSource::Local, 1000, None),
            Err(KrnError::InvalidWindow { t0: 20, t1: 10 })
        ));
    }

    #[test]
    fn tampered_entry_cannot_be_appended() {
        let mut entry =
            KrnEntry::new("kid-1", (10, 20), KrnSource::Local, 1000, None).unwrap();
        entry.kid = "kid-2".to_string();
        let mut stream = KrnStream::new();
        assert!(matches!(stream.append(entry), Err(KrnError::HashMismatch { .. })));
        assert!(stream.is_empty());
    }

    #[test]
    fn revocation_window_is_inclusive() {
        let stream = stream_with("kid-1", (100, 200));
        assert!(stream.is_revoked_at("kid-1", 100));
        assert!(stream.is_revoked_at("kid-1", 200));
        assert!(!stream.is_revoked_at("kid-1", 99));
        assert!(!stream.is_revoked_at("kid-1", 201));
        assert!(!stream.is_revoked_at("kid-2", 150));
    }

    #[test]
    fn jsonl_roundtrip_preserves_entries() {
        let mut stream = KrnStream::new();
        stream
            .append(KrnEntry::new("kid-1", (1, 2), KrnSource::Local, 10, None).unwrap())
            .unwrap();
        stream
            .append(
                KrnEntry::new(
                    "kid-2",
                    (3, u64::MAX),
                    KrnSource::Substrate,
                    20,
                    Some(SubstrateRef { seq: 7, event_id: "ev-7".to_string() }),
                )
                .unwrap(),
            )
            .unwrap();
        let text = stream.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = KrnStream::from_jsonl(&text).unwrap();
        assert_eq!(back, stream);

        assert!(matches!(
            KrnStream::from_jsonl("{not json"),
            Err(KrnError::MalformedStream { line: 1, .. })
        ));
    }

    // -- dual-channel table ----------------------------------------------------

    #[test]
    fn dual_channel_table_has_exactly_one_valid_cell() {
        let kid = "kid-1";
        let revoked = stream_with(kid, (T_SIGNED - 1000, T_SIGNED + 1000));
        let clean = KrnStream::new();
        let now = T_SIGNED + 10 * MIN;

        let mut valid_cells = 0;
        for local_revoked in [false, true] {
            for substrate_revoked in [false, true] {
                for lag_ok in [false, true] {
                    for fetch_ok in [false, true] {
                        let mirror = MirrorState {
                            last_sync_ms: if lag_ok { now - MIN } else { now - 6 * MIN },
                            cursor: 0,
                        };
                        let local_stream = if local_revoked { &revoked } else { &clean };
                        let substrate_stream =
                            if substrate_revoked { &revoked } else { &clean };
                        let (local, substrate) = if fetch_ok {
                            (Some(local_stream), Some(substrate_stream))
                        } else {
                            (Some(local_stream), None)
                        };

                        let report = check_dual(kid, T_SIGNED, local, substrate, &mirror, now);
                        let expected = match (local_revoked, substrate_revoked, lag_ok, fetch_ok)
                        {
                            (false, false, true, true) => VerificationStatus::Valid,
                            (true, true, _, true) => VerificationStatus::Revoked,
                            _ => VerificationStatus::RevokedPendingMirror,
                        };
                        assert_eq!(
                            report.status, expected,
                            "case local={local_revoked} substrate={substrate_revoked} lag_ok={lag_ok} fetch_ok={fetch_ok}: {}",
                            report.reason
                        );
                        if report.status == VerificationStatus::Valid {
                            valid_cells += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(valid_cells, 1, "fail-closed totality: exactly one VALID cell");
    }

    #[test]
    fn worked_status_examples() {
        let kid = "kid-1";
        let clean = KrnStream::new();
        let revoked = stream_with(kid, (T_SIGNED - 1000, T_SIGNED + 1000));
        let now = T_SIGNED;

        let fresh = MirrorState { last_sync_ms: now - MIN, cursor: 0 };
        let report = check_dual(kid, T_SIGNED, Some(&clean), Some(&clean), &fresh, now);
        assert_eq!(report.status, VerificationStatus::Valid);

        let report = check_dual(kid, T_SIGNED, Some(&clean), Some(&revoked), &fresh, now);
        assert_eq!(report.status, VerificationStatus::RevokedPendingMirror);

        let stale = MirrorState { last_sync_ms: now - 6 * MIN, cursor: 0 };
        let report = check_dual(kid, T_SIGNED, Some(&clean), Some(&clean), &stale, now);
        assert_eq!(report.status, VerificationStatus::RevokedPendingMirror);
        assert!(report.reason.contains("stale_mirror"));

        // The SLO boundary itself is fresh ("within 5 minutes").
        let boundary = MirrorState { last_sync_ms: now - MIRROR_FRESHNESS_SLO_MS, cursor: 0 };
        let report = check_dual(kid, T_SIGNED, Some(&clean), Some(&clean), &boundary, now);
        assert_eq!(report.status, VerificationStatus::Valid);
    }

    #[test]
    fn signatures_outside_the_window_stay_valid() {
        let kid = "kid-1";
        let revoked = stream_with(kid, (T_SIGNED + 1000, u64::MAX));
        let fresh = MirrorState { last_sync_ms: T_SIGNED, cursor: 0 };
        // Signed before the window opened: both channels agree unrevoked.
        let report =
            check_dual(kid, T_SIGNED, Some(&revoked), Some(&revoked), &fresh, T_SIGNED);
        assert_eq!(report.status, VerificationStatus::Valid);
    }

    // -- mirroring ---------------------------------------------------------------

    fn event(seq: u64, kid: &str) -> SubstrateEvent {
        SubstrateEvent {
            seq,
            event_id: format!("ev-{seq}"),
            kid: kid.to_string(),
            window_start_ms: 0,
            window_end_ms: u64::MAX,
        }
    }

    #[test]
    fn new_events_append_linked_entries() {
        let mut local = KrnStream::new();
        let mut mirror = MirrorState::default();
        let clock = ScriptedClock::starting_at(50_000);

        let events = vec![event(1, "kid-a"), event(2, "kid-b"), event(3, "kid-c")];
        let report = mirror_sync(&events, &mut local, &mut mirror, &clock).unwrap();

        assert_eq!(report.appended.len(), 3);
        assert_eq!(local.len(), 3);
        assert!(report.advanced);
        assert_eq!(mirror.cursor, 3);
        assert_eq!(mirror.last_sync_ms, 50_000);
        for e in local.entries() {
            assert_eq!(e.source, KrnSource::Substrate);
            assert!(e.linkage.is_some());
        }
    }

    #[test]
    fn replay_is_idempotent() {
        let mut local = KrnStream::new();
        let mut mirror = MirrorState::default();
        let clock = ScriptedClock::starting_at(50_000);
        let events = vec![event(1, "kid-a"), event(2, "kid-b")];

        mirror_sync(&events, &mut local, &mut mirror, &clock).unwrap();
        clock.set(60_000);
        let replay = mirror_sync(&events, &mut local, &mut mirror, &clock).unwrap();

        assert!(replay.appended.is_empty(), "no duplicates on replay");
        assert_eq!(local.len(), 2);
        assert_eq!(mirror.cursor, 2);
        assert_eq!(mirror.last_sync_ms, 60_000);
    }

    #[test]
    fn sequence_gap_withholds_later_events_and_freezes_lag() {
        let mut local = KrnStream::new();
        let mut mirror = MirrorState::default();
        let clock = ScriptedClock::starting_at(50_000);

        mirror_sync(&[event(1, "kid-a")], &mut local, &mut mirror, &clock).unwrap();
        assert_eq!(mirror.last_sync_ms, 50_000);

        clock.set(90_000);
        let gapped = mirror_sync(
            &[event(2, "kid-b"), event(4, "kid-d"), event(5, "kid-e")],
            &mut local,
            &mut mirror,
            &clock,
        )
        .unwrap();

        assert_eq!(gapped.appended.len(), 1, "event 2 lands, 4 and 5 withheld");
        assert_eq!(gapped.gaps, vec![(3, 4)]);
        assert!(!gapped.advanced);
        assert_eq!(mirror.cursor, 2);
        assert_eq!(mirror.last_sync_ms, 50_000, "lag frozen until backfill");

        // Backfill arrives: the full suffix now applies and lag recovers.
        clock.set(95_000);
        let healed = mirror_sync(
            &[event(3, "kid-c"), event(4, "kid-d"), event(5, "kid-e")],
            &mut local,
            &mut mirror,
            &clock,
        )
        .unwrap();
        assert_eq!(healed.appended.len(), 3);
        assert!(healed.advanced);
        assert_eq!(mirror.cursor, 5);
        assert_eq!(mirror.last_sync_ms, 95_000);
    }

    // -- window revocation ----------------------------------------------------

    #[test]
    fn exactly_the_in_window_receipts_are_flagged() {
        let kid = "kid-1";
        let trust = trust_with(kid);
        let mut local = KrnStream::new();
        let (t0, t1) = (10_000u64, 20_000u64);

        // 10 receipts inside the window, 4 outside (wrong time or wrong key).
        let mut receipts: Vec<ReceiptIndexEntry> = (0..10)
            .map(|i| ReceiptIndexEntry {
                receipt_id: format!("r-in-{i}"),
                kid: kid.to_string(),
                signed_at_ms: t0 + 1000 * i as u64,
            })
            .collect();
        receipts.push(ReceiptIndexEntry {
            receipt_id: "r-before".to_string(),
            kid: kid.to_string(),
            signed_at_ms: t0 - 1,
        });
        receipts.push(ReceiptIndexEntry {
            receipt_id: "r-after".to_string(),
            kid: kid.to_string(),
            signed_at_ms: t1 + 1,
        });
        receipts.push(ReceiptIndexEntry {
            receipt_id: "r-other-key".to_string(),
            kid: "kid-2".to_string(),
            signed_at_ms: t0 + 500,
        });
        receipts.push(ReceiptIndexEntry {
            receipt_id: "r-other-key-2".to_string(),
            kid: "kid-2".to_string(),
            signed_at_ms: t1,
        });

        // Oracle: a plain linear scan over (kid, signed_at).
        let expected: Vec<&str> = receipts
            .iter()
            .filter(|r| r.kid == kid && r.signed_at_ms >= t0 && r.signed_at_ms <= t1)
            .map(|r| r.receipt_id.as_str())
            .collect();
        assert_eq!(expected.len(), 10);

        let case =
            revoke_window(kid, t0, t1, &receipts, &trust, &mut local, 30_000).unwrap();
        assert!(case.promotions_frozen);
        assert_eq!(case.flagged.len(), 10);
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        assert_eq!(case.flagged_ids(), expected_sorted);
        for report in case.flagged.values() {
            assert_eq!(report.status, VerificationStatus::UnderReview);
        }
        assert_eq!(local.len(), 1, "the revocation itself lands in the local KRN");
        assert!(local.is_revoked_at(kid, t0 + 5_000));
    }

    #[test]
    fn unknown_kid_is_rejected() {
        let trust = trust_with("kid-1");
        let mut local = KrnStream::new();
        assert!(matches!(
            revoke_window("kid-ghost", 0, 10, &[], &trust, &mut local, 0),
            Err(KrnError::UnknownKid { .. })
        ));
        assert!(local.is_empty());
    }

    #[test]
    fn review_lifecycle_is_monotone() {
        let kid = "kid-1";
        let trust = trust_with(kid);
        let mut local = KrnStream::new();
        let receipts = vec![
            ReceiptIndexEntry { receipt_id: "r1".into(), kid: kid.into(), signed_at_ms: 15 },
            ReceiptIndexEntry { receipt_id: "r2".into(), kid: kid.into(), signed_at_ms: 16 },
        ];
        let mut case = revoke_window(kid, 10, 20, &receipts, &trust, &mut local, 100).unwrap();

        // Re-attested receipt returns to valid under the new key.
        case.reattest("r1", "kid-next").unwrap();
        assert_eq!(case.flagged["r1"].status, VerificationStatus::Valid);
        assert!(case.flagged["r1"].reason.contains("kid-next"));

        // Missing evidence: unreissuable, rationale recorded.
        case.mark_unreissuable("r2", "evidence shard no longer available").unwrap();
        assert_eq!(case.flagged["r2"].status, VerificationStatus::Unreissuable);
        assert!(case.flagged["r2"].reason.contains("shard"));

        // No path back from unreissuable, and no double transitions.
        assert!(matches!(
            case.reattest("r2", "kid-next"),
            Err(KrnError::NotUnderReview { .. })
        ));
        assert!(matches!(
            case.mark_unreissuable("r1", "x"),
            Err(KrnError::NotUnderReview { .. })
        ));
        assert!(matches!(case.reattest("r-ghost", "k"), Err(KrnError::NotFlagged { .. })));
    }

    // -- reconciliation -----------------------------------------------------------

    #[test]
    fn identical_channels_reconcile_clean() {
        let mut local = KrnStream::new();
        let mut substrate = KrnStream::new();
        let linkage = SubstrateRef { seq: 1, event_id: "ev-1".to_string() };
        let entry = KrnEntry::new(
            "kid-1",
            (0, 10),
            KrnSource::Substrate,
            100,
            Some(linkage),
        )
        .unwrap();
        local.append(entry.clone()).unwrap();
        substrate.append(entry).unwrap();

        let report =
            reconcile(&mut local, &substrate, &BTreeMap::new(), 1_000_000).unwrap();
        assert!(report.drift.is_empty());
        assert!(report.incidents.is_empty());
        assert_eq!(report.backfilled, 0);
        assert_eq!(report.next_due_ms, 1_000_000 + RECONCILE_INTERVAL_MS);
    }

    #[test]
    fn substrate_only_revocation_is_backfilled_with_incident() {
        let mut local = KrnStream::new();
        let mut substrate = KrnStream::new();
        substrate
            .append(
                KrnEntry::new(
                    "kid-1",
                    (0, 10),
                    KrnSource::Substrate,
                    100,
                    Some(SubstrateRef { seq: 9, event_id: "ev-9".to_string() }),
                )
                .unwrap(),
            )
            .unwrap();
        let mut promotions = BTreeMap::new();
        let digest = crate::hash::hash_domain("test:promotion", &[b"kid-1"]);
        promotions.insert("kid-1".to_string(), digest);

        let report = reconcile(&mut local, &substrate, &promotions, 5_000).unwrap();
        assert_eq!(report.backfilled, 1);
        assert_eq!(report.drift.len(), 1);
        assert_eq!(report.drift[0].direction, DriftDirection::SubstrateOnly);
        assert_eq!(report.incidents.len(), 1);
        assert_eq!(report.incidents[0].promotion_digest, Some(digest));
        assert!(local.is_revoked_at("kid-1", 5));

        // A second pass finds nothing: backfill made the channels agree.
        let second = reconcile(&mut local, &substrate, &promotions, 6_000).unwrap();
        assert!(second.drift.is_empty());
    }

    #[test]
    fn local_only_revocation_is_flagged_not_deleted() {
        let mut local = KrnStream::new();
        local
            .append(KrnEntry::new("kid-1", (0, 10), KrnSource::Local, 100, None).unwrap())
            .unwrap();
        let substrate = KrnStream::new();

        let report = reconcile(&mut local, &substrate, &BTreeMap::new(), 5_000).unwrap();
        assert_eq!(report.drift.len(), 1);
        assert_eq!(report.drift[0].direction, DriftDirection::LocalOnly);
        assert!(report.drift[0].detail.contains("operator review"));
        assert_eq!(report.backfilled, 0);
        assert_eq!(local.len(), 1, "append-only: the local entry stays");
    }
}
