//! Answer and promotion receipts: construction, canonical serialization,
//! detached signatures, selective disclosure, and offline verification.
//!
//! A receipt is the portable record of one gated decision: what was
//! answered (by hash), under which policy versions, on which evidence,
//! with which diagnostics, proven against which manifest roots, and
//! signed by whom. Receipts are canonical JSON with a detached signature
//! — the signature field is excluded from the signed span — so any holder
//! can re-serialize and verify offline with nothing but a trust store and
//! revocation log.
//!
//! Disclosure is selective by default: fragments travel as hashes or
//! digests plus selectors, full bodies only in internal-`full` mode, and
//! a PII scan runs before finalization with mask-or-abstain semantics.
//! Promotion receipts bind configuration changes to a t-of-n approval
//! quorum over a single promotion digest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::canonical_bytes;
use crate::clock::ScriptedClock;
use crate::engine::{
    DecisionEvidence, DecisionTrace, EscalationEntry, HistogramBins, JitterDescriptor,
    ReasonCode, ReturnState, VerifierStats,
};
use crate::hash::{hash_domain, Digest};
use crate::keys::{KeyHandle, SigAlg, TrustStore};
use crate::krn::{check_dual, KrnStream, MirrorState, VerificationStatus};
use crate::manifest::{verify_proof, ProofBudget, ProofEnvelope};
use crate::mses::{EvidencePack, JustificationScore, Tier};
use crate::policy::{PiiMode, PolicySnapshot, ScopeReport, TemporalReport, SELECTOR_MAX_BYTES};

/// Domain tag for answer-receipt signatures.
pub const RECEIPT_SIGN_TAG: &str = "receipt:answer:v1";
/// Domain tag for promotion approvals.
pub const PROMOTION_SIGN_TAG: &str = "receipt:promotion:v1";
/// Domain tag for answer hashing.
pub const ANSWER_HASH_TAG: &str = "answer:v1";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ReceiptError {
    #[error("mandatory field missing: {field}")]
    MissingMandatoryField { field: String },
    #[error("non-canonical input: {0}")]
    NonCanonicalInput(String),
    #[error("receipt mode {mode} incompatible with return state {state}")]
    ModeMismatch { mode: String, state: String },
    #[error("signing key `{kid}` is revoked at the signing instant")]
    SigningKeyRevoked { kid: String },
    #[error("malformed receipt: {0}")]
    Malformed(String),
}

// ---------------------------------------------------------------------------
// Disclosure enums
// ---------------------------------------------------------------------------

/// Who may receive the receipt. Distinct from the policy's gate-level
/// disclosure scope: this is the audience stamped on the artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Audience {
    InternalOnly,
    Partner,
    Public,
}

/// How much of each cited fragment the receipt discloses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentDisclosure {
    /// Content hash, document id, and selectors only.
    Hash,
    /// Hash plus issuer/date/tier metadata.
    Digest,
    /// Everything, including the body (internal audiences only).
    Full,
}

/// Receipt build mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiptMode {
    Full,
    Lite,
}

impl std::fmt::Display for ReceiptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReceiptMode::Full => "full",
            ReceiptMode::Lite => "lite",
        })
    }
}

/// Signing arrangement. Threshold schemes are modeled as multi-signature
/// quorums: `t` of `n` distinct approvers must verify.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum SigningScheme {
    Single,
    MultiSig { n: u32, t: u32 },
    Threshold { n: u32, t: u32 },
}

// ---------------------------------------------------------------------------
// Receipt payload types
// ---------------------------------------------------------------------------

/// One cited fragment, disclosed per the receipt's fragment mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiptFragment {
    pub fragment_id: String,
    pub doc_id: String,
    /// Lowercase hex content hash.
    pub content_hash: String,
    /// Selector expressions, each at most 128 bytes.
    pub selectors: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub issuer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub publication_date: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tier: Option<Tier>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub body: Option<String>,
}

/// One embedded inclusion multiproof (no raw timings: size and the
/// timeout flag only).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptProof {
    /// Document ids covered, sorted.
    pub doc_ids: Vec<String>,
    /// Manifest root, lowercase hex.
    pub root_hex: String,
    /// Proof wire bytes, lowercase hex.
    pub proof_hex: String,
    pub size_bytes: u64,
    pub timed_out: bool,
}

/// One promotion approval reference carried on answer receipts
/// (kid + timestamp; the full signatures live on the promotion receipt).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRef {
    pub kid: String,
    pub at_ms: u64,
}

/// The independence value and its hop bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GIndepValue {
    pub value: crate::graph::Share,
    pub k_hops: u32,
}

/// A full or lite answer receipt. Canonical JSON with the `signature`
/// field excluded from the signed span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerReceipt {
    pub answer_hash: Digest,
    pub route_version: String,
    pub contract_version: String,
    pub disclosure_scope: Audience,
    pub fragment_mode: FragmentDisclosure,
    pub return_state: ReturnState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub abstain_reason: Option<String>,
    /// Canonical reason codes copied from the decision trace.
    pub reasons: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub evidence: Option<EvidencePack>,
    /// Cited fragments, disclosed per `fragment_mode`.
    pub fragments: Vec<ReceiptFragment>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verifier_stats: Option<VerifierStats>,
    pub scope_diagnostics: ScopeReport,
    pub mses_issuer_counts: BTreeMap<String, u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub g_indep: Option<GIndepValue>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub justification: Option<JustificationScore>,
    /// Present when the topic was flagged drifting.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temporal_windows: Option<TemporalReport>,
    pub poisoning_gate_pass: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub poisoning_gate_reason: Option<String>,
    pub proofs: Vec<ReceiptProof>,
    pub kid: String,
    pub alg: SigAlg,
    pub signing_scheme: SigningScheme,
    pub promotion_digest: Digest,
    pub promotion_approvals: Vec<ApprovalRef>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proof_latency_histogram: Option<HistogramBins>,
    pub jitter_policy: JitterDescriptor,
    pub proof_size_bytes: u64,
    pub proof_timed_out: bool,
    pub escalation_trail: Vec<EscalationEntry>,
    /// Set by `sign_receipt`; part of the signed span.
    pub signed_at_ms: u64,
    /// Detached signature, lowercase hex. Excluded from the signed span.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub signature: Option<String>,
}

/// Signer identity and promotion metadata stamped onto answer receipts.
#[derive(Clone, Debug, PartialEq)]
pub struct SigningContext {
    pub kid: String,
    pub alg: SigAlg,
    pub scheme: SigningScheme,
    pub promotion_digest: Digest,
    pub promotion_approvals: Vec<ApprovalRef>,
}

// ---------------------------------------------------------------------------
// Building
// ---------------------------------------------------------------------------

/// Hash the emitted answer text. Abstaining decisions emit no answer and
/// hash the empty string, so the field is always present and bound.
pub fn answer_hash(answer: &str) -> Digest {
    hash_domain(ANSWER_HASH_TAG, &[answer.as_bytes()])
}

fn disclose_fragment(
    v: &crate::mses::VerdictedFragment,
    mode: FragmentDisclosure,
) -> ReceiptFragment {
    let f = &v.fragment;
    let mut out = ReceiptFragment {
        fragment_id: f.fragment_id.clone(),
        doc_id: f.doc_id.clone(),
        content_hash: f.content_hash.to_hex(),
        selectors: f.selectors.clone(),
        issuer: None,
        publication_date: None,
        tier: None,
        body: None,
    };
    if matches!(mode, FragmentDisclosure::Digest | FragmentDisclosure::Full) {
        out.issuer = Some(f.issuer.clone());
        out.publication_date = f.publication_date.map(|d| d.to_string());
        out.tier = Some(v.tier);
    }
    if matches!(mode, FragmentDisclosure::Full) {
        out.body = f.body.clone();
    }
    out
}

/// Assemble an unsigned receipt from a decision.
///
/// Mode `full` requires a PROMOTE_FULL trace and discloses fragment
/// bodies to an internal-only audience; mode `lite` serves PROMOTE_LITE
/// and diagnostic ABSTAIN receipts — hashes and selectors, never bodies.
/// Promoted receipts must carry the complete evidence record (pack,
/// independence value, proofs); anything missing is a structural error,
/// not a silent omission.
pub fn build_receipt(
    answer: Option<&str>,
    trace: &DecisionTrace,
    evidence: &DecisionEvidence,
    policy: &PolicySnapshot,
    signing: &SigningContext,
    mode: ReceiptMode,
) -> Result<AnswerReceipt, ReceiptError> {
    let state = trace.return_state;
    match (mode, state) {
        (ReceiptMode::Full, ReturnState::PromoteFull) => {}
        (ReceiptMode::Lite, ReturnState::PromoteLite | ReturnState::Abstain) => {}
        _ => {
            return Err(ReceiptError::ModeMismatch {
                mode: mode.to_string(),
                state: state.to_string(),
            })
        }
    }

    let promoted = state != ReturnState::Abstain;
    let fragment_mode = match mode {
        ReceiptMode::Full => FragmentDisclosure::Full,
        ReceiptMode::Lite => FragmentDisclosure::Hash,
    };
    let audience = match mode {
        ReceiptMode::Full => Audience::InternalOnly,
        ReceiptMode::Lite => Audience::Partner,
    };

    let mut receipt = AnswerReceipt {
        answer_hash: answer_hash(answer.unwrap_or("")),
        route_version: policy.route_version.clone(),
        contract_version: policy.contract_version.clone(),
        disclosure_scope: audience,
        fragment_mode,
        return_state: state,
        abstain_reason: trace.abstain_reason.clone(),
        reasons: trace.reasons.clone(),
        evidence: None,
        fragments: Vec::new(),
        verifier_stats: evidence.verifier_stats.clone(),
        scope_diagnostics: evidence.scope.clone(),
        mses_issuer_counts: evidence.mses_issuer_counts.clone(),
        g_indep: None,
        justification: trace.justification.clone(),
        temporal_windows: evidence.temporal.clone().filter(|t| t.drifting),
        poisoning_gate_pass: evidence.poisoning.as_ref().is_some_and(|p| p.pass),
        poisoning_gate_reason: match &evidence.poisoning {
            None => Some("not_evaluated".to_string()),
            Some(p) => p
                .first_failure
                .as_ref()
                .map(|f| format!("{}: {}", f.layer, f.detail)),
        },
        proofs: Vec::new(),
        kid: signing.kid.clone(),
        alg: signing.alg,
        signing_scheme: signing.scheme,
        promotion_digest: signing.promotion_digest,
        promotion_approvals: signing.promotion_approvals.clone(),
        proof_latency_histogram: evidence.proof_latency,
        jitter_policy: evidence.jitter.clone(),
        proof_size_bytes: 0,
        proof_timed_out: false,
        escalation_trail: trace.escalation_trail.clone(),
        signed_at_ms: 0,
        signature: None,
    };

    if state == ReturnState::Abstain {
        // Diagnostic receipt: reasons and gate reports, no evidence
        // bodies and no proofs.
        if receipt.abstain_reason.is_none() {
            return Err(ReceiptError::MissingMandatoryField {
                field: "abstain_reason".to_string(),
            });
        }
        return Ok(receipt);
    }

    if promoted {
        let pack = evidence.pack.clone().ok_or(ReceiptError::MissingMandatoryField {
            field: "evidence.pack".to_string(),
        })?;
        let independence =
            evidence.independence.as_ref().ok_or(ReceiptError::MissingMandatoryField {
                field: "evidence.independence".to_string(),
            })?;
        receipt.g_indep = Some(GIndepValue {
            value: independence.g_indep,
            k_hops: independence.k_hops,
        });
        // Disclose exactly the minimal evidence set.
        receipt.fragments = evidence
            .supports
            .iter()
            .filter(|v| pack.mses.iter().any(|id| id == v.fragment_id()))
            .map(|v| disclose_fragment(v, fragment_mode))
            .collect();
        receipt.evidence = Some(pack);
        if receipt.verifier_stats.is_none() {
            return Err(ReceiptError::MissingMandatoryField {
                field: "verifier_stats".to_string(),
            });
        }
        // A full promotion must prove inclusion; a lite receipt may be
        // the degraded result of a proof timeout, in which case the
        // timeout flag is set instead.
        let proof_degraded = evidence.proofs.is_empty();
        if proof_degraded && mode == ReceiptMode::Full {
            return Err(ReceiptError::MissingMandatoryField { field: "proofs".to_string() });
        }
        receipt.proof_timed_out = proof_degraded;
        for p in &evidence.proofs {
            receipt.proof_size_bytes += p.size_bytes as u64;
            receipt.proof_timed_out |= p.timed_out;
            receipt.proofs.push(ReceiptProof {
                doc_ids: p.doc_ids.clone(),
                root_hex: p.root_hex.clone(),
                proof_hex: p.proof_hex.clone(),
                size_bytes: p.size_bytes as u64,
                timed_out: p.timed_out,
            });
        }
    }

    Ok(receipt)
}

// ---------------------------------------------------------------------------
// Canonical bytes and signing
// ---------------------------------------------------------------------------

/// Canonical encoding of the whole receipt (including any signature):
/// lexicographic field order, lowercase hex, integer timestamps, no
/// insignificant whitespace.
pub fn canonical_receipt_bytes(receipt: &AnswerReceipt) -> Result<Vec<u8>, ReceiptError> {
    canonical_bytes(receipt).map_err(|e| ReceiptError::NonCanonicalInput(e.to_string()))
}

/// The signed span: the canonical encoding with the signature excluded.
pub fn signed_span(receipt: &AnswerReceipt) -> Result<Vec<u8>, ReceiptError> {
    let mut unsigned = receipt.clone();
    unsigned.signature = None;
    canonical_receipt_bytes(&unsigned)
}

fn signing_digest(receipt: &AnswerReceipt) -> Result<Digest, ReceiptError> {
    Ok(hash_domain(RECEIPT_SIGN_TAG, &[&signed_span(receipt)?]))
}

/// Sign a receipt: stamps the signing time, refuses a locally revoked
/// key, and attaches the detached signature over the canonical span.
pub fn sign_receipt(
    mut receipt: AnswerReceipt,
    key: &KeyHandle,
    local_krn: Option<&KrnStream>,
    signed_at_ms: u64,
) -> Result<AnswerReceipt, ReceiptError> {
    if local_krn.is_some_and(|s| s.is_revoked_at(key.kid(), signed_at_ms)) {
        return Err(ReceiptError::SigningKeyRevoked { kid: key.kid().to_string() });
    }
    receipt.kid = key.kid().to_string();
    receipt.alg = key.alg();
    receipt.signed_at_ms = signed_at_ms;
    receipt.signature = None;
    let digest = signing_digest(&receipt)?;
    receipt.signature = Some(hex::encode(key.sign_digest(&digest)));
    Ok(receipt)
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Everything a verifier may consult: in-memory material only, no
/// network. `None` KRN channels model fetch failures and fail closed.
pub struct VerifyContext<'a> {
    pub trust: &'a TrustStore,
    pub local_krn: Option<&'a KrnStream>,
    pub substrate_krn: Option<&'a KrnStream>,
    pub mirror: &'a MirrorState,
    /// Expected policy versions; `None` skips the consistency check
    /// (e.g., verifying a foreign route's receipt).
    pub expected_policy: Option<(&'a str, &'a str)>,
    pub now_ms: u64,
}

/// Ordered verification outcome. `pass` iff `reasons` is empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub reasons: Vec<String>,
}

fn structural_reasons(receipt: &AnswerReceipt) -> Vec<String> {
    let mut missing = Vec::new();
    let mut require = |ok: bool, field: &str| {
        if !ok {
            missing.push(format!("missing_field:{field}"));
        }
    };
    require(!receipt.route_version.is_empty(), "route_version");
    require(!receipt.contract_version.is_empty(), "contract_version");
    require(!receipt.kid.is_empty(), "kid");
    require(receipt.signed_at_ms > 0, "signed_at_ms");
    require(receipt.signature.is_some(), "signature");
    match receipt.return_state {
        ReturnState::Abstain => {
            require(receipt.abstain_reason.is_some(), "abstain_reason");
        }
        ReturnState::PromoteFull | ReturnState::PromoteLite => {
            require(receipt.evidence.is_some(), "evidence");
            require(receipt.g_indep.is_some(), "g_indep");
            require(receipt.verifier_stats.is_some(), "verifier_stats");
            require(!receipt.fragments.is_empty(), "fragments");
            if receipt.return_state == ReturnState::PromoteFull {
                require(!receipt.proofs.is_empty(), "proofs");
            } else {
                require(!receipt.proofs.is_empty() || receipt.proof_timed_out, "proofs");
            }
        }
    }
    if let Some(reason) = &receipt.abstain_reason {
        if ReasonCode::from_code(reason).is_none() {
            missing.push(format!("unknown_reason_code:{reason}"));
        }
    }
    missing
}

/// Offline receipt verification.
///
/// Checks run in a fixed order — structural completeness, signature over
/// the canonical span, every embedded multiproof against its declared
/// root, dual-channel revocation status of the signing kid, and policy-
/// version consistency — and every failure is a reason string, never an
/// exception. Revocation ambiguity (a stale mirror, an unreadable
/// channel, or a single-channel hit) fails closed.
pub fn verify_receipt(receipt: &AnswerReceipt, ctx: &VerifyContext<'_>) -> VerifyReport {
    let mut reasons = structural_reasons(receipt);

    // Signature over the canonical span.
    if receipt.signature.is_some() {
        match (signing_digest(receipt), receipt.signature.as_deref().map(hex::decode)) {
            (Ok(digest), Some(Ok(sig))) => {
                if ctx
                    .trust
                    .verify_digest(&receipt.kid, &digest, &sig, receipt.signed_at_ms)
                    .is_err()
                {
                    reasons.push("signature_mismatch".to_string());
                }
            }
            _ => reasons.push("signature_unparseable".to_string()),
        }
    }

    // Embedded proofs against their roots. Verification is pure
    // recomputation; the scripted clock only satisfies the interface.
    let clock = ScriptedClock::starting_at(0);
    let budget = ProofBudget::default();
    for (i, proof) in receipt.proofs.iter().enumerate() {
        let ok = (|| {
            let root_bytes = Digest::from_hex(&proof.root_hex).ok()?;
            let envelope = ProofEnvelope::from_bytes(&hex::decode(&proof.proof_hex).ok()?).ok()?;
            let check = verify_proof(&root_bytes, &envelope, &budget, &clock, None).ok()?;
            check.valid.then_some(())
        })()
        .is_some();
        if !ok {
            reasons.push(format!("proof_invalid:{i}"));
        }
    }

    // Dual-channel revocation status of the signing kid; ambiguity fails
    // closed.
    let status = check_dual(
        &receipt.kid,
        receipt.signed_at_ms,
        ctx.local_krn,
        ctx.substrate_krn,
        ctx.mirror,
        ctx.now_ms,
    );
    match status.status {
        VerificationStatus::Valid => {}
        VerificationStatus::Revoked => reasons.push("revoked".to_string()),
        _ => reasons.push(format!("revocation_pending:{}", status.reason)),
    }

    // Policy-version consistency.
    if let Some((route_version, contract_version)) = ctx.expected_policy {
        if receipt.route_version != route_version || receipt.contract_version != contract_version
        {
            reasons.push("policy_version_mismatch".to_string());
        }
    }

    VerifyReport { pass: reasons.is_empty(), reasons }
}

// ---------------------------------------------------------------------------
// Lite projection
// ---------------------------------------------------------------------------

/// Project a full receipt to its lite form: partner audience, hash-mode
/// fragments, no bodies or metadata beyond hashes and selectors. The
/// projection is unsigned — it is an independent artifact and must be
/// signed on its own.
pub fn lite_projection(full: &AnswerReceipt) -> AnswerReceipt {
    let mut lite = full.clone();
    lite.disclosure_scope = Audience::Partner;
    lite.fragment_mode = FragmentDisclosure::Hash;
    for fragment in &mut lite.fragments {
        fragment.body = None;
        fragment.issuer = None;
        fragment.publication_date = None;
        fragment.tier = None;
    }
    lite.signature = None;
    lite.signed_at_ms = 0;
    lite
}

// ---------------------------------------------------------------------------
// PII scanning and redaction
// ---------------------------------------------------------------------------

/// One detected sensitive span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiFinding {
    pub fragment_id: String,
    /// `body` or `selector:<index>`.
    pub field: String,
    pub pattern: String,
    pub start: usize,
    pub end: usize,
}

/// A named detection pattern. The set is configuration, not code policy.
pub struct PiiPattern {
    pub name: String,
    pub regex: regex::Regex,
}

/// The default reference patterns: emails, phone-like sequences, and
/// national-id-like numbers.
pub fn default_pii_patterns() -> Vec<PiiPattern> {
    let compile = |name: &str, re: &str| PiiPattern {
        name: name.to_string(),
        regex: regex::Regex::new(re).expect("valid built-in pattern"),
    };
    vec![
        compile("email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
        compile("phone", r"\+?\d[\d\s().-]{7,}\d"),
        compile("national_id", r"\b\d{3}-\d{2}-\d{4}\b"),
    ]
}

fn scan_text(
    fragment_id: &str,
    field: &str,
    text: &str,
    patterns: &[PiiPattern],
    findings: &mut Vec<PiiFinding>,
) {
    for pattern in patterns {
        for m in pattern.regex.find_iter(text) {
            findings.push(PiiFinding {
                fragment_id: fragment_id.to_string(),
                field: field.to_string(),
                pattern: pattern.name.clone(),
                start: m.start(),
                end: m.end(),
            });
        }
    }
}

/// Scan disclosed fragment bodies and selectors for sensitive spans.
pub fn pii_scan(fragments: &[ReceiptFragment], patterns: &[PiiPattern]) -> Vec<PiiFinding> {
    let mut findings = Vec::new();
    for f in fragments {
        if let Some(body) = &f.body {
            scan_text(&f.fragment_id, "body", body, patterns, &mut findings);
        }
        for (i, selector) in f.selectors.iter().enumerate() {
            scan_text(&f.fragment_id, &format!("selector:{i}"), selector, patterns, &mut findings);
        }
    }
    findings
}

fn mask_text(text: &str, pattern: &PiiPattern) -> String {
    pattern
        .regex
        .replace_all(text, format!("[masked:{}]", pattern.name).as_str())
        .into_owned()
}

/// Outcome of pre-finalization redaction.
#[derive(Clone, Debug, PartialEq)]
pub enum RedactionOutcome {
    /// Receipt is clean or was masked in place; findings are logged.
    Disclosed { receipt: AnswerReceipt, findings: Vec<PiiFinding> },
    /// Policy demands abstention on sensitive content: the receipt is
    /// converted to a diagnostic ABSTAIN(privacy) record.
    AbstainPrivacy { receipt: AnswerReceipt, findings: Vec<PiiFinding> },
}

/// Pre-finalization redaction pass.
///
/// Runs the PII scan over the disclosed material, drops any selector
/// over the 128-byte cap, strips bodies outside `full` mode, and then
/// either masks findings in place or escalates to ABSTAIN(privacy),
/// per policy.
pub fn redact(
    mut receipt: AnswerReceipt,
    policy: &PolicySnapshot,
    patterns: &[PiiPattern],
) -> RedactionOutcome {
    for fragment in &mut receipt.fragments {
        fragment.selectors.retain(|s| s.len() <= SELECTOR_MAX_BYTES);
        if receipt.fragment_mode != FragmentDisclosure::Full {
            fragment.body = None;
        }
    }
    let findings = pii_scan(&receipt.fragments, patterns);
    if findings.is_empty() {
        return RedactionOutcome::Disclosed { receipt, findings };
    }
    match policy.pii_mode {
        PiiMode::Mask => {
            for fragment in &mut receipt.fragments {
                for pattern in patterns {
                    if let Some(body) = &fragment.body {
                        fragment.body = Some(mask_text(body, pattern));
                    }
                    for selector in &mut fragment.selectors {
                        *selector = mask_text(selector, pattern);
                    }
                }
            }
            RedactionOutcome::Disclosed { receipt, findings }
        }
        PiiMode::Abstain => {
            receipt.return_state = ReturnState::Abstain;
            receipt.abstain_reason = Some(ReasonCode::Privacy.code().to_string());
            receipt.reasons = vec![ReasonCode::Privacy.code().to_string()];
            receipt.evidence = None;
            receipt.fragments.clear();
            receipt.proofs.clear();
            receipt.proof_size_bytes = 0;
            receipt.g_indep = None;
            receipt.justification = None;
            receipt.verifier_stats = None;
            RedactionOutcome::AbstainPrivacy { receipt, findings }
        }
    }
}

// ---------------------------------------------------------------------------
// Promotion receipts
// ---------------------------------------------------------------------------

/// One promoted artifact: a name and its content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub name: String,
    pub sha256: Digest,
}

/// One quorum approval: the signature covers the promotion digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    pub kid: String,
    pub at_ms: u64,
    /// Lowercase hex signature over the promotion digest.
    pub signature: String,
}

/// A quorum-signed configuration promotion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromotionReceipt {
    /// Promoted artifacts with per-artifact hashes.
    pub snapshots: Vec<SnapshotRef>,
    pub route_version: String,
    pub contract_version: String,
    /// Gate thresholds in force at promotion.
    pub thresholds: BTreeMap<String, f64>,
    /// Verifier suite outcomes gating the promotion.
    pub verifier_outcomes: BTreeMap<String, bool>,
    /// SLO check results gating the promotion.
    pub slo_results: BTreeMap<String, bool>,
    /// SHA-256 over the promoted manifest set.
    pub promotion_digest: Digest,
    /// Approvals ordered by (timestamp, kid).
    pub approvals: Vec<Approval>,
    pub scheme_n: u32,
    pub scheme_t: u32,
}

/// The digest a quorum signs: a domain-separated hash over the sorted
/// per-artifact hashes.
pub fn promotion_digest(snapshots: &[SnapshotRef]) -> Digest {
    let mut hashes: Vec<&[u8]> =
        snapshots.iter().map(|s| s.sha256.as_bytes().as_slice()).collect();
    hashes.sort();
    hash_domain("promotion:set:v1", &hashes)
}

fn approval_digest(digest: &Digest) -> Digest {
    hash_domain(PROMOTION_SIGN_TAG, &[digest.as_bytes()])
}

/// Produce one approval over `digest` with `key`.
pub fn approve_promotion(digest: &Digest, key: &KeyHandle, at_ms: u64) -> Approval {
    Approval {
        kid: key.kid().to_string(),
        at_ms,
        signature: hex::encode(key.sign_digest(&approval_digest(digest))),
    }
}

/// Assemble a promotion receipt; approvals are ordered by (timestamp,
/// kid) and the digest is recomputed from the snapshot set.
#[allow(clippy::too_many_arguments)]
pub fn build_promotion_receipt(
    snapshots: Vec<SnapshotRef>,
    route_version: &str,
    contract_version: &str,
    thresholds: BTreeMap<String, f64>,
    verifier_outcomes: BTreeMap<String, bool>,
    slo_results: BTreeMap<String, bool>,
    mut approvals: Vec<Approval>,
    scheme: (u32, u32),
) -> PromotionReceipt {
    approvals.sort_by(|a, b| a.at_ms.cmp(&b.at_ms).then_with(|| a.kid.cmp(&b.kid)));
    let digest = promotion_digest(&snapshots);
    PromotionReceipt {
        snapshots,
        route_version: route_version.to_string(),
        contract_version: contract_version.to_string(),
        thresholds,
        verifier_outcomes,
        slo_results,
        promotion_digest: digest,
        approvals,
        scheme_n: scheme.0,
        scheme_t: scheme.1,
    }
}

/// Verify a promotion receipt: the digest must match the snapshot set,
/// approver kids must be distinct, and at least `t` approvals must carry
/// valid signatures over the promotion digest.
pub fn verify_promotion(receipt: &PromotionReceipt, trust: &TrustStore) -> VerifyReport {
    let mut reasons = Vec::new();
    if promotion_digest(&receipt.snapshots) != receipt.promotion_digest {
        reasons.push("digest_mismatch".to_string());
    }
    let mut seen = std::collections::BTreeSet::new();
    for approval in &receipt.approvals {
        if !seen.insert(approval.kid.clone()) {
            reasons.push("duplicate_approver".to_string());
            break;
        }
    }
    let expected = approval_digest(&receipt.promotion_digest);
    let valid_kids: std::collections::BTreeSet<&str> = receipt
        .approvals
        .iter()
        .filter(|a| {
            hex::decode(&a.signature)
                .ok()
                .is_some_and(|sig| trust.verify_digest(&a.kid, &expected, &sig, a.at_ms).is_ok())
        })
        .map(|a| a.kid.as_str())
        .collect();
    if (valid_kids.len() as u32) < receipt.scheme_t {
        reasons.push("insufficient_quorum".to_string());
    }
    VerifyReport { pass: reasons.is_empty(), reasons }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
