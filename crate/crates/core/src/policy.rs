//! Route policy snapshots and pre-scoring admission gates.
//!
//! A [`PolicySnapshot`] freezes every knob that governs a route: decision
//! thresholds, independence floors, caps, timeout tables, and disclosure
//! settings. Snapshots are content-addressed (the hash covers every field
//! except the stored hash itself) so a receipt can pin the exact policy it
//! was issued under and verifiers can detect drift.
//!
//! The gates in this module inspect candidate fragments before any scoring
//! happens:
//!
//! - [`scope_ok`] enforces jurisdiction, licensing, freshness, trust-tier,
//!   anchor, language, and duplicate rules;
//! - [`temporal_diversity_ok`] rejects single-era evidence on drifting
//!   topics;
//! - [`poisoning_gate`] runs the layered supply-chain checks in a fixed
//!   order and reports the first failing layer;
//! - [`infer_metadata`] fills missing fragment tags from shard-level
//!   defaults without ever overriding an explicit tag.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Months, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::graph::IndependenceReport;
use crate::hash::{hash_domain, Digest};

/// Domain tag for policy snapshot content addressing.
const POLICY_HASH_TAG: &str = "policy:v1";

/// Width of one temporal bucket, in months.
const BUCKET_MONTHS: u32 = 6;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Errors raised by policy validation and the admission gates.
#[derive(Debug, Error)]
pub enum PolicyError {
    /// A policy field is outside its legal range.
    #[error("invalid policy field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    /// The ancestry depth was lowered below 3 without a recorded justification.
    #[error("k_hops = {k} requires a written justification (none recorded)")]
    KJustificationRequired { k: u32 },
    /// A gate was invoked on an empty fragment set.
    #[error("gate `{gate}` requires at least one fragment")]
    EmptyPool { gate: &'static str },
    /// Publication dates are required (drifting topic) but absent.
    #[error("publication dates missing on drifting topic for fragments: {}", fragment_ids.join(", "))]
    MissingDates { fragment_ids: Vec<String> },
    /// A fragment violates a structural invariant.
    #[error("fragment `{fragment_id}` is malformed: {reason}")]
    MalformedFragment { fragment_id: String, reason: String },
    /// The snapshot could not be canonically serialized.
    #[error("canonicalization failed: {0}")]
    Canon(#[from] canon::CanonError),
}

// ---------------------------------------------------------------------------
// Policy snapshot
// ---------------------------------------------------------------------------

/// Receipt disclosure scope for a route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisclosureScope {
    /// Full receipts carry fragment hashes, selectors, and proofs inline.
    Full,
    /// Lite receipts carry only roots, digests, and the decision trace.
    Lite,
}

/// Granularity at which evidence is cited and proven.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentMode {
    /// Cite individual fragments with their own selectors.
    Fragments,
    /// Cite whole documents; selectors address the document body.
    Documents,
}

/// Behaviour when personally identifying information is detected in a
/// fragment slated for disclosure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiiMode {
    /// Refuse to disclose and abstain.
    Abstain,
    /// Mask the offending spans and disclose the redacted fragment.
    Mask,
}

/// Weights of the justification score components. Must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JustificationWeights {
    pub w_support: f64,
    pub w_indep: f64,
    pub w_minimality: f64,
}

impl Default for JustificationWeights {
    fn default() -> Self {
        JustificationWeights { w_support: 0.5, w_indep: 0.3, w_minimality: 0.2 }
    }
}

/// Retry backoff schedule for one pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backoff {
    /// Wait a fixed number of milliseconds between attempts.
    Fixed { ms: u64 },
    /// Wait `base_ms * 2^attempt` milliseconds, plus deterministic jitter.
    Exponential { base_ms: u64 },
}

/// Timeout and retry budget for one pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimeout {
    /// Per-attempt timeout in milliseconds.
    pub timeout_ms: u64,
    /// Number of retries after the first attempt.
    pub retries: u32,
    /// Backoff between attempts; `None` when no retries are allowed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub backoff: Option<Backoff>,
}

/// Per-stage latency budgets, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBudget {
    pub retrieval_ms: u64,
    pub cheap_ms: u64,
    pub small_ms: u64,
    pub heavy_ms: u64,
    pub proofs_ms: u64,
    pub signing_ms: u64,
    pub end_to_end_ms: u64,
}

impl Default for LatencyBudget {
    fn default() -> Self {
        LatencyBudget {
            retrieval_ms: 250,
            cheap_ms: 120,
            small_ms: 180,
            heavy_ms: 220,
            proofs_ms: 80,
            signing_ms: 50,
            end_to_end_ms: 900,
        }
    }
}

/// Token-bucket rate limits for a route and its tenant organizations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateLimits {
    pub route_capacity: u32,
    pub route_refill_per_s: f64,
    pub org_capacity: u32,
    pub org_refill_per_s: f64,
}

impl Default for RateLimits {
    fn default() -> Self {
        RateLimits {
            route_capacity: 50,
            route_refill_per_s: 50.0,
            org_capacity: 10,
            org_refill_per_s: 10.0,
        }
    }
}

/// Frozen, content-addressed configuration for one answer route.
///
/// `snapshot_hash` is excluded from its own preimage: hashing the snapshot
/// with the hash field removed must reproduce the stored value, which
/// [`PolicySnapshot::verify_hash`] checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    /// Content address of every other field (`policy:v1` domain).
    pub snapshot_hash: Digest,
    /// Route identifier this snapshot governs.
    pub route_version: String,
    /// Version of the decision contract the route implements.
    pub contract_version: String,
    /// Evidence sufficiency threshold on the calibrated score.
    pub tau: f64,
    /// Justification score threshold.
    pub tau_j: f64,
    /// In-context-learning drift threshold.
    pub tau_icl: f64,
    /// Family-wise error level for confirmatory claim families.
    pub alpha: f64,
    /// False discovery rate level for exploratory claim families.
    pub q: f64,
    /// Minimum admissible independence score.
    pub g_indep_min: f64,
    /// Ancestry depth for the shared-ancestor test.
    pub k_hops: u32,
    /// Required written justification when `k_hops < 3`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k_justification: Option<String>,
    /// Maximum share of supports any single issuer may contribute.
    pub issuer_cap: f64,
    /// Optional analogous cap on authors.
    pub author_cap_enabled: bool,
    pub author_cap: f64,
    /// Score band `[low, high)` in which heavy verification is triggered.
    pub margin_band: (f64, f64),
    /// Maximum share of recent requests allowed to take the heavy path.
    pub heavy_cap: f64,
    /// Sliding window, in days, over which the heavy share is measured.
    pub heavy_window_days: u32,
    /// Maximum number of heavy passes per request.
    pub heavy_per_request_max: u32,
    /// Deterministic audit sampling rate for non-margin requests.
    pub sample_rate: f64,
    /// Half-width of the per-session jitter applied to `tau`.
    pub jitter_halfwidth: f64,
    /// Per-stage timeout and retry table, keyed by stage name.
    pub stage_timeouts_ms: BTreeMap<String, StageTimeout>,
    /// Budget for verifying one proof bundle, in milliseconds.
    pub proof_timeout_ms: u64,
    /// Per-stage latency budgets.
    pub latency_budget: LatencyBudget,
    /// Minimum number of supporting fragments for a quantitative claim.
    pub min_supports: u32,
    /// Minimum number of distinct issuers in the candidate pool.
    pub min_issuer_diversity: u32,
    /// Enforce at most one fragment per issuer in the evidence set.
    pub mses_monoculture_check: bool,
    /// Topics whose ground truth drifts, requiring temporal diversity.
    pub drifting_topics: BTreeSet<String>,
    /// Receipt disclosure scope.
    pub disclosure_scope: DisclosureScope,
    /// Whether degraded paths (slow proofs, exhausted heavy budget) may
    /// fall back to a lite receipt instead of abstaining.
    pub lite_fallback_allowed: bool,
    /// Evidence citation granularity.
    pub fragment_mode: FragmentMode,
    /// Behaviour on detected PII in disclosed fragments.
    pub pii_mode: PiiMode,
    /// Justification score weights.
    pub justification_weights: JustificationWeights,
    /// Jurisdictions this route may draw evidence from (empty = any).
    pub route_jurisdictions: Vec<String>,
    /// Language this route answers in (empty = any).
    pub route_language: String,
    /// Minimum trust tier a fragment's source must hold.
    pub min_trust_tier: u8,
    /// Minimum confidence required of inferred metadata.
    pub metadata_confidence_min: f64,
    /// Jaccard similarity at or above which two bodies are near-duplicates.
    pub near_dup_jaccard: f64,
    /// Shingle width (in words) for near-duplicate detection.
    pub near_dup_shingle_words: usize,
    /// Token-bucket limits for the route and its orgs.
    pub rate_limits: RateLimits,
}

impl Default for PolicySnapshot {
    fn default() -> Self {
        let mut stage_timeouts_ms = BTreeMap::new();
        stage_timeouts_ms.insert(
            "retrieval".to_string(),
            StageTimeout {
                timeout_ms: 250,
                retries: 1,
                backoff: Some(Backoff::Exponential { base_ms: 50 }),
            },
        );
        stage_timeouts_ms.insert(
            "cheap".to_string(),
            StageTimeout { timeout_ms: 60, retries: 1, backoff: Some(Backoff::Fixed { ms: 30 }) },
        );
        stage_timeouts_ms.insert(
            "small".to_string(),
            StageTimeout {
                timeout_ms: 120,
                retries: 1,
                backoff: Some(Backoff::Exponential { base_ms: 50 }),
            },
        );
        stage_timeouts_ms.insert(
            "heavy".to_string(),
            StageTimeout { timeout_ms: 220, retries: 0, backoff: None },
        );
        stage_timeouts_ms.insert(
            "proof".to_string(),
            StageTimeout { timeout_ms: 300, retries: 0, backoff: None },
        );
        stage_timeouts_ms.insert(
            "signing".to_string(),
            StageTimeout { timeout_ms: 120, retries: 1, backoff: Some(Backoff::Fixed { ms: 60 }) },
        );
        stage_timeouts_ms.insert(
            "krn".to_string(),
            StageTimeout { timeout_ms: 300, retries: 1, backoff: Some(Backoff::Fixed { ms: 150 }) },
        );

        PolicySnapshot {
            snapshot_hash: Digest::ZERO,
            route_version: "route-v1".to_string(),
            contract_version: "contract-v1".to_string(),
            tau: 0.75,
            tau_j: 0.60,
            tau_icl: 0.80,
            alpha: 0.05,
            q: 0.10,
            g_indep_min: 0.70,
            k_hops: 3,
            k_justification: None,
            issuer_cap: 0.50,
            author_cap_enabled: false,
            author_cap: 0.50,
            margin_band: (0.55, 0.75),
            heavy_cap: 0.15,
            heavy_window_days: 7,
            heavy_per_request_max: 1,
            sample_rate: 0.10,
            jitter_halfwidth: 0.02,
            stage_timeouts_ms,
            proof_timeout_ms: 300,
            latency_budget: LatencyBudget::default(),
            min_supports: 2,
            min_issuer_diversity: 3,
            mses_monoculture_check: true,
            drifting_topics: BTreeSet::new(),
            disclosure_scope: DisclosureScope::Full,
            lite_fallback_allowed: true,
            fragment_mode: FragmentMode::Fragments,
            pii_mode: PiiMode::Abstain,
            justification_weights: JustificationWeights::default(),
            route_jurisdictions: Vec::new(),
            route_language: String::new(),
            min_trust_tier: 0,
            metadata_confidence_min: 0.9,
            near_dup_jaccard: 0.9,
            near_dup_shingle_words: 8,
            rate_limits: RateLimits::default(),
        }
    }
}

impl PolicySnapshot {
    /// Compute the content address over every field except `snapshot_hash`.
    pub fn compute_hash(&self) -> Result<Digest, PolicyError> {
        let mut value = serde_json::to_value(self).map_err(canon::CanonError::from)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("snapshot_hash");
        }
        let bytes = canon::canonical_value_bytes(&value)?;
        Ok(hash_domain(POLICY_HASH_TAG, &[&bytes]))
    }

    /// Validate field ranges and stamp the content address.
    pub fn seal(mut self) -> Result<PolicySnapshot, PolicyError> {
        self.validate()?;
        self.snapshot_hash = self.compute_hash()?;
        Ok(self)
    }

    /// True when the stored hash matches the recomputed content address.
    pub fn verify_hash(&self) -> Result<bool, PolicyError> {
        Ok(self.snapshot_hash == self.compute_hash()?)
    }

    /// Check every range and structural invariant.
    pub fn validate(&self) -> Result<(), PolicyError> {
        fn open_unit(field: &'static str, x: f64) -> Result<(), PolicyError> {
            if !(x.is_finite() && x > 0.0 && x < 1.0) {
                return Err(PolicyError::InvalidField {
                    field,
                    reason: format!("{x} is not in the open interval (0, 1)"),
                });
            }
            Ok(())
        }
        fn closed_unit(field: &'static str, x: f64) -> Result<(), PolicyError> {
            if !(x.is_finite() && (0.0..=1.0).contains(&x)) {
                return Err(PolicyError::InvalidField {
                    field,
                    reason: format!("{x} is not in [0, 1]"),
                });
            }
            Ok(())
        }

        open_unit("tau", self.tau)?;
        open_unit("tau_j", self.tau_j)?;
        open_unit("tau_icl", self.tau_icl)?;
        open_unit("alpha", self.alpha)?;
        open_unit("q", self.q)?;
        open_unit("g_indep_min", self.g_indep_min)?;
        open_unit("issuer_cap", self.issuer_cap)?;
        open_unit("author_cap", self.author_cap)?;
        open_unit("heavy_cap", self.heavy_cap)?;
        closed_unit("sample_rate", self.sample_rate)?;
        closed_unit("metadata_confidence_min", self.metadata_confidence_min)?;
        closed_unit("near_dup_jaccard", self.near_dup_jaccard)?;

        let (lo, hi) = self.margin_band;
        open_unit("margin_band.low", lo)?;
        open_unit("margin_band.high", hi)?;
        if lo >= hi {
            return Err(PolicyError::InvalidField {
                field: "margin_band",
                reason: format!("low bound {lo} must be below high bound {hi}"),
            });
        }

        if !(self.jitter_halfwidth.is_finite()
            && (0.0..0.5).contains(&self.jitter_halfwidth))
        {
            return Err(PolicyError::InvalidField {
                field: "jitter_halfwidth",
                reason: format!("{} is not in [0, 0.5)", self.jitter_halfwidth),
            });
        }

        if self.k_hops == 0 {
            return Err(PolicyError::InvalidField {
                field: "k_hops",
                reason: "ancestry depth must be at least 1".to_string(),
            });
        }
        if self.k_hops < 3 && self.k_justification.as_ref().is_none_or(|j| j.trim().is_empty()) {
            return Err(PolicyError::KJustificationRequired { k: self.k_hops });
        }

        if self.min_supports == 0 {
            return Err(PolicyError::InvalidField {
                field: "min_supports",
                reason: "must require at least one support".to_string(),
            });
        }
        if self.min_issuer_diversity == 0 {
            return Err(PolicyError::InvalidField {
                field: "min_issuer_diversity",
                reason: "must require at least one issuer".to_string(),
            });
        }
        if self.near_dup_shingle_words == 0 {
            return Err(PolicyError::InvalidField {
                field: "near_dup_shingle_words",
                reason: "shingle width must be at least one word".to_string(),
            });
        }

        let w = self.justification_weights;
        let sum = w.w_support + w.w_indep + w.w_minimality;
        if (sum - 1.0).abs() > 1e-9
            || [w.w_support, w.w_indep, w.w_minimality].iter().any(|x| *x < 0.0)
        {
            return Err(PolicyError::InvalidField {
                field: "justification_weights",
                reason: format!("weights must be non-negative and sum to 1 (got {sum})"),
            });
        }

        for (stage, t) in &self.stage_timeouts_ms {
            if t.timeout_ms == 0 {
                return Err(PolicyError::InvalidField {
                    field: "stage_timeouts_ms",
                    reason: format!("stage `{stage}` has a zero timeout"),
                });
            }
            if t.retries > 0 && t.backoff.is_none() {
                return Err(PolicyError::InvalidField {
                    field: "stage_timeouts_ms",
                    reason: format!("stage `{stage}` allows retries but has no backoff"),
                });
            }
        }

        Ok(())
    }

    /// Timeout entry for a named stage, if configured.
    pub fn stage_timeout(&self, stage: &str) -> Option<StageTimeout> {
        self.stage_timeouts_ms.get(stage).copied()
    }

    /// True when `topic` is registered as drifting on this route.
    pub fn topic_is_drifting(&self, topic: &str) -> bool {
        self.drifting_topics.contains(topic)
    }
}

// ---------------------------------------------------------------------------
// Fragments
// ---------------------------------------------------------------------------

/// License metadata attached to a fragment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct License {
    /// Identifier of the license terms (empty = malformed).
    pub terms_id: String,
    /// Epoch milliseconds after which redistribution rights lapse.
    pub ttl_expiry_ms: u64,
}

/// A reference from a document to an upstream source.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitationRef {
    /// Citation of another document by id.
    Doc(String),
    /// Citation of an issuing organization by name.
    Issuer(String),
}

/// One retrieved evidence fragment with its provenance metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    /// Unique fragment identifier within a request.
    pub fragment_id: String,
    /// Document the fragment was extracted from.
    pub doc_id: String,
    /// Shard whose manifest commits to the document.
    pub shard_id: String,
    /// Organization that issued the document.
    pub issuer: String,
    /// Author of record.
    pub author: String,
    /// Jurisdiction tag, if explicitly catalogued.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jurisdiction: Option<String>,
    /// First date the content is effective, if catalogued.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub effective_start: Option<NaiveDate>,
    /// Last date the content is effective, if catalogued.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub effective_end: Option<NaiveDate>,
    /// Publication date, if catalogued.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub publication_date: Option<NaiveDate>,
    /// License terms and redistribution TTL.
    pub license: License,
    /// Source trust tier (higher is more trusted).
    pub trust_tier: u8,
    /// Language tag of the fragment body.
    pub language: String,
    /// Hash of the fragment content as committed in the shard manifest.
    pub content_hash: Digest,
    /// Citable anchors locating the fragment inside its document.
    pub selectors: Vec<String>,
    /// Upstream citations declared by the document.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub upstream_citations: Vec<CitationRef>,
    /// Raw fragment text, when available to the gatekeeper.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub body: Option<String>,
}

/// Maximum byte length of a single selector.
pub const SELECTOR_MAX_BYTES: usize = 128;

impl Fragment {
    /// Check structural invariants: non-empty identifiers, selector length,
    /// and a consistent effective window.
    pub fn validate(&self) -> Result<(), PolicyError> {
        let malformed = |reason: String| PolicyError::MalformedFragment {
            fragment_id: self.fragment_id.clone(),
            reason,
        };
        if self.fragment_id.trim().is_empty() {
            return Err(PolicyError::MalformedFragment {
                fragment_id: "<unnamed>".to_string(),
                reason: "fragment_id is empty".to_string(),
            });
        }
        if self.doc_id.trim().is_empty() {
            return Err(malformed("doc_id is empty".to_string()));
        }
        if self.shard_id.trim().is_empty() {
            return Err(malformed("shard_id is empty".to_string()));
        }
        if self.issuer.trim().is_empty() {
            return Err(malformed("issuer is empty".to_string()));
        }
        for sel in &self.selectors {
            if sel.len() > SELECTOR_MAX_BYTES {
                return Err(malformed(format!(
                    "selector exceeds {SELECTOR_MAX_BYTES} bytes ({} bytes)",
                    sel.len()
                )));
            }
        }
        if let (Some(s), Some(e)) = (self.effective_start, self.effective_end) {
            if s > e {
                return Err(malformed(format!(
                    "effective window starts {s} after it ends {e}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scope gate
// ---------------------------------------------------------------------------

/// Reasons a fragment set can be out of scope for a route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeCategory {
    Jurisdiction,
    EffectiveDate,
    LicenseTtl,
    TrustTier,
    TemporalMonoculture,
    AnchorMissing,
    LanguageMismatch,
    Duplicate,
    Timeout,
    MalformedLicense,
}

impl fmt::Display for ScopeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ScopeCategory::Jurisdiction => "jurisdiction",
            ScopeCategory::EffectiveDate => "effective_date",
            ScopeCategory::LicenseTtl => "license_ttl",
            ScopeCategory::TrustTier => "trust_tier",
            ScopeCategory::TemporalMonoculture => "temporal_monoculture",
            ScopeCategory::AnchorMissing => "anchor_missing",
            ScopeCategory::LanguageMismatch => "language_mismatch",
            ScopeCategory::Duplicate => "duplicate",
            ScopeCategory::Timeout => "timeout",
            ScopeCategory::MalformedLicense => "malformed_license",
        };
        f.write_str(name)
    }
}

/// One scope violation: the category and the fragments that triggered it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeReason {
    pub category: ScopeCategory,
    /// Offending fragment ids, sorted; empty for pool-level reasons such as
    /// retrieval timeouts.
    pub fragment_ids: Vec<String>,
}

/// Outcome of the scope gate. `ok` holds exactly when `reasons` is empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub ok: bool,
    pub reasons: Vec<ScopeReason>,
}

impl ScopeReport {
    /// A passing report with no reasons.
    pub fn pass() -> Self {
        ScopeReport { ok: true, reasons: Vec::new() }
    }

    /// Record a violation, merging fragment ids into an existing category
    /// entry and keeping `ok` consistent with `reasons`.
    pub fn add(&mut self, category: ScopeCategory, fragment_ids: Vec<String>) {
        match self.reasons.iter_mut().find(|r| r.category == category) {
            Some(existing) => {
                existing.fragment_ids.extend(fragment_ids);
                existing.fragment_ids.sort();
                existing.fragment_ids.dedup();
            }
            None => {
                let mut ids = fragment_ids;
                ids.sort();
                ids.dedup();
                self.reasons.push(ScopeReason { category, fragment_ids: ids });
            }
        }
        self.reasons.sort_by_key(|r| r.category);
        self.ok = self.reasons.is_empty();
    }

    /// Fragment ids flagged under `category`, if any.
    pub fn ids_for(&self, category: ScopeCategory) -> Option<&[String]> {
        self.reasons
            .iter()
            .find(|r| r.category == category)
            .map(|r| r.fragment_ids.as_slice())
    }
}

/// Convert epoch milliseconds to a calendar date (UTC).
fn date_of_ms(ms: u64) -> NaiveDate {
    DateTime::from_timestamp_millis(ms as i64)
        .map(|dt| dt.date_naive())
        .unwrap_or(NaiveDate::MAX)
}

/// Lowercase a body and collapse it to alphanumeric words.
fn normalize_words(body: &str) -> Vec<String> {
    body.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Word shingles of width `n`; a body shorter than `n` words yields one
/// shingle covering the whole body.
fn shingles(words: &[String], n: usize) -> BTreeSet<String> {
    if words.is_empty() {
        return BTreeSet::new();
    }
    if words.len() <= n {
        return BTreeSet::from([words.join(" ")]);
    }
    words.windows(n).map(|w| w.join(" ")).collect()
}

/// Jaccard similarity of two shingle sets. Two empty sets are identical.
fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// True when two fragments carry the same content: equal content hashes, or
/// near-identical bodies under shingle Jaccard similarity when both bodies
/// are available.
pub fn is_near_duplicate(a: &Fragment, b: &Fragment, policy: &PolicySnapshot) -> bool {
    if a.content_hash == b.content_hash {
        return true;
    }
    match (&a.body, &b.body) {
        (Some(x), Some(y)) => {
            let n = policy.near_dup_shingle_words;
            let sx = shingles(&normalize_words(x), n);
            let sy = shingles(&normalize_words(y), n);
            jaccard(&sx, &sy) >= policy.near_dup_jaccard
        }
        _ => false,
    }
}

/// Screen a candidate pool against route scope rules.
///
/// Checks jurisdiction, effective dates, license TTL and well-formedness,
/// trust tier, citable anchors, language, and duplicates. Two categories are
/// injected by the caller rather than detected here: `timeout` (retrieval or
/// verification exhaustion) and `temporal_monoculture` (owned by
/// [`temporal_diversity_ok`]); use [`ScopeReport::add`] to fold them in.
/// The report is deterministic for a given input order, and `ok` holds
/// exactly when no reasons were recorded.
pub fn scope_ok(
    fragments: &[Fragment],
    policy: &PolicySnapshot,
    now_ms: u64,
) -> Result<ScopeReport, PolicyError> {
    if fragments.is_empty() {
        return Err(PolicyError::EmptyPool { gate: "scope_ok" });
    }
    for f in fragments {
        f.validate()?;
    }

    let mut report = ScopeReport::pass();
    let today = date_of_ms(now_ms);

    let mut offenders = |category: ScopeCategory, pred: &dyn Fn(&Fragment) -> bool| {
        let ids: Vec<String> = fragments
            .iter()
            .filter(|f| pred(f))
            .map(|f| f.fragment_id.clone())
            .collect();
        if !ids.is_empty() {
            report.add(category, ids);
        }
    };

    offenders(ScopeCategory::Jurisdiction, &|f| {
        !policy.route_jurisdictions.is_empty()
            && f.jurisdiction
                .as_ref()
                .is_some_and(|j| !policy.route_jurisdictions.contains(j))
    });
    offenders(ScopeCategory::EffectiveDate, &|f| {
        match (f.effective_start, f.effective_end) {
            (Some(s), Some(e)) => today < s || today > e,
            (Some(s), None) => today < s,
            (None, Some(e)) => today > e,
            (None, None) => false,
        }
    });
    offenders(ScopeCategory::LicenseTtl, &|f| f.license.ttl_expiry_ms <= now_ms);
    offenders(ScopeCategory::MalformedLicense, &|f| f.license.terms_id.trim().is_empty());
    offenders(ScopeCategory::TrustTier, &|f| f.trust_tier < policy.min_trust_tier);
    offenders(ScopeCategory::AnchorMissing, &|f| f.selectors.is_empty());
    offenders(ScopeCategory::LanguageMismatch, &|f| {
        !policy.route_language.is_empty() && f.language != policy.route_language
    });

    // Near-duplicates: scan pairs in input order and flag the later member,
    // so the first occurrence of any content survives.
    let mut dup_ids: Vec<String> = Vec::new();
    for j in 1..fragments.len() {
        if dup_ids.contains(&fragments[j].fragment_id) {
            continue;
        }
        for i in 0..j {
            if dup_ids.contains(&fragments[i].fragment_id) {
                continue;
            }
            if is_near_duplicate(&fragments[i], &fragments[j], policy) {
                dup_ids.push(fragments[j].fragment_id.clone());
                break;
            }
        }
    }
    if !dup_ids.is_empty() {
        report.add(ScopeCategory::Duplicate, dup_ids);
    }

    Ok(report)
}

// ---------------------------------------------------------------------------
// Temporal diversity gate
// ---------------------------------------------------------------------------

/// One occupied temporal bucket: the span of its member publication dates
/// and the bucket's calendar midpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub midpoint: NaiveDate,
}

/// Outcome of the temporal diversity gate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub pass: bool,
    /// Whether the topic was treated as drifting.
    pub drifting: bool,
    /// Occupied windows in chronological order (empty when dates are
    /// unavailable on a non-drifting topic).
    pub windows: Vec<TemporalWindow>,
}

/// Count of complete calendar months from `a` to `b` (`b >= a`).
fn months_between(a: NaiveDate, b: NaiveDate) -> u32 {
    use chrono::Datelike;
    let raw = (b.year() - a.year()) * 12 + (b.month() as i32 - a.month() as i32);
    let complete = if b.day() < a.day() { raw - 1 } else { raw };
    complete.max(0) as u32
}

/// Group publication dates into 6-month buckets anchored at the earliest
/// date, and require evidence spanning well-separated eras on drifting
/// topics.
///
/// Passes when the occupied buckets span at least two bucket widths, which
/// puts the bucket midpoints of the extremes at least 12 months apart.
/// Non-drifting topics pass trivially. Missing publication dates on a
/// drifting topic are an error (the caller maps it to the cataloguing
/// abstain path).
pub fn temporal_diversity_ok(
    fragments: &[Fragment],
    _policy: &PolicySnapshot,
    topic_is_drifting: bool,
) -> Result<TemporalReport, PolicyError> {
    if fragments.is_empty() {
        return Err(PolicyError::EmptyPool { gate: "temporal_diversity_ok" });
    }

    let missing: Vec<String> = fragments
        .iter()
        .filter(|f| f.publication_date.is_none())
        .map(|f| f.fragment_id.clone())
        .collect();

    if !topic_is_drifting {
        let windows = if missing.is_empty() { bucket_windows(fragments) } else { Vec::new() };
        return Ok(TemporalReport { pass: true, drifting: false, windows });
    }
    if !missing.is_empty() {
        return Err(PolicyError::MissingDates { fragment_ids: missing });
    }

    let windows = bucket_windows(fragments);
    let earliest = fragments.iter().filter_map(|f| f.publication_date).min().expect("non-empty");
    let buckets: BTreeSet<u32> = fragments
        .iter()
        .filter_map(|f| f.publication_date)
        .map(|d| months_between(earliest, d) / BUCKET_MONTHS)
        .collect();
    let spread = buckets.iter().max().unwrap_or(&0) - buckets.iter().min().unwrap_or(&0);
    Ok(TemporalReport { pass: spread >= 2, drifting: true, windows })
}

/// Occupied 6-month buckets with member spans and bucket midpoints.
fn bucket_windows(fragments: &[Fragment]) -> Vec<TemporalWindow> {
    let dates: Vec<NaiveDate> = fragments.iter().filter_map(|f| f.publication_date).collect();
    let Some(earliest) = dates.iter().min().copied() else {
        return Vec::new();
    };
    let mut by_bucket: BTreeMap<u32, (NaiveDate, NaiveDate)> = BTreeMap::new();
    for d in dates {
        let b = months_between(earliest, d) / BUCKET_MONTHS;
        by_bucket
            .entry(b)
            .and_modify(|(lo, hi)| {
                *lo = (*lo).min(d);
                *hi = (*hi).max(d);
            })
            .or_insert((d, d));
    }
    by_bucket
        .into_iter()
        .map(|(b, (start, end))| TemporalWindow {
            start,
            end,
            midpoint: earliest + Months::new(b * BUCKET_MONTHS + BUCKET_MONTHS / 2),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Poisoning gate
// ---------------------------------------------------------------------------

/// Layers of the poisoning gate, in the order they are checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonLayer {
    /// (i) the candidate pool must carry enough distinct issuers.
    PoolDiversity,
    /// (ii) the evidence set may use each issuer at most once.
    MsesMonoculture,
    /// (iii) the independence score must clear the policy floor.
    IndependenceFloor,
    /// (iv) no issuer (or author, when capped) may dominate the supports.
    IssuerCap,
    /// (v) drifting topics must pass the temporal diversity gate.
    TemporalDrift,
}

impl fmt::Display for PoisonLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PoisonLayer::PoolDiversity => "pool_diversity",
            PoisonLayer::MsesMonoculture => "mses_monoculture",
            PoisonLayer::IndependenceFloor => "independence_floor",
            PoisonLayer::IssuerCap => "issuer_cap",
            PoisonLayer::TemporalDrift => "temporal_drift",
        };
        f.write_str(name)
    }
}

/// Outcome of the poisoning gate: pass, or the first failing layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonReport {
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_failure: Option<PoisonFailure>,
}

/// The first failing layer and a human-readable detail line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonFailure {
    pub layer: PoisonLayer,
    pub detail: String,
}

/// Run the layered supply-chain checks in fixed order and report the first
/// failure: (i) pool issuer diversity, (ii) evidence-set monoculture,
/// (iii) independence floor, (iv) issuer/author caps, (v) temporal
/// diversity on drifting topics (`temporal = None` means the topic is not
/// drifting).
pub fn poisoning_gate(
    pool: &[Fragment],
    evidence: &[Fragment],
    independence: &IndependenceReport,
    temporal: Option<&TemporalReport>,
    policy: &PolicySnapshot,
) -> Result<PoisonReport, PolicyError> {
    if pool.is_empty() {
        return Err(PolicyError::EmptyPool { gate: "poisoning_gate" });
    }

    let fail = |layer: PoisonLayer, detail: String| {
        Ok(PoisonReport { pass: false, first_failure: Some(PoisonFailure { layer, detail }) })
    };

    // (i) Pool issuer diversity.
    let pool_issuers: BTreeSet<&str> = pool.iter().map(|f| f.issuer.as_str()).collect();
    if (pool_issuers.len() as u32) < policy.min_issuer_diversity {
        return fail(
            PoisonLayer::PoolDiversity,
            format!(
                "pool has {} distinct issuer(s); policy requires {}",
                pool_issuers.len(),
                policy.min_issuer_diversity
            ),
        );
    }

    // (ii) Evidence-set monoculture.
    if policy.mses_monoculture_check {
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for f in evidence {
            *counts.entry(f.issuer.as_str()).or_insert(0) += 1;
        }
        if let Some((issuer, n)) = counts.iter().find(|(_, n)| **n > 1) {
            return fail(
                PoisonLayer::MsesMonoculture,
                format!("issuer `{issuer}` contributes {n} fragments to the evidence set"),
            );
        }
    }

    // (iii) Independence floor.
    if !independence.pass_independence {
        return fail(
            PoisonLayer::IndependenceFloor,
            format!(
                "g_indep = {} is below the floor {}",
                independence.g_indep,
                policy.g_indep_min
            ),
        );
    }

    // (iv) Issuer (and optional author) concentration caps.
    if !independence.pass_issuer_cap {
        return fail(
            PoisonLayer::IssuerCap,
            format!(
                "max issuer share {} exceeds the cap {}",
                independence.max_issuer_share,
                policy.issuer_cap
            ),
        );
    }
    if !independence.pass_author_cap {
        let share = independence
            .max_author_share
            .map(|s| s.to_string())
            .unwrap_or_else(|| "?".to_string());
        return fail(
            PoisonLayer::IssuerCap,
            format!("max author share {share} exceeds the cap {}", policy.author_cap),
        );
    }

    // (v) Temporal diversity on drifting topics.
    if let Some(t) = temporal {
        if t.drifting && !t.pass {
            return fail(
                PoisonLayer::TemporalDrift,
                "drifting topic evidence is concentrated in one era".to_string(),
            );
        }
    }

    Ok(PoisonReport { pass: true, first_failure: None })
}

// ---------------------------------------------------------------------------
// Metadata inference
// ---------------------------------------------------------------------------

/// Shard-level default tags that fragments may inherit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardDefaults {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jurisdiction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub effective_start: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub effective_end: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub publication_date: Option<NaiveDate>,
}

/// Catalog of shard-level defaults, keyed by shard id.
pub type ShardCatalog = BTreeMap<String, ShardDefaults>;

/// Fields that metadata inference can fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferredField {
    Jurisdiction,
    EffectiveStart,
    EffectiveEnd,
    PublicationDate,
}

/// Outcome of metadata inference for one fragment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    /// The fragment with inherited fields filled in.
    pub fragment: Fragment,
    /// Which fields were inherited from the shard.
    pub inferred: Vec<InferredField>,
    /// 1.0 when jurisdiction and the effective window are fully resolved
    /// (explicitly or by inheritance); 0.0 when any of them remains unknown.
    pub confidence: f64,
}

/// Fill missing jurisdiction and effective-date tags from shard-level
/// defaults. Explicit tags are never overridden. Inherited fields carry
/// confidence 1.0; if jurisdiction or either end of the effective window
/// cannot be resolved, overall confidence is 0.0 and the route's
/// `metadata_confidence_min` will push the request to the cataloguing
/// abstain path. Publication dates are inherited opportunistically but do
/// not affect confidence (their absence is policed by the temporal gate).
pub fn infer_metadata(fragment: &Fragment, catalog: &ShardCatalog) -> InferenceOutcome {
    let defaults = catalog.get(&fragment.shard_id);
    let mut patched = fragment.clone();
    let mut inferred = Vec::new();

    if patched.jurisdiction.is_none() {
        if let Some(j) = defaults.and_then(|d| d.jurisdiction.clone()) {
            patched.jurisdiction = Some(j);
            inferred.push(InferredField::Jurisdiction);
        }
    }
    if patched.effective_start.is_none() {
        if let Some(s) = defaults.and_then(|d| d.effective_start) {
            patched.effective_start = Some(s);
            inferred.push(InferredField::EffectiveStart);
        }
    }
    if patched.effective_end.is_none() {
        if let Some(e) = defaults.and_then(|d| d.effective_end) {
            patched.effective_end = Some(e);
            inferred.push(InferredField::EffectiveEnd);
        }
    }
    if patched.publication_date.is_none() {
        if let Some(p) = defaults.and_then(|d| d.publication_date) {
            patched.publication_date = Some(p);
            inferred.push(InferredField::PublicationDate);
        }
    }

    let resolved = patched.jurisdiction.is_some()
        && patched.effective_start.is_some()
        && patched.effective_end.is_some();
    let confidence = if resolved { 1.0 } else { 0.0 };

    InferenceOutcome { fragment: patched, inferred, confidence }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{g_indep, ProvenanceGraph, Share};

    fn make_fragment(id: &str, issuer: &str) -> Fragment {
        Fragment {
            fragment_id: id.to_string(),
            doc_id: format!("doc-{id}"),
            shard_id: "shard-1".to_string(),
            issuer: issuer.to_string(),
            author: format!("author-{issuer}"),
            jurisdiction: Some("EU".to_string()),
            effective_start: Some(NaiveDate::from_ymd_opt(2019, 1, 1).unwrap()),
            effective_end: Some(NaiveDate::from_ymd_opt(2030, 12, 31).unwrap()),
            publication_date: Some(NaiveDate::from_ymd_opt(2021, 3, 15).unwrap()),
            license: License { terms_id: "cc-by-4.0".to_string(), ttl_expiry_ms: u64::MAX },
            trust_tier: 3,
            language: "en".to_string(),
            content_hash: hash_domain("test:frag", &[id.as_bytes()]),
            selectors: vec![format!("p:{id}:0-100")],
            upstream_citations: Vec::new(),
            body: None,
        }
    }

    fn route_policy() -> PolicySnapshot {
        PolicySnapshot {
            route_jurisdictions: vec!["EU".to_string()],
            route_language: "en".to_string(),
            min_trust_tier: 2,
            ..PolicySnapshot::default()
        }
        .seal()
        .unwrap()
    }

    const NOW_MS: u64 = 1_705_000_000_000; // 2024-01-11

    // -- snapshot content addressing --------------------------------------

    #[test]
    fn sealed_snapshot_verifies_and_detects_drift() {
        let policy = route_policy();
        assert!(policy.verify_hash().unwrap());
        assert_ne!(policy.snapshot_hash, Digest::ZERO);

        let mut tampered = policy.clone();
        tampered.tau = 0.80;
        assert!(!tampered.verify_hash().unwrap());
    }

    #[test]
    fn stored_hash_is_excluded_from_its_own_preimage() {
        let a = route_policy();
        let mut b = a.clone();
        b.snapshot_hash = Digest::ZERO;
        assert_eq!(a.compute_hash().unwrap(), b.compute_hash().unwrap());
    }

    #[test]
    fn shallow_ancestry_requires_justification() {
        let shallow = PolicySnapshot { k_hops: 2, ..PolicySnapshot::default() };
        assert!(matches!(
            shallow.clone().seal(),
            Err(PolicyError::KJustificationRequired { k: 2 })
        ));

        let justified = PolicySnapshot {
            k_justification: Some("citation metadata only reliable to depth 2".to_string()),
            ..shallow
        };
        assert!(justified.seal().is_ok());
    }

    #[test]
    fn out_of_range_fields_are_rejected() {
        let bad_tau = PolicySnapshot { tau: 1.5, ..PolicySnapshot::default() };
        assert!(matches!(bad_tau.seal(), Err(PolicyError::InvalidField { field: "tau", .. })));

        let bad_band =
            PolicySnapshot { margin_band: (0.75, 0.55), ..PolicySnapshot::default() };
        assert!(bad_band.seal().is_err());

        let bad_weights = PolicySnapshot {
            justification_weights: JustificationWeights {
                w_support: 0.5,
                w_indep: 0.5,
                w_minimality: 0.2,
            },
            ..PolicySnapshot::default()
        };
        assert!(bad_weights.seal().is_err());
    }

    // -- scope gate --------------------------------------------------------

    #[test]
    fn clean_pool_is_in_scope() {
        let pool = vec![make_fragment("f1", "issuer-a"), make_fragment("f2", "issuer-b")];
        let report = scope_ok(&pool, &route_policy(), NOW_MS).unwrap();
        assert!(report.ok);
        assert!(report.reasons.is_empty());
    }

    #[test]
    fn jurisdiction_and_expired_license_are_flagged() {
        let mut off_route = make_fragment("f-us", "issuer-a");
        off_route.jurisdiction = Some("US".to_string());
        let mut expired = make_fragment("f-old", "issuer-b");
        expired.license.ttl_expiry_ms = NOW_MS - 1;
        let pool = vec![off_route, expired, make_fragment("f-ok", "issuer-c")];

        let report = scope_ok(&pool, &route_policy(), NOW_MS).unwrap();
        assert!(!report.ok);
        assert_eq!(report.ids_for(ScopeCategory::Jurisdiction).unwrap(), ["f-us"]);
        assert_eq!(report.ids_for(ScopeCategory::LicenseTtl).unwrap(), ["f-old"]);
        assert_eq!(report.reasons.len(), 2);
    }

    #[test]
    fn remaining_categories_are_each_detected() {
        let policy = route_policy();

        let mut stale = make_fragment("f-stale", "a");
        stale.effective_end = Some(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap());
        let report = scope_ok(&[stale], &policy, NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::EffectiveDate).unwrap(), ["f-stale"]);

        let mut untrusted = make_fragment("f-tier", "a");
        untrusted.trust_tier = 1;
        let report = scope_ok(&[untrusted], &policy, NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::TrustTier).unwrap(), ["f-tier"]);

        let mut anchorless = make_fragment("f-anchor", "a");
        anchorless.selectors.clear();
        let report = scope_ok(&[anchorless], &policy, NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::AnchorMissing).unwrap(), ["f-anchor"]);

        let mut wrong_lang = make_fragment("f-lang", "a");
        wrong_lang.language = "de".to_string();
        let report = scope_ok(&[wrong_lang], &policy, NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::LanguageMismatch).unwrap(), ["f-lang"]);

        let mut bad_license = make_fragment("f-lic", "a");
        bad_license.license.terms_id = "  ".to_string();
        let report = scope_ok(&[bad_license], &policy, NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::MalformedLicense).unwrap(), ["f-lic"]);
    }

    #[test]
    fn exact_duplicates_flag_the_later_fragment() {
        let f1 = make_fragment("f1", "issuer-a");
        let mut f2 = make_fragment("f2", "issuer-b");
        f2.content_hash = f1.content_hash;
        let report = scope_ok(&[f1, f2], &route_policy(), NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::Duplicate).unwrap(), ["f2"]);
    }

    #[test]
    fn near_duplicate_bodies_are_collapsed_by_shingle_similarity() {
        let base: Vec<String> = (0..300).map(|i| format!("word{i}")).collect();
        let mut f1 = make_fragment("f1", "issuer-a");
        f1.body = Some(base.join(" "));
        let mut f2 = make_fragment("f2", "issuer-b");
        let mut tweaked = base.clone();
        tweaked[299] = "changed".to_string();
        f2.body = Some(tweaked.join(" "));
        let mut f3 = make_fragment("f3", "issuer-c");
        f3.body = Some((0..300).map(|i| format!("other{i}")).collect::<Vec<_>>().join(" "));

        let policy = route_policy();
        // Changing the last word of 300 leaves 285 of 301 shingles shared.
        assert!(is_near_duplicate(&f1, &f2, &policy));
        assert!(!is_near_duplicate(&f1, &f3, &policy));

        let report = scope_ok(&[f1, f2, f3], &policy, NOW_MS).unwrap();
        assert_eq!(report.ids_for(ScopeCategory::Duplicate).unwrap(), ["f2"]);
    }

    #[test]
    fn injected_timeout_reason_flips_ok() {
        let mut report = ScopeReport::pass();
        assert!(report.ok);
        report.add(ScopeCategory::Timeout, Vec::new());
        assert!(!report.ok);
        assert_eq!(report.reasons.len(), 1);
    }

    #[test]
    fn selector_over_cap_is_malformed() {
        let mut f = make_fragment("f-sel", "a");
        f.selectors = vec!["x".repeat(SELECTOR_MAX_BYTES + 1)];
        assert!(matches!(
            scope_ok(&[f], &route_policy(), NOW_MS),
            Err(PolicyError::MalformedFragment { .. })
        ));
    }

    // -- temporal gate -----------------------------------------------------

    fn dated(id: &str, issuer: &str, date: (i32, u32, u32)) -> Fragment {
        let mut f = make_fragment(id, issuer);
        f.publication_date = Some(NaiveDate::from_ymd_opt(date.0, date.1, date.2).unwrap());
        f
    }

    #[test]
    fn complete_month_arithmetic() {
        let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd).unwrap();
        assert_eq!(months_between(d(2020, 1, 15), d(2020, 2, 14)), 0);
        assert_eq!(months_between(d(2020, 1, 15), d(2020, 2, 15)), 1);
        assert_eq!(months_between(d(2020, 1, 31), d(2020, 3, 1)), 1);
        assert_eq!(months_between(d(2020, 5, 1), d(2022, 3, 1)), 22);
        assert_eq!(months_between(d(2020, 5, 1), d(2020, 5, 1)), 0);
    }

    #[test]
    fn single_era_evidence_fails_on_drifting_topics() {
        let pool = vec![
            dated("f1", "a", (2020, 2, 10)),
            dated("f2", "b", (2020, 5, 20)),
            dated("f3", "c", (2020, 6, 30)),
        ];
        let report = temporal_diversity_ok(&pool, &route_policy(), true).unwrap();
        assert!(!report.pass);
        assert!(report.drifting);
    }

    #[test]
    fn well_separated_eras_pass_and_windows_are_reported() {
        let pool = vec![
            dated("f1", "a", (2020, 2, 10)),
            dated("f2", "b", (2020, 5, 20)),
            dated("f3", "c", (2022, 3, 1)),
        ];
        let report = temporal_diversity_ok(&pool, &route_policy(), true).unwrap();
        assert!(report.pass);
        assert_eq!(report.windows.len(), 2);

        let first = report.windows[0];
        assert_eq!(first.start, NaiveDate::from_ymd_opt(2020, 2, 10).unwrap());
        assert_eq!(first.end, NaiveDate::from_ymd_opt(2020, 5, 20).unwrap());
        assert_eq!(first.midpoint, NaiveDate::from_ymd_opt(2020, 5, 10).unwrap());

        let second = report.windows[1];
        assert_eq!(second.start, NaiveDate::from_ymd_opt(2022, 3, 1).unwrap());
        // 24 complete months => bucket 4; midpoint anchored at 27 months.
        assert_eq!(second.midpoint, NaiveDate::from_ymd_opt(2022, 5, 10).unwrap());

        // Bucket midpoints of the extremes are at least 12 months apart.
        assert!(months_between(first.midpoint, second.midpoint) >= 12);
    }

    #[test]
    fn adjacent_buckets_are_not_diverse_enough() {
        // Eight months apart: buckets 0 and 1, midpoints only 6 months apart.
        let pool = vec![dated("f1", "a", (2020, 1, 1)), dated("f2", "b", (2020, 9, 1))];
        let report = temporal_diversity_ok(&pool, &route_policy(), true).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn non_drifting_topics_pass_trivially() {
        let pool = vec![dated("f1", "a", (2020, 2, 10)), dated("f2", "b", (2020, 3, 10))];
        let report = temporal_diversity_ok(&pool, &route_policy(), false).unwrap();
        assert!(report.pass);
        assert!(!report.drifting);
        assert_eq!(report.windows.len(), 1);
    }

    #[test]
    fn missing_dates_on_drifting_topic_error() {
        let pool = vec![make_fragment("f1", "a"), {
            let mut f = make_fragment("f2", "b");
            f.publication_date = None;
            f
        }];
        match temporal_diversity_ok(&pool, &route_policy(), true) {
            Err(PolicyError::MissingDates { fragment_ids }) => {
                assert_eq!(fragment_ids, vec!["f2".to_string()]);
            }
            other => panic!("expected MissingDates, got {other:?}"),
        }
    }

    // -- poisoning gate ----------------------------------------------------

    fn independence_for(supports: &[Fragment], policy: &PolicySnapshot) -> IndependenceReport {
        let graph = ProvenanceGraph::build(supports, &BTreeMap::new());
        g_indep(supports, &graph, policy).unwrap()
    }

    #[test]
    fn worked_pool_passes_every_layer() {
        let pool = vec![
            make_fragment("f1", "issuer-a"),
            make_fragment("f2", "issuer-b"),
            make_fragment("f3", "issuer-c"),
        ];
        let evidence = vec![pool[0].clone(), pool[1].clone()];
        let policy = route_policy();
        let indep = independence_for(&evidence, &policy);
        assert_eq!(indep.g_indep, Share::new(1, 1));

        let report = poisoning_gate(&pool, &evidence, &indep, None, &policy).unwrap();
        assert!(report.pass);
        assert!(report.first_failure.is_none());
    }

    #[test]
    fn thin_pool_fails_layer_one_first() {
        // Pool {a, a, b} has two distinct issuers < 3, and the evidence set
        // also violates the issuer cap; layer (i) must be reported.
        let pool = vec![
            make_fragment("f1", "issuer-a"),
            make_fragment("f2", "issuer-a"),
            make_fragment("f3", "issuer-b"),
        ];
        let policy = route_policy();
        let indep = independence_for(&pool, &policy);
        let report = poisoning_gate(&pool, &pool, &indep, None, &policy).unwrap();
        assert!(!report.pass);
        assert_eq!(report.first_failure.unwrap().layer, PoisonLayer::PoolDiversity);
    }

    #[test]
    fn repeated_issuer_in_evidence_fails_monoculture() {
        let pool = vec![
            make_fragment("f1", "issuer-a"),
            make_fragment("f2", "issuer-a"),
            make_fragment("f3", "issuer-b"),
            make_fragment("f4", "issuer-c"),
        ];
        let evidence = vec![pool[0].clone(), pool[1].clone()];
        let policy = route_policy();
        // Hand the gate a passing independence report to isolate layer (ii).
        let ok_evidence =
            vec![make_fragment("x1", "issuer-b"), make_fragment("x2", "issuer-c")];
        let indep = independence_for(&ok_evidence, &policy);
        let report = poisoning_gate(&pool, &evidence, &indep, None, &policy).unwrap();
        assert_eq!(report.first_failure.unwrap().layer, PoisonLayer::MsesMonoculture);
    }

    #[test]
    fn independence_floor_and_cap_fail_in_order() {
        let policy = route_policy();
        let pool = vec![
            make_fragment("f1", "issuer-a"),
            make_fragment("f2", "issuer-b"),
            make_fragment("f3", "issuer-c"),
        ];

        // Same-issuer supports: g_indep = 0 fails the floor before the cap.
        let same = vec![make_fragment("s1", "issuer-a"), make_fragment("s2", "issuer-a")];
        let indep = independence_for(&same, &policy);
        assert!(!indep.pass_independence);
        let report =
            poisoning_gate(&pool, &[same[0].clone(), pool[1].clone()], &indep, None, &policy)
                .unwrap();
        assert_eq!(report.first_failure.unwrap().layer, PoisonLayer::IndependenceFloor);

        // Independent supports {a, a, b}: floor passes via distinct docs,
        // but issuer-a holds 2/3 > 1/2.
        let skew = vec![
            make_fragment("t1", "issuer-a"),
            make_fragment("t2", "issuer-a"),
            make_fragment("t3", "issuer-b"),
        ];
        let mut indep = independence_for(&skew, &policy);
        indep.pass_independence = true; // isolate layer (iv)
        let report = poisoning_gate(&pool, &skew, &indep, None, &policy);
        // Monoculture (layer ii) fires first on {a, a, b}; disable it to
        // observe the cap layer.
        assert_eq!(
            report.unwrap().first_failure.unwrap().layer,
            PoisonLayer::MsesMonoculture
        );
        let mut lax = route_policy();
        lax.mses_monoculture_check = false;
        let lax = PolicySnapshot { snapshot_hash: Digest::ZERO, ..lax }.seal().unwrap();
        let report = poisoning_gate(&pool, &skew, &indep, None, &lax).unwrap();
        assert_eq!(report.first_failure.unwrap().layer, PoisonLayer::IssuerCap);
    }

    #[test]
    fn drifting_monoculture_fails_last_layer() {
        let pool = vec![
            dated("f1", "issuer-a", (2020, 2, 1)),
            dated("f2", "issuer-b", (2020, 3, 1)),
            dated("f3", "issuer-c", (2020, 4, 1)),
        ];
        let evidence = vec![pool[0].clone(), pool[1].clone()];
        let policy = route_policy();
        let indep = independence_for(&evidence, &policy);
        let temporal = temporal_diversity_ok(&pool, &policy, true).unwrap();
        assert!(!temporal.pass);

        let report =
            poisoning_gate(&pool, &evidence, &indep, Some(&temporal), &policy).unwrap();
        assert_eq!(report.first_failure.unwrap().layer, PoisonLayer::TemporalDrift);
    }

    // -- metadata inference -------------------------------------------------

    fn catalog_with_defaults() -> ShardCatalog {
        let mut catalog = ShardCatalog::new();
        catalog.insert(
            "shard-1".to_string(),
            ShardDefaults {
                jurisdiction: Some("EU".to_string()),
                effective_start: NaiveDate::from_ymd_opt(2019, 1, 1),
                effective_end: NaiveDate::from_ymd_opt(2030, 12, 31),
                publication_date: None,
            },
        );
        catalog
    }

    #[test]
    fn missing_tags_inherit_from_shard_with_full_confidence() {
        let mut f = make_fragment("f1", "issuer-a");
        f.jurisdiction = None;
        f.effective_start = None;
        let outcome = infer_metadata(&f, &catalog_with_defaults());
        assert_eq!(outcome.confidence, 1.0);
        assert_eq!(outcome.fragment.jurisdiction.as_deref(), Some("EU"));
        assert_eq!(
            outcome.inferred,
            vec![InferredField::Jurisdiction, InferredField::EffectiveStart]
        );
    }

    #[test]
    fn explicit_tags_are_never_overridden() {
        let mut f = make_fragment("f1", "issuer-a");
        f.jurisdiction = Some("US".to_string());
        let outcome = infer_metadata(&f, &catalog_with_defaults());
        assert_eq!(outcome.fragment.jurisdiction.as_deref(), Some("US"));
        assert!(outcome.inferred.is_empty());
        assert_eq!(outcome.confidence, 1.0);
    }

    #[test]
    fn unresolvable_tags_yield_zero_confidence() {
        let mut f = make_fragment("f1", "issuer-a");
        f.shard_id = "shard-unknown".to_string();
        f.jurisdiction = None;
        let outcome = infer_metadata(&f, &catalog_with_defaults());
        assert_eq!(outcome.confidence, 0.0);
        assert!(outcome.inferred.is_empty());
        assert!(outcome.fragment.jurisdiction.is_none());
    }

    #[test]
    fn fragment_roundtrips_through_canonical_json() {
        let f = make_fragment("f1", "issuer-a");
        let bytes = canon::canonical_bytes(&f).unwrap();
        let back: Fragment = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(f, back);

        // Optional fields are omitted rather than serialized as null.
        let mut bare = make_fragment("f2", "issuer-b");
        bare.jurisdiction = None;
        bare.publication_date = None;
        let text = String::from_utf8(canon::canonical_bytes(&bare).unwrap()).unwrap();
        assert!(!text.contains("null"));
    }
}
