//! The decision cascade: scope → verifier tiers → multiplicity budgets →
//! heavy-verifier governance → independence → proof policy → return state.
//!
//! [`decide`] executes the stages in a fixed order and always lands on one
//! of three return states: `PROMOTE_FULL`, `PROMOTE_LITE`, or `ABSTAIN`
//! with a machine-readable reason. The engine is fail-closed — internal
//! faults abstain, never promote — and deterministic: sampling draws and
//! retry jitter derive from seeds, timing flows through an injected clock,
//! and stage latency is explicit budget arithmetic over declared costs, so
//! a scripted run reproduces byte-identical traces.
//!
//! Heavy-verifier usage is governed by a 7-day sliding window with an
//! exact-rational share cap, atomic reservations, and ticketed, time-boxed
//! incident bypasses. At most one heavy call ever runs per request.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::graph::{build_graph, g_indep, CitationIndex, IndependenceReport, Share};
use crate::hash::{hash_domain, hash_to_unit};
use crate::mses::{
    extract_mses, justification_score, EvidencePack, JustificationScore, StandardGate, Tier,
    VerdictedFragment,
};
use crate::policy::{
    poisoning_gate, scope_ok, temporal_diversity_ok, Backoff, Fragment, LatencyBudget,
    PoisonLayer, PoisonReport, PolicyError, PolicySnapshot, ScopeCategory, ScopeReport,
    StageTimeout, TemporalReport,
};
use crate::stats::{
    by_fdr, holm_fwer, jitter_tau, ConditionalPowerEstimate, DependenceReport, FamilyKind,
    MultiplicityResult, PValueFamily,
};

/// Top-K candidate count after the cheap tier.
pub const TOP_K1: usize = 8;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Errors raised by route-state operations. The decision cascade itself
/// never surfaces errors — faults map to ABSTAIN.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no active incident to close")]
    NoActiveIncident,
    #[error("incident `{active}` is already open")]
    OverlappingIncident { active: String },
}

// ---------------------------------------------------------------------------
// Return states and reason codes
// ---------------------------------------------------------------------------

/// The three canonical return states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReturnState {
    PromoteFull,
    PromoteLite,
    Abstain,
}

impl fmt::Display for ReturnState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ReturnState::PromoteFull => "PROMOTE_FULL",
            ReturnState::PromoteLite => "PROMOTE_LITE",
            ReturnState::Abstain => "ABSTAIN",
        };
        f.write_str(name)
    }
}

/// Canonical machine-readable reason codes. Every abstain or lite decision
/// carries exactly one primary code; unmapped strings are treated as
/// errors by [`ReasonCode::from_code`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    Scope,
    ScopeOrFreshness,
    NeedsCataloging,
    InsufficientSupport,
    RiskBounds,
    HeavyVeto,
    IndependenceOrCap,
    InsufficientDiversity,
    ProofTimeoutOrSize,
    HeavyBudgetExhausted,
    BudgetExhausted,
    Privacy,
}

impl ReasonCode {
    pub fn code(&self) -> &'static str {
        match self {
            ReasonCode::Scope => "scope",
            ReasonCode::ScopeOrFreshness => "scope_or_freshness",
            ReasonCode::NeedsCataloging => "needs_cataloging",
            ReasonCode::InsufficientSupport => "insufficient_support",
            ReasonCode::RiskBounds => "risk_bounds",
            ReasonCode::HeavyVeto => "heavy_veto",
            ReasonCode::IndependenceOrCap => "independence_or_cap",
            ReasonCode::InsufficientDiversity => "insufficient_diversity",
            ReasonCode::ProofTimeoutOrSize => "proof_timeout_or_size",
            ReasonCode::HeavyBudgetExhausted => "heavy_budget_exhausted",
            ReasonCode::BudgetExhausted => "budget_exhausted",
            ReasonCode::Privacy => "privacy",
        }
    }

    /// Parse a canonical code; `None` marks an unmapped (erroneous) code.
    pub fn from_code(code: &str) -> Option<ReasonCode> {
        [
            ReasonCode::Scope,
            ReasonCode::ScopeOrFreshness,
            ReasonCode::NeedsCataloging,
            ReasonCode::InsufficientSupport,
            ReasonCode::RiskBounds,
            ReasonCode::HeavyVeto,
            ReasonCode::IndependenceOrCap,
            ReasonCode::InsufficientDiversity,
            ReasonCode::ProofTimeoutOrSize,
            ReasonCode::HeavyBudgetExhausted,
            ReasonCode::BudgetExhausted,
            ReasonCode::Privacy,
        ]
        .into_iter()
        .find(|r| r.code() == code)
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

// ---------------------------------------------------------------------------
// Requests and verifier tiers
// ---------------------------------------------------------------------------

/// One gated answer request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    /// The claim the answer would assert.
    pub claim: String,
    /// Candidate evidence fragments from retrieval.
    pub fragments: Vec<Fragment>,
    pub session_class: String,
    pub high_stakes: bool,
    pub org_id: String,
    pub route_id: String,
    /// Arrival timestamp (epoch ms).
    pub arrival_ms: u64,
    /// In-context-drift score from the upstream detector, when measured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adversarial_score: Option<f64>,
    /// Upstream retrieval-anomaly flag (detection is out of scope here).
    #[serde(default)]
    pub retrieval_anomaly: bool,
}

/// One tier's verdict on a (fragment, claim) pair.
///
/// `p_support` and `p_contradict` are p-values of the respective nulls
/// ("does not support" / "does not contradict"): smaller means stronger
/// evidence. `calibrated_confidence` is a probability-like score (higher
/// is more confident) used for margins and justification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierVerdict {
    pub support: bool,
    pub contradict: bool,
    pub p_support: f64,
    pub p_contradict: f64,
    pub calibrated_confidence: f64,
    /// Declared evaluation cost; at or above the stage timeout it counts
    /// as a timed-out attempt.
    pub elapsed_ms: u64,
}

/// A pluggable verifier tier. Implementations must be deterministic for a
/// given (fragment, claim, tier) in test mode and respect the timeout.
pub trait VerifierTier {
    fn tier(&self) -> Tier;
    fn evaluate(&self, fragment: &Fragment, claim: &str, timeout_ms: u64) -> TierVerdict;
}

/// Table-driven verifier for fixtures and tests: verdicts keyed by
/// fragment id, with an optional default for unlisted fragments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableVerifier {
    pub tier: Tier,
    pub table: BTreeMap<String, TierVerdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub default: Option<TierVerdict>,
}

impl TableVerifier {
    pub fn new(tier: Tier) -> TableVerifier {
        TableVerifier { tier, table: BTreeMap::new(), default: None }
    }

    pub fn with(mut self, fragment_id: &str, verdict: TierVerdict) -> TableVerifier {
        self.table.insert(fragment_id.to_string(), verdict);
        self
    }

    pub fn with_default(mut self, verdict: TierVerdict) -> TableVerifier {
        self.default = Some(verdict);
        self
    }
}

impl VerifierTier for TableVerifier {
    fn tier(&self) -> Tier {
        self.tier
    }

    fn evaluate(&self, fragment: &Fragment, _claim: &str, _timeout_ms: u64) -> TierVerdict {
        self.table.get(&fragment.fragment_id).copied().or(self.default).unwrap_or(
            // Unknown fragment: a neutral non-supporting verdict.
            TierVerdict {
                support: false,
                contradict: false,
                p_support: 1.0,
                p_contradict: 1.0,
                calibrated_confidence: 0.0,
                elapsed_ms: 1,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Proof plumbing
// ---------------------------------------------------------------------------

/// An inclusion multiproof produced for the evidence set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProofRecord {
    /// Document ids proven, sorted.
    pub doc_ids: Vec<String>,
    /// Manifest root the proof verifies against, lowercase hex.
    pub root_hex: String,
    /// Serialized proof bytes, lowercase hex.
    pub proof_hex: String,
    pub size_bytes: usize,
    pub elapsed_ms: u64,
    pub timed_out: bool,
}

/// Source of inclusion proofs (a manifest holder). `Err` is a fetch or
/// construction failure, which degrades the decision like a timeout.
pub trait ProofSource {
    fn prove(&self, doc_ids: &[String]) -> Result<ProofRecord, String>;
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

/// Result of one attempt inside [`run_stage`].
pub enum AttemptResult<T> {
    Done { value: T, elapsed_ms: u64 },
    TimedOut,
}

/// Accounting for one attempt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub at_ms: u64,
    pub timed_out: bool,
    /// Budget cost charged: the declared cost, capped at the timeout.
    pub elapsed_ms: u64,
}

/// Outcome of a stage after retries: the value (absent when every attempt
/// timed out) and the total budget cost including backoff waits.
#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub stage: String,
    pub value: Option<T>,
    pub elapsed_ms: u64,
    pub attempts: Vec<AttemptRecord>,
}

/// Deterministic backoff before retry number `attempt + 1`. Exponential
/// backoff doubles per attempt and adds half of `hash mod base` as jitter,
/// so a fixed seed reproduces identical schedules.
pub fn backoff_delay(backoff: Backoff, stage: &str, attempt: u32, seed: &str) -> u64 {
    match backoff {
        Backoff::Fixed { ms } => ms,
        Backoff::Exponential { base_ms } => {
            let base = base_ms.max(1);
            let h = hash_domain(
                "backoff:v1",
                &[seed.as_bytes(), stage.as_bytes(), &attempt.to_be_bytes()],
            );
            let word = u64::from_be_bytes(h.as_bytes()[..8].try_into().expect("8 bytes"));
            (base << attempt) + (word % base) / 2
        }
    }
}

/// Run one pipeline stage under its timeout/retry budget.
///
/// The executor reports each attempt as done (with its cost) or timed out;
/// a timed-out attempt is charged the full per-attempt timeout, and
/// retries are separated by the deterministic backoff. Latency is budget
/// arithmetic over declared costs — no wall-clock sleeping — so scripted
/// runs are exactly reproducible.
pub fn run_stage<T>(
    stage: &str,
    spec: StageTimeout,
    session_seed: &str,
    clock: &dyn Clock,
    mut attempt: impl FnMut(u32) -> AttemptResult<T>,
) -> StageOutcome<T> {
    let mut outcome = StageOutcome {
        stage: stage.to_string(),
        value: None,
        elapsed_ms: 0,
        attempts: Vec::new(),
    };
    for i in 0..=spec.retries {
        match attempt(i) {
            AttemptResult::Done { value, elapsed_ms } => {
                let cost = elapsed_ms.min(spec.timeout_ms);
                outcome.attempts.push(AttemptRecord {
                    attempt: i,
                    at_ms: clock.now_ms(),
                    timed_out: false,
                    elapsed_ms: cost,
                });
                outcome.elapsed_ms += cost;
                outcome.value = Some(value);
                return outcome;
            }
            AttemptResult::TimedOut => {
                outcome.attempts.push(AttemptRecord {
                    attempt: i,
                    at_ms: clock.now_ms(),
                    timed_out: true,
                    elapsed_ms: spec.timeout_ms,
                });
                outcome.elapsed_ms += spec.timeout_ms;
                if i < spec.retries {
                    if let Some(b) = spec.backoff {
                        outcome.elapsed_ms += backoff_delay(b, stage, i, session_seed);
                    }
                }
            }
        }
    }
    outcome
}

// ---------------------------------------------------------------------------
// Rate limiting
// ---------------------------------------------------------------------------

/// A token bucket: `capacity` burst, `refill_per_s` sustained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBucket {
    pub capacity: f64,
    pub tokens: f64,
    pub refill_per_s: f64,
    pub last_refill_ms: u64,
}

impl TokenBucket {
    pub fn new(capacity: u32, refill_per_s: f64, now_ms: u64) -> TokenBucket {
        TokenBucket {
            capacity: capacity as f64,
            tokens: capacity as f64,
            refill_per_s,
            last_refill_ms: now_ms,
        }
    }

    /// Refill for elapsed time, then take one token if available.
    pub fn admit(&mut self, now_ms: u64) -> bool {
        let elapsed_s = now_ms.saturating_sub(self.last_refill_ms) as f64 / 1000.0;
        self.tokens = (self.tokens + elapsed_s * self.refill_per_s).min(self.capacity);
        self.last_refill_ms = now_ms;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

/// Rate-limit admission result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    Admit,
    /// Which bucket denied: `"route"` or `"org"`.
    Deny { bucket: String },
}

/// Token-bucket admission: the route burst bucket first, then the org
/// sustained bucket. Denials are counted on the route but never produce a
/// receipt.
pub fn rate_limit(route: &mut RouteState, org_id: &str, now_ms: u64) -> Admission {
    if !route.route_bucket.admit(now_ms) {
        route.denials += 1;
        return Admission::Deny { bucket: "route".to_string() };
    }
    let limits = route.rate_limits;
    let org = route
        .org_buckets
        .entry(org_id.to_string())
        .or_insert_with(|| TokenBucket::new(limits.0, limits.1, now_ms));
    if !org.admit(now_ms) {
        route.denials += 1;
        return Admission::Deny { bucket: "org".to_string() };
    }
    Admission::Admit
}

// ---------------------------------------------------------------------------
// Route state: window, reservations, incidents
// ---------------------------------------------------------------------------

/// One decided request in the sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEvent {
    pub ts_ms: u64,
    pub was_heavy: bool,
}

/// A time-boxed, ticketed cap bypass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub ticket_id: String,
    pub started_at_ms: u64,
    pub expires_at_ms: u64,
}

/// Incident lifecycle events, receipt-logged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentEvent {
    Opened,
    Closed,
    AutoExpired,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentLogEntry {
    pub at_ms: u64,
    pub event: IncidentEvent,
    pub ticket_id: String,
}

/// Incident-mode actions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IncidentAction {
    Open { ticket_id: String, duration_ms: u64 },
    Close,
}

/// A granted heavy-verifier slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub reservation_id: String,
    /// Post-grant heavy share at grant time (1/1 during incident bypass).
    pub share_at_grant: Share,
    /// Incident ticket when granted under a cap bypass.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub incident: Option<String>,
}

/// Outcome of a reservation attempt.
#[derive(Clone, Debug, PartialEq)]
pub enum ReservationOutcome {
    Granted(Reservation),
    Denied { share_if_granted: Share },
}

/// Mutable per-route budget and admission state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteState {
    pub route_id: String,
    /// Decided requests in the sliding window (pruned on read).
    pub window: Vec<WindowEvent>,
    /// Window span in milliseconds.
    pub window_ms: u64,
    /// Granted-but-unsettled heavy slots.
    pub inflight_heavy: u32,
    /// Active incident, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub incident: Option<Incident>,
    pub incident_log: Vec<IncidentLogEntry>,
    /// Latest conditional-power estimate for the route, when measured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conditional_power: Option<ConditionalPowerEstimate>,
    /// Proof verification latencies for the aggregate histogram.
    pub proof_latencies_ms: Vec<u64>,
    pub route_bucket: TokenBucket,
    pub org_buckets: BTreeMap<String, TokenBucket>,
    /// (org capacity, org refill) template for new org buckets.
    rate_limits: (u32, f64),
    pub denials: u64,
    reservation_seq: u64,
}

impl RouteState {
    pub fn new(route_id: &str, policy: &PolicySnapshot, now_ms: u64) -> RouteState {
        let rl = policy.rate_limits;
        RouteState {
            route_id: route_id.to_string(),
            window: Vec::new(),
            window_ms: policy.heavy_window_days as u64 * 24 * 60 * 60 * 1000,
            inflight_heavy: 0,
            incident: None,
            incident_log: Vec::new(),
            conditional_power: None,
            proof_latencies_ms: Vec::new(),
            route_bucket: TokenBucket::new(rl.route_capacity, rl.route_refill_per_s, now_ms),
            org_buckets: BTreeMap::new(),
            rate_limits: (rl.org_capacity, rl.org_refill_per_s),
            denials: 0,
            reservation_seq: 0,
        }
    }

    /// Drop events older than the window. Counters only decrease by
    /// timestamp expiry, never by mutation.
    pub fn prune(&mut self, now_ms: u64) {
        let span = self.window_ms;
        self.window.retain(|e| now_ms.saturating_sub(e.ts_ms) < span);
    }

    /// Heavy share over the true timestamp window.
    pub fn heavy_share(&mut self, now_ms: u64) -> Share {
        self.prune(now_ms);
        let total = self.window.len() as u64;
        if total == 0 {
            return Share::zero();
        }
        let heavy = self.window.iter().filter(|e| e.was_heavy).count() as u64;
        Share::new(heavy, total)
    }

    pub fn record_event(&mut self, ts_ms: u64, was_heavy: bool) {
        self.window.push(WindowEvent { ts_ms, was_heavy });
    }

    /// Auto-close an expired incident ("reversion to standard caps is
    /// mandatory at closure").
    pub fn tick(&mut self, now_ms: u64) {
        if let Some(inc) = &self.incident {
            if now_ms >= inc.expires_at_ms {
                self.incident_log.push(IncidentLogEntry {
                    at_ms: now_ms,
                    event: IncidentEvent::AutoExpired,
                    ticket_id: inc.ticket_id.clone(),
                });
                self.incident = None;
            }
        }
    }

    pub fn incident_active(&mut self, now_ms: u64) -> Option<String> {
        self.tick(now_ms);
        self.incident.as_ref().map(|i| i.ticket_id.clone())
    }
}

/// Atomically reserve a heavy-verifier slot against the 7-day window.
///
/// The post-grant share counts the prospective call and every in-flight
/// grant in both numerator and denominator, compared exactly against the
/// cap; an active incident bypasses the cap and tags the reservation. On
/// a cold route the conservative arithmetic denies heavy calls until
/// enough non-heavy traffic accrues — fail-closed by construction.
pub fn reserve_heavy_slot(
    route: &mut RouteState,
    now_ms: u64,
    policy: &PolicySnapshot,
) -> ReservationOutcome {
    let incident = route.incident_active(now_ms);
    route.prune(now_ms);
    let total = route.window.len() as u64;
    let heavy = route.window.iter().filter(|e| e.was_heavy).count() as u64;
    let inflight = route.inflight_heavy as u64;
    let share_if_granted = Share::new(heavy + inflight + 1, total + inflight + 1);

    if incident.is_none() && !share_if_granted.le_f64(policy.heavy_cap) {
        return ReservationOutcome::Denied { share_if_granted };
    }

    route.reservation_seq += 1;
    route.inflight_heavy += 1;
    ReservationOutcome::Granted(Reservation {
        reservation_id: format!("res-{}-{}", route.route_id, route.reservation_seq),
        share_at_grant: share_if_granted,
        incident,
    })
}

/// Release a reservation whose heavy call was skipped.
pub fn release_reservation(route: &mut RouteState, _reservation: &Reservation) {
    route.inflight_heavy = route.inflight_heavy.saturating_sub(1);
}

/// Settle a reservation whose heavy call ran: record the heavy event.
pub fn finalize_heavy(route: &mut RouteState, _reservation: &Reservation, now_ms: u64) {
    route.inflight_heavy = route.inflight_heavy.saturating_sub(1);
    route.record_event(now_ms, true);
}

/// Open or close incident mode. Both directions emit receipt-logged
/// entries; expiry auto-closes via [`RouteState::tick`].
pub fn incident_mode(
    route: &mut RouteState,
    action: IncidentAction,
    clock: &dyn Clock,
) -> Result<IncidentLogEntry, EngineError> {
    let now = clock.now_ms();
    route.tick(now);
    let entry = match action {
        IncidentAction::Open { ticket_id, duration_ms } => {
            if let Some(active) = &route.incident {
                return Err(EngineError::OverlappingIncident {
                    active: active.ticket_id.clone(),
                });
            }
            route.incident = Some(Incident {
                ticket_id: ticket_id.clone(),
                started_at_ms: now,
                expires_at_ms: now + duration_ms,
            });
            IncidentLogEntry { at_ms: now, event: IncidentEvent::Opened, ticket_id }
        }
        IncidentAction::Close => {
            let active = route.incident.take().ok_or(EngineError::NoActiveIncident)?;
            IncidentLogEntry {
                at_ms: now,
                event: IncidentEvent::Closed,
                ticket_id: active.ticket_id,
            }
        }
    };
    route.incident_log.push(entry.clone());
    Ok(entry)
}

/// True when the consumed time plus the projected heavy call and the
/// remaining mandatory segments (proofs, signing) fit the end-to-end
/// budget. A skipped heavy call spends none of its budget.
pub fn fits_latency_budget(
    consumed_ms: u64,
    budget: &LatencyBudget,
    projected_heavy_ms: u64,
) -> bool {
    consumed_ms + projected_heavy_ms + budget.proofs_ms + budget.signing_ms
        <= budget.end_to_end_ms
}

// ---------------------------------------------------------------------------
// Heavy triggers
// ---------------------------------------------------------------------------

/// Conditions that arm the heavy verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Disagreement,
    MarginBand,
    HighStakes,
    Adversarial,
    Sampling,
    LowConditionalPower,
}

/// Signals evaluated by [`heavy_triggered`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeavySignals {
    /// Cheap and small tiers disagreed on some candidate.
    pub tier_disagreement: bool,
    /// Aggregate confidence margin (mean calibrated confidence of the
    /// supports).
    pub aggregate_margin: f64,
    pub high_stakes: bool,
    pub adversarial_score: Option<f64>,
    pub retrieval_anomaly: bool,
    /// Effective sampling rate (possibly raised by low conditional power).
    pub sample_rate: f64,
}

/// Evaluate the heavy-verifier triggers. Deterministic: the sampling draw
/// hashes the route seed and request id into a unit fraction.
pub fn heavy_triggered(
    request_id: &str,
    route_seed: &str,
    signals: &HeavySignals,
    policy: &PolicySnapshot,
) -> (bool, BTreeSet<Trigger>) {
    let mut fired = BTreeSet::new();
    if signals.tier_disagreement {
        fired.insert(Trigger::Disagreement);
    }
    let (lo, hi) = policy.margin_band;
    if signals.aggregate_margin >= lo && signals.aggregate_margin <= hi {
        fired.insert(Trigger::MarginBand);
    }
    if signals.high_stakes {
        fired.insert(Trigger::HighStakes);
    }
    if signals.adversarial_score.is_some_and(|s| s >= policy.tau_icl)
        || signals.retrieval_anomaly
    {
        fired.insert(Trigger::Adversarial);
    }
    let draw =
        hash_to_unit("heavy-sampling:v1", &[route_seed.as_bytes(), request_id.as_bytes()]);
    if draw < signals.sample_rate {
        fired.insert(Trigger::Sampling);
    }
    (!fired.is_empty(), fired)
}

// ---------------------------------------------------------------------------
// Traces and evidence
// ---------------------------------------------------------------------------

/// Per-stage elapsed budget accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub elapsed_ms: u64,
    pub attempts: u32,
}

/// One append-only escalation-trail entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationEntry {
    pub at_ms: u64,
    pub gate: String,
    pub policy_version: String,
    pub reason: String,
}

/// The Holm/BY pair evaluated at the risk gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityPair {
    /// BY over support p-values at `q`.
    pub fdr: MultiplicityResult,
    /// Holm over candidate contradiction p-values at `alpha`.
    pub fwer: MultiplicityResult,
}

/// The full audit trace of one decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub request_id: String,
    pub return_state: ReturnState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub abstain_reason: Option<String>,
    /// Ordered canonical reason codes (empty on PROMOTE_FULL).
    pub reasons: Vec<String>,
    pub stage_timings: Vec<StageTiming>,
    pub triggers_fired: BTreeSet<Trigger>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reservation_id: Option<String>,
    /// Heavy-verifier invocations (never exceeds 1).
    pub heavy_calls: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub incident_ticket: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub justification: Option<JustificationScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multiplicity: Option<MultiplicityPair>,
    pub escalation_trail: Vec<EscalationEntry>,
    /// Session-jittered effective threshold (logged, never a gate here).
    pub tau_effective: f64,
}

/// Adjusted p-values and dependence summary destined for the receipt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierStats {
    pub fdr: MultiplicityResult,
    pub fwer: MultiplicityResult,
    /// Measured effective test count, when the route has a dependence
    /// report for the window.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_eff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho_bar: Option<f64>,
}

/// Receipt-facing descriptor of the threshold jitter in effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterDescriptor {
    /// Jitter scheme identifier.
    pub scheme: String,
    pub halfwidth: f64,
    pub tau_effective: f64,
}

/// Aggregate proof-latency histogram — percentile bins only, never raw
/// per-event timings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBins {
    pub p50_ms: u64,
    pub p95_ms: u64,
    pub p99_ms: u64,
    pub samples: u64,
}

/// Nearest-rank percentile bins over recorded proof latencies.
pub fn proof_latency_histogram(samples: &[u64]) -> Option<HistogramBins> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = |p: f64| {
        let idx = ((p / 100.0 * sorted.len() as f64).ceil() as usize).max(1) - 1;
        sorted[idx.min(sorted.len() - 1)]
    };
    Some(HistogramBins {
        p50_ms: rank(50.0),
        p95_ms: rank(95.0),
        p99_ms: rank(99.0),
        samples: sorted.len() as u64,
    })
}

/// Everything the receipt builder needs beyond the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvidence {
    /// Final verdicted supports (post heavy upgrade), input order.
    pub supports: Vec<VerdictedFragment>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pack: Option<EvidencePack>,
    /// Independence report over the final evidence set.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub independence: Option<IndependenceReport>,
    pub scope: ScopeReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temporal: Option<TemporalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub poisoning: Option<PoisonReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verifier_stats: Option<VerifierStats>,
    pub proofs: Vec<ProofRecord>,
    pub mses_issuer_counts: BTreeMap<String, u32>,
    pub jitter: JitterDescriptor,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proof_latency: Option<HistogramBins>,
}

/// A finished decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub return_state: ReturnState,
    pub trace: DecisionTrace,
    pub evidence: DecisionEvidence,
}

// ---------------------------------------------------------------------------
// Dependencies
// ---------------------------------------------------------------------------

/// Injected collaborators for [`decide`].
pub struct EngineDeps<'a> {
    pub cheap: &'a dyn VerifierTier,
    pub small: &'a dyn VerifierTier,
    pub heavy: &'a dyn VerifierTier,
    pub proofs: &'a dyn ProofSource,
    pub clock: &'a dyn Clock,
    /// Upstream citation edges per document id.
    pub citations: &'a CitationIndex,
    /// Seed for the deterministic sampling trigger.
    pub route_seed: String,
    /// Seed for threshold jitter and retry-backoff jitter.
    pub session_seed: String,
    /// Dependence report for the route window, when measured.
    pub dependence: Option<DependenceReport>,
    /// Scripted per-attempt retrieval costs (fixtures); `None` means the
    /// candidate fragments arrived instantly.
    pub retrieval_script: Option<Vec<u64>>,
}

// ---------------------------------------------------------------------------
// The cascade
// ---------------------------------------------------------------------------

struct Cascade<'a, 'd> {
    request: &'a Request,
    policy: &'a PolicySnapshot,
    route: &'a mut RouteState,
    deps: &'a EngineDeps<'d>,
    now: u64,
    trace: DecisionTrace,
    evidence: DecisionEvidence,
    consumed_ms: u64,
    heavy_ran: bool,
}

impl Cascade<'_, '_> {
    fn escalate(&mut self, gate: &str, reason: &str) {
        self.trace.escalation_trail.push(EscalationEntry {
            at_ms: self.deps.clock.now_ms(),
            gate: gate.to_string(),
            policy_version: self.policy.route_version.clone(),
            reason: reason.to_string(),
        });
    }

    fn stage_timing(&mut self, stage: &str, elapsed_ms: u64, attempts: u32) {
        self.trace.stage_timings.push(StageTiming {
            stage: stage.to_string(),
            elapsed_ms,
            attempts,
        });
        self.consumed_ms += elapsed_ms;
    }

    fn spec_for(&self, stage: &str, fallback_timeout: u64) -> StageTimeout {
        self.policy
            .stage_timeout(stage)
            .unwrap_or(StageTimeout { timeout_ms: fallback_timeout, retries: 0, backoff: None })
    }

    /// Settle route accounting and freeze the trace.
    fn finish(mut self, state: ReturnState, reason: Option<ReasonCode>) -> Decision {
        if !self.heavy_ran {
            self.route.record_event(self.now, false);
        }
        self.trace.return_state = state;
        if let Some(code) = reason {
            self.trace.reasons.push(code.code().to_string());
            if state == ReturnState::Abstain {
                self.trace.abstain_reason = Some(code.code().to_string());
            }
        }
        Decision { return_state: state, trace: self.trace, evidence: self.evidence }
    }

    fn abstain(mut self, code: ReasonCode, gate: &str, detail: &str) -> Decision {
        self.escalate(gate, detail);
        self.finish(ReturnState::Abstain, Some(code))
    }

    fn lite(mut self, code: ReasonCode, gate: &str, detail: &str) -> Decision {
        self.escalate(gate, detail);
        self.finish(ReturnState::PromoteLite, Some(code))
    }

    /// Evaluate one verifier tier over a fragment set under its stage
    /// budget. Fragments fan out in parallel, so the stage cost is the
    /// maximum per-fragment cost, and a fragment whose attempts all time
    /// out is dropped from the tier.
    fn eval_tier(
        &mut self,
        stage: &str,
        verifier: &dyn VerifierTier,
        fragments: &[&Fragment],
    ) -> BTreeMap<String, TierVerdict> {
        let spec = self.spec_for(stage, 120);
        let mut verdicts = BTreeMap::new();
        let mut stage_elapsed = 0u64;
        let mut max_attempts = 0u32;
        for fragment in fragments {
            let outcome = run_stage(
                stage,
                spec,
                &self.deps.session_seed,
                self.deps.clock,
                |_attempt| {
                    let v = verifier.evaluate(fragment, &self.request.claim, spec.timeout_ms);
                    if v.elapsed_ms >= spec.timeout_ms {
                        AttemptResult::TimedOut
                    } else {
                        AttemptResult::Done { value: v, elapsed_ms: v.elapsed_ms }
                    }
                },
            );
            stage_elapsed = stage_elapsed.max(outcome.elapsed_ms);
            max_attempts = max_attempts.max(outcome.attempts.len() as u32);
            match outcome.value {
                Some(v) => {
                    verdicts.insert(fragment.fragment_id.clone(), v);
                }
                None => {
                    self.escalate(stage, &format!("{} timed out", fragment.fragment_id));
                }
            }
        }
        self.stage_timing(stage, stage_elapsed, max_attempts);
        verdicts
    }

    fn run(mut self) -> Decision {
        let policy = self.policy;
        let request = self.request;

        // Incident bookkeeping and the session threshold jitter (logged,
        // never a gate).
        if let Some(ticket) = self.route.incident_active(self.now) {
            self.trace.incident_ticket = Some(ticket);
        }

        // --- Stage 0: retrieval (scripted cost, fixtures only) -----------
        if let Some(script) = &self.deps.retrieval_script {
            let spec = self.spec_for("retrieval", 250);
            let script = script.clone();
            let outcome = run_stage(
                "retrieval",
                spec,
                &self.deps.session_seed,
                self.deps.clock,
                |attempt| {
                    let cost = script.get(attempt as usize).copied().unwrap_or(0);
                    if cost >= spec.timeout_ms {
                        AttemptResult::TimedOut
                    } else {
                        AttemptResult::Done { value: (), elapsed_ms: cost }
                    }
                },
            );
            let attempts = outcome.attempts.len() as u32;
            let exhausted = outcome.value.is_none();
            self.stage_timing("retrieval", outcome.elapsed_ms, attempts);
            if exhausted {
                // A stale or unreachable corpus is a freshness failure;
                // the timeout diagnostic separates it from true scope
                // misses.
                self.evidence.scope.add(
                    ScopeCategory::Timeout,
                    request.fragments.iter().map(|f| f.fragment_id.clone()).collect(),
                );
                return self.abstain(
                    ReasonCode::ScopeOrFreshness,
                    "retrieval",
                    "retrieval retries exhausted",
                );
            }
        }

        if request.fragments.is_empty() {
            return self.abstain(
                ReasonCode::InsufficientSupport,
                "retrieval",
                "no candidate fragments",
            );
        }

        // --- Stage 1: scope ------------------------------------------------
        let scope = match scope_ok(&request.fragments, policy, self.now) {
            Ok(report) => report,
            Err(err) => {
                // Internal fault: fail closed.
                return self.abstain(
                    ReasonCode::Scope,
                    "scope",
                    &format!("internal fault in scope gate: {err}"),
                );
            }
        };
        let scope_pass = scope.ok;
        let scope_categories: Vec<String> =
            scope.reasons.iter().map(|r| r.category.to_string()).collect();
        self.evidence.scope = scope;
        if !scope_pass {
            return self.abstain(
                ReasonCode::Scope,
                "scope",
                &format!("out of scope: {}", scope_categories.join(", ")),
            );
        }

        // --- Stage 2: cheap tier, top-K1 selection --------------------------
        let all: Vec<&Fragment> = request.fragments.iter().collect();
        let cheap_verdicts = self.eval_tier("cheap", self.deps.cheap, &all);
        let mut candidates: Vec<&Fragment> = if cheap_verdicts.is_empty() {
            // Cheap stage lost entirely: skip to small with every
            // candidate, logged.
            self.escalate("cheap", "cheap tier timed out; skipping to small");
            all.clone()
        } else {
            let mut ranked: Vec<&Fragment> = all
                .iter()
                .copied()
                .filter(|f| cheap_verdicts.contains_key(&f.fragment_id))
                .collect();
            // Strongest support first: ascending support p-value, ties by
            // fragment id.
            ranked.sort_by(|a, b| {
                let pa = cheap_verdicts[&a.fragment_id].p_support;
                let pb = cheap_verdicts[&b.fragment_id].p_support;
                pa.partial_cmp(&pb)
                    .expect("finite p-values")
                    .then_with(|| a.fragment_id.cmp(&b.fragment_id))
            });
            ranked.truncate(TOP_K1);
            ranked
        };
        candidates.sort_by(|a, b| a.fragment_id.cmp(&b.fragment_id));

        // --- Stage 3: small tier; supports = support ∧ ¬contradict ----------
        let small_verdicts = self.eval_tier("small", self.deps.small, &candidates);
        let mut supports: Vec<VerdictedFragment> = Vec::new();
        for fragment in &candidates {
            if let Some(v) = small_verdicts.get(&fragment.fragment_id) {
                if v.support && !v.contradict {
                    supports.push(VerdictedFragment {
                        fragment: (*fragment).clone(),
                        support_p: v.p_support,
                        contradict_p: v.p_contradict,
                        calibrated_confidence: v.calibrated_confidence,
                        tier: Tier::Small,
                    });
                }
            }
        }
        if (supports.len() as u32) < policy.min_supports {
            return self.abstain(
                ReasonCode::InsufficientSupport,
                "small",
                &format!(
                    "{} surviving support(s); policy requires {}",
                    supports.len(),
                    policy.min_supports
                ),
            );
        }

        // --- Stage 4: multiplicity budgets ----------------------------------
        let support_family = PValueFamily::new(
            FamilyKind::Supports,
            supports.iter().map(|v| (v.fragment_id().to_string(), v.support_p)).collect(),
        );
        let contra_family = PValueFamily::new(
            FamilyKind::Contradictions,
            candidates
                .iter()
                .filter_map(|f| {
                    small_verdicts
                        .get(&f.fragment_id)
                        .map(|v| (f.fragment_id.clone(), v.p_contradict))
                })
                .collect(),
        );
        let (fdr, fwer) = match (by_fdr(&support_family, policy.q), holm_fwer(&contra_family, policy.alpha))
        {
            (Ok(fdr), Ok(fwer)) => (fdr, fwer),
            (fdr, fwer) => {
                let err = fdr.err().or(fwer.err()).expect("one side failed");
                return self.abstain(
                    ReasonCode::RiskBounds,
                    "risk",
                    &format!("internal fault in multiplicity budgets: {err}"),
                );
            }
        };
        let fdr_ok = supports.iter().all(|v| fdr.rejected.contains(v.fragment_id()));
        let fwer_ok = fwer.rejected.is_empty();
        self.trace.multiplicity = Some(MultiplicityPair { fdr: fdr.clone(), fwer: fwer.clone() });
        self.evidence.verifier_stats = Some(VerifierStats {
            fdr,
            fwer,
            m_eff: self.deps.dependence.as_ref().map(|d| d.m_eff),
            rho_bar: self.deps.dependence.as_ref().map(|d| d.rho_bar),
        });
        if !fdr_ok || !fwer_ok {
            let which = match (fdr_ok, fwer_ok) {
                (false, false) => "FDR and FWER budgets violated",
                (false, true) => "support family fails the BY budget",
                _ => "a candidate contradiction survives Holm",
            };
            return self.abstain(ReasonCode::RiskBounds, "risk", which);
        }

        // --- Stage 5: heavy gating -------------------------------------------
        let disagreement = candidates.iter().any(|f| {
            match (cheap_verdicts.get(&f.fragment_id), small_verdicts.get(&f.fragment_id)) {
                (Some(c), Some(s)) => c.support != s.support || c.contradict != s.contradict,
                _ => false,
            }
        });
        let margin = supports.iter().map(|v| v.calibrated_confidence).sum::<f64>()
            / supports.len() as f64;
        let low_power = self.route.conditional_power.as_ref().is_some_and(|cp| cp.low);
        // Low conditional power raises the effective audit-sampling rate
        // up to, but never beyond, the heavy cap.
        let effective_rate = if low_power {
            policy.sample_rate.max(policy.heavy_cap)
        } else {
            policy.sample_rate
        };
        let signals = HeavySignals {
            tier_disagreement: disagreement,
            aggregate_margin: margin,
            high_stakes: request.high_stakes,
            adversarial_score: request.adversarial_score,
            retrieval_anomaly: request.retrieval_anomaly,
            sample_rate: effective_rate,
        };
        let (triggered, mut fired) =
            heavy_triggered(&request.request_id, &self.deps.route_seed, &signals, policy);
        if low_power {
            fired.insert(Trigger::LowConditionalPower);
        }
        let need_heavy = triggered || low_power;
        self.trace.triggers_fired = fired;

        let mut heavy_exhausted = false;
        if need_heavy {
            let heavy_spec = self.spec_for("heavy", 220);
            if !fits_latency_budget(
                self.consumed_ms,
                &policy.latency_budget,
                policy.latency_budget.heavy_ms,
            ) {
                // Skipped heavy spends none of its budget.
                self.escalate("heavy", "heavy skipped: would not fit the latency budget");
            } else {
                match reserve_heavy_slot(self.route, self.now, policy) {
                    ReservationOutcome::Denied { share_if_granted } => {
                        heavy_exhausted = true;
                        self.escalate(
                            "heavy",
                            &format!(
                                "heavy capacity denied: post-grant share {share_if_granted} exceeds cap {}",
                                policy.heavy_cap
                            ),
                        );
                    }
                    ReservationOutcome::Granted(reservation) => {
                        self.trace.reservation_id =
                            Some(reservation.reservation_id.clone());
                        // Adjudicate the strongest support (smallest
                        // support p-value, ties by fragment id).
                        let target_idx = (0..supports.len())
                            .min_by(|&a, &b| {
                                supports[a]
                                    .support_p
                                    .partial_cmp(&supports[b].support_p)
                                    .expect("finite p-values")
                                    .then_with(|| {
                                        supports[a]
                                            .fragment_id()
                                            .cmp(supports[b].fragment_id())
                                    })
                            })
                            .expect("supports non-empty");
                        let target = supports[target_idx].fragment.clone();
                        let outcome = run_stage(
                            "heavy",
                            heavy_spec,
                            &self.deps.session_seed,
                            self.deps.clock,
                            |_attempt| {
                                let v = self.deps.heavy.evaluate(
                                    &target,
                                    &request.claim,
                                    heavy_spec.timeout_ms,
                                );
                                if v.elapsed_ms >= heavy_spec.timeout_ms {
                                    AttemptResult::TimedOut
                                } else {
                                    AttemptResult::Done { value: v, elapsed_ms: v.elapsed_ms }
                                }
                            },
                        );
                        let attempts = outcome.attempts.len() as u32;
                        self.stage_timing("heavy", outcome.elapsed_ms, attempts);
                        self.trace.heavy_calls += 1;
                        self.heavy_ran = true;
                        finalize_heavy(
                            self.route,
                            &reservation,
                            self.now,
                        );
                        match outcome.value {
                            None => {
                                // J.2: no retry; abstain if not completed.
                                // The heavy budget was consumed without a
                                // verdict.
                                return self.abstain(
                                    ReasonCode::BudgetExhausted,
                                    "heavy",
                                    "heavy verifier timed out; fail-closed",
                                );
                            }
                            Some(v) if v.contradict => {
                                return self.abstain(
                                    ReasonCode::HeavyVeto,
                                    "heavy",
                                    "heavy verifier contradicted the claim",
                                );
                            }
                            Some(v) if v.support => {
                                let upgraded = &mut supports[target_idx];
                                upgraded.tier = Tier::Heavy;
                                upgraded.calibrated_confidence = v.calibrated_confidence;
                            }
                            Some(_) => {
                                self.escalate(
                                    "heavy",
                                    "heavy verifier returned no verdict; keeping small-tier evidence",
                                );
                            }
                        }
                    }
                }
            }
        }

        // --- Temporal diversity (retrieval requirements) ---------------------
        let drifting = policy.topic_is_drifting(&request.route_id);
        let support_fragments: Vec<Fragment> =
            supports.iter().map(|v| v.fragment.clone()).collect();
        let temporal = match temporal_diversity_ok(&support_fragments, policy, drifting) {
            Ok(report) => report,
            Err(PolicyError::MissingDates { fragment_ids }) => {
                return self.abstain(
                    ReasonCode::NeedsCataloging,
                    "temporal",
                    &format!(
                        "publication dates missing on a drifting topic: {}",
                        fragment_ids.join(", ")
                    ),
                );
            }
            Err(err) => {
                return self.abstain(
                    ReasonCode::InsufficientDiversity,
                    "temporal",
                    &format!("internal fault in temporal gate: {err}"),
                );
            }
        };
        self.evidence.temporal = Some(temporal.clone());

        // --- Stage 6: independence and caps ----------------------------------
        let graph = build_graph(&support_fragments, self.deps.citations);
        let full_report = match g_indep(&support_fragments, &graph, policy) {
            Ok(report) => report,
            Err(err) => {
                return self.abstain(
                    ReasonCode::IndependenceOrCap,
                    "independence",
                    &format!("internal fault in independence gate: {err}"),
                );
            }
        };
        if !full_report.pass {
            self.evidence.independence = Some(full_report.clone());
            let flagged = full_report.flagged_pairs.len();
            return self.abstain(
                ReasonCode::IndependenceOrCap,
                "independence",
                &format!(
                    "g_indep {} (floor {}), max issuer share {} (cap {}), {flagged} flagged pair(s)",
                    full_report.g_indep,
                    policy.g_indep_min,
                    full_report.max_issuer_share,
                    policy.issuer_cap
                ),
            );
        }

        // --- Evidence minimization -------------------------------------------
        // The FWER family (candidate contradictions) is fixed under
        // support-subset shrinking, so only the FDR budget re-checks
        // inside extraction.
        let mut gate = StandardGate::new(policy, &graph);
        gate.require_fdr = true;
        gate.drifting_topic = drifting;
        let pack = match extract_mses(&supports, &gate, policy) {
            Ok(pack) => pack,
            Err(crate::mses::MsesError::MonocultureUnrepairable) => {
                return self.abstain(
                    ReasonCode::InsufficientDiversity,
                    "mses",
                    "no evidence subset satisfies the one-fragment-per-issuer rule",
                );
            }
            Err(err) => {
                return self.abstain(
                    ReasonCode::InsufficientDiversity,
                    "mses",
                    &format!("internal fault in evidence minimization: {err}"),
                );
            }
        };
        let members: Vec<VerdictedFragment> = supports
            .iter()
            .filter(|v| pack.mses.iter().any(|id| id == v.fragment_id()))
            .cloned()
            .collect();
        let member_fragments: Vec<Fragment> =
            members.iter().map(|v| v.fragment.clone()).collect();
        let mses_report = match g_indep(&member_fragments, &graph, policy) {
            Ok(report) => report,
            Err(err) => {
                return self.abstain(
                    ReasonCode::IndependenceOrCap,
                    "independence",
                    &format!("internal fault scoring the evidence set: {err}"),
                );
            }
        };
        let justification = justification_score(&supports, &mses_report, &pack, policy);
        self.trace.justification = Some(justification);
        let mut issuer_counts: BTreeMap<String, u32> = BTreeMap::new();
        for m in &members {
            *issuer_counts.entry(m.fragment.issuer.clone()).or_insert(0) += 1;
        }
        self.evidence.mses_issuer_counts = issuer_counts;
        self.evidence.pack = Some(pack);
        self.evidence.independence = Some(mses_report.clone());

        // --- Poisoning gate over the final evidence set -----------------------
        let poison = match poisoning_gate(
            &request.fragments,
            &member_fragments,
            &mses_report,
            if drifting { Some(&temporal) } else { None },
            policy,
        ) {
            Ok(report) => report,
            Err(err) => {
                return self.abstain(
                    ReasonCode::InsufficientDiversity,
                    "poisoning",
                    &format!("internal fault in poisoning gate: {err}"),
                );
            }
        };
        self.evidence.poisoning = Some(poison.clone());
        if let Some(failure) = &poison.first_failure {
            // Structural-independence layers map to the cap reason; the
            // diversity layers to insufficient diversity.
            let code = match failure.layer {
                PoisonLayer::IndependenceFloor | PoisonLayer::IssuerCap => {
                    ReasonCode::IndependenceOrCap
                }
                PoisonLayer::PoolDiversity
                | PoisonLayer::MsesMonoculture
                | PoisonLayer::TemporalDrift => ReasonCode::InsufficientDiversity,
            };
            let detail = format!("poisoning layer {}: {}", failure.layer, failure.detail);
            return self.abstain(code, "poisoning", &detail);
        }

        self.evidence.supports = supports;

        // --- Stage 7: proof policy --------------------------------------------
        let proof_spec = self.spec_for("proof", 300);
        let mut doc_ids: Vec<String> =
            member_fragments.iter().map(|f| f.doc_id.clone()).collect();
        doc_ids.sort();
        doc_ids.dedup();
        let outcome = run_stage(
            "proof",
            proof_spec,
            &self.deps.session_seed,
            self.deps.clock,
            |_attempt| match self.deps.proofs.prove(&doc_ids) {
                Ok(record) if record.timed_out || record.elapsed_ms >= proof_spec.timeout_ms => {
                    AttemptResult::TimedOut
                }
                Ok(record) => {
                    let elapsed = record.elapsed_ms;
                    AttemptResult::Done { value: record, elapsed_ms: elapsed }
                }
                Err(_) => AttemptResult::TimedOut,
            },
        );
        let attempts = outcome.attempts.len() as u32;
        self.stage_timing("proof", outcome.elapsed_ms, attempts);
        let proof_degraded = match outcome.value {
            Some(record) => {
                self.route.proof_latencies_ms.push(record.elapsed_ms);
                self.evidence.proofs.push(record);
                false
            }
            None => true,
        };
        self.evidence.proof_latency = proof_latency_histogram(&self.route.proof_latencies_ms);
        if proof_degraded {
            return if policy.lite_fallback_allowed {
                self.lite(
                    ReasonCode::ProofTimeoutOrSize,
                    "proof",
                    "inclusion proofs missing or over budget; degrading to lite",
                )
            } else {
                self.abstain(
                    ReasonCode::ProofTimeoutOrSize,
                    "proof",
                    "inclusion proofs missing or over budget; lite fallback disabled",
                )
            };
        }

        // --- Stage 8: heavy needed but no capacity -----------------------------
        if heavy_exhausted {
            return if policy.lite_fallback_allowed {
                self.lite(
                    ReasonCode::HeavyBudgetExhausted,
                    "heavy",
                    "heavy verification required but the window is at cap",
                )
            } else {
                self.abstain(
                    ReasonCode::BudgetExhausted,
                    "heavy",
                    "heavy verification required, window at cap, lite fallback disabled",
                )
            };
        }

        // --- Stage 9: all clear -------------------------------------------------
        self.finish(ReturnState::PromoteFull, None)
    }
}

/// Execute the decision cascade for one admitted request.
///
/// Stages run strictly in order: scope, cheap tier with top-K selection,
/// small tier, multiplicity budgets, heavy gating under the sliding-window
/// governor, temporal diversity, independence and caps, evidence
/// minimization, the poisoning gate, proof policy, and finally the return
/// state. Every abort is an ABSTAIN with a canonical reason; internal
/// faults never promote.
pub fn decide(
    request: &Request,
    policy: &PolicySnapshot,
    route: &mut RouteState,
    deps: &EngineDeps<'_>,
) -> Decision {
    let now = deps.clock.now_ms();
    let tau_effective = jitter_tau(policy.tau, &deps.session_seed).unwrap_or(policy.tau);
    let cascade = Cascade {
        request,
        policy,
        route,
        deps,
        now,
        trace: DecisionTrace {
            request_id: request.request_id.clone(),
            return_state: ReturnState::Abstain,
            abstain_reason: None,
            reasons: Vec::new(),
            stage_timings: Vec::new(),
            triggers_fired: BTreeSet::new(),
            reservation_id: None,
            heavy_calls: 0,
            incident_ticket: None,
            justification: None,
            multiplicity: None,
            escalation_trail: Vec::new(),
            tau_effective,
        },
        evidence: DecisionEvidence {
            supports: Vec::new(),
            pack: None,
            independence: None,
            scope: ScopeReport::pass(),
            temporal: None,
            poisoning: None,
            verifier_stats: None,
            proofs: Vec::new(),
            mses_issuer_counts: BTreeMap::new(),
            jitter: JitterDescriptor {
                scheme: "uniform-halfwidth:v1".to_string(),
                halfwidth: policy.jitter_halfwidth,
                tau_effective,
            },
            proof_latency: None,
        },
        consumed_ms: 0,
        heavy_ran: false,
    };
    cascade.run()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ScriptedClock;
    use crate::hash::sha256;
    use crate::policy::{CitationRef, License};

    const NOW_MS: u64 = 1_705_000_000_000;
    const DAY_MS: u64 = 24 * 60 * 60 * 1000;

    fn make_fragment(id: &str, doc: &str, issuer: &str) -> Fragment {
        Fragment {
            fragment_id: id.to_string(),
            doc_id: doc.to_string(),
            shard_id: "shard-1".to_string(),
            issuer: issuer.to_string(),
            author: format!("author-{issuer}"),
            jurisdiction: Some("EU".to_string()),
            effective_start: None,
            effective_end: None,
            publication_date: chrono::NaiveDate::from_ymd_opt(2023, 3, 1),
            license: License {
                terms_id: "CC-BY-4.0".to_string(),
                ttl_expiry_ms: NOW_MS + 30 * DAY_MS,
            },
            trust_tier: 3,
            language: "en".to_string(),
            content_hash: sha256(id.as_bytes()),
            selectors: vec![format!("p:{id}")],
            upstream_citations: Vec::new(),
            body: Some(format!("evidence body for {id}")),
        }
    }

    fn strong_support(p: f64, confidence: f64) -> TierVerdict {
        TierVerdict {
            support: true,
            contradict: false,
            p_support: p,
            p_contradict: 0.9,
            calibrated_confidence: confidence,
            elapsed_ms: 5,
        }
    }

    fn non_support() -> TierVerdict {
        TierVerdict {
            support: false,
            contradict: false,
            p_support: 0.9,
            p_contradict: 0.9,
            calibrated_confidence: 0.2,
            elapsed_ms: 5,
        }
    }

    struct OkProofs;
    impl ProofSource for OkProofs {
        fn prove(&self, doc_ids: &[String]) -> Result<ProofRecord, String> {
            Ok(ProofRecord {
                doc_ids: doc_ids.to_vec(),
                root_hex: "00".repeat(32),
                proof_hex: "01020304".to_string(),
                size_bytes: 4,
                elapsed_ms: 12,
                timed_out: false,
            })
        }
    }

    struct SlowProofs;
    impl ProofSource for SlowProofs {
        fn prove(&self, doc_ids: &[String]) -> Result<ProofRecord, String> {
            Ok(ProofRecord {
                doc_ids: doc_ids.to_vec(),
                root_hex: "00".repeat(32),
                proof_hex: String::new(),
                size_bytes: 0,
                elapsed_ms: 400,
                timed_out: true,
            })
        }
    }

    /// A pool that passes every gate: two independent supports from
    /// distinct issuers plus a third issuer in the pool for diversity.
    fn clear_pool() -> Vec<Fragment> {
        vec![
            make_fragment("f1", "doc-1", "issuer-a"),
            make_fragment("f2", "doc-2", "issuer-b"),
            make_fragment("f3", "doc-3", "issuer-c"),
        ]
    }

    fn clear_verifiers() -> (TableVerifier, TableVerifier, TableVerifier) {
        let cheap = TableVerifier::new(Tier::Cheap)
            .with("f1", strong_support(0.002, 0.9))
            .with("f2", strong_support(0.003, 0.9))
            .with("f3", non_support());
        let small = TableVerifier::new(Tier::Small)
            .with("f1", strong_support(0.001, 0.85))
            .with("f2", strong_support(0.004, 0.87))
            .with("f3", non_support());
        let heavy = TableVerifier::new(Tier::Heavy)
            .with_default(strong_support(0.0005, 0.95));
        (cheap, small, heavy)
    }

    fn make_request(fragments: Vec<Fragment>) -> Request {
        Request {
            request_id: "req-1".to_string(),
            claim: "the quarterly figure is 42".to_string(),
            fragments,
            session_class: "standard".to_string(),
            high_stakes: false,
            org_id: "org-1".to_string(),
            route_id: "route-1".to_string(),
            arrival_ms: NOW_MS,
            adversarial_score: None,
            retrieval_anomaly: false,
        }
    }

    struct Harness {
        cheap: TableVerifier,
        small: TableVerifier,
        heavy: TableVerifier,
        citations: CitationIndex,
        clock: ScriptedClock,
    }

    impl Harness {
        fn new() -> Harness {
            let (cheap, small, heavy) = clear_verifiers();
            Harness {
                cheap,
                small,
                heavy,
                citations: CitationIndex::new(),
                clock: ScriptedClock::starting_at(NOW_MS),
            }
        }

        fn deps<'a>(&'a self, proofs: &'a dyn ProofSource) -> EngineDeps<'a> {
            EngineDeps {
                cheap: &self.cheap,
                small: &self.small,
                heavy: &self.heavy,
                proofs,
                clock: &self.clock,
                citations: &self.citations,
                route_seed: "route-seed-1".to_string(),
                session_seed: "session-seed-1".to_string(),
                dependence: None,
                retrieval_script: None,
            }
        }
    }

    fn fresh_route(policy: &PolicySnapshot) -> RouteState {
        RouteState::new("route-1", policy, NOW_MS)
    }

    /// A request id whose sampling draw is at or above `rate`, so the
    /// sampling trigger stays quiet in tests that do not want it.
    fn unsampled_request_id(route_seed: &str, rate: f64) -> String {
        (0..)
            .map(|i| format!("req-quiet-{i}"))
            .find(|id| {
                hash_to_unit("heavy-sampling:v1", &[route_seed.as_bytes(), id.as_bytes()])
                    >= rate
            })
            .expect("an unsampled id exists")
    }

    // -- rate limiting ---------------------------------------------------------

    #[test]
    fn route_burst_admits_fifty_then_denies() {
        let policy = PolicySnapshot::default();
        let mut route = fresh_route(&policy);
        // 51 simultaneous requests from distinct orgs: only the route
        // bucket binds, so exactly 50 are admitted.
        for i in 0..50 {
            let org = format!("org-{i}");
            assert_eq!(rate_limit(&mut route, &org, NOW_MS), Admission::Admit, "req {i}");
        }
        assert_eq!(
            rate_limit(&mut route, "org-50", NOW_MS),
            Admission::Deny { bucket: "route".to_string() }
        );
        assert_eq!(route.denials, 1);
    }

    #[test]
    fn org_sustained_ten_qps_is_admitted_for_a_minute() {
        let policy = PolicySnapshot::default();
        let mut route = fresh_route(&policy);
        // One request every 100 ms for 60 s = 10 QPS sustained; the org
        // bucket refills at exactly that rate.
        for i in 0..600u64 {
            let t = NOW_MS + i * 100;
            assert_eq!(rate_limit(&mut route, "org-1", t), Admission::Admit, "i={i}");
        }
    }

    #[test]
    fn idle_refill_restores_the_burst() {
        let policy = PolicySnapshot::default();
        let mut route = fresh_route(&policy);
        for _ in 0..10 {
            assert_eq!(rate_limit(&mut route, "org-1", NOW_MS), Admission::Admit);
        }
        // The 11th request in the same instant hits the org burst cap.
        assert_eq!(
            rate_limit(&mut route, "org-1", NOW_MS),
            Admission::Deny { bucket: "org".to_string() }
        );
        // After one idle second both buckets refill.
        assert_eq!(rate_limit(&mut route, "org-1", NOW_MS + 1000), Admission::Admit);
    }

    // -- heavy reservations -----------------------------------------------------

    fn preload(route: &mut RouteState, total: usize, heavy: usize) {
        for i in 0..total {
            route.record_event(NOW_MS - 60_000 + i as u64, i < heavy);
        }
    }

    #[test]
    fn reservation_boundary_arithmetic_is_exact() {
        let policy = PolicySnapshot::default();

        // 100 events, 14 heavy: post-grant share 15/101 ≤ 0.15 → grant.
        let mut route = fresh_route(&policy);
        preload(&mut route, 100, 14);
        match reserve_heavy_slot(&mut route, NOW_MS, &policy) {
            ReservationOutcome::Granted(res) => {
                assert_eq!(res.share_at_grant, Share::new(15, 101));
                assert!(res.incident.is_none());
            }
            other => panic!("expected grant, got {other:?}"),
        }
        assert_eq!(route.inflight_heavy, 1);

        // 100 events, 15 heavy: post-grant share 16/101 > 0.15 → denied.
        let mut route = fresh_route(&policy);
        preload(&mut route, 100, 15);
        match reserve_heavy_slot(&mut route, NOW_MS, &policy) {
            ReservationOutcome::Denied { share_if_granted } => {
                assert_eq!(share_if_granted, Share::new(16, 101));
            }
            other => panic!("expected denial, got {other:?}"),
        }
        assert_eq!(route.inflight_heavy, 0);
    }

    #[test]
    fn inflight_grants_count_toward_the_share() {
        let policy = PolicySnapshot::default();
        let mut route = fresh_route(&policy);
        preload(&mut route, 100, 13);
        // First grant: (13+0+1)/(100+0+1) = 14/101.
        let first = match reserve_heavy_slot(&mut route, NOW_MS, &policy) {
            ReservationOutcome::Granted(r) => r,
            other => panic!("expected grant, got {other:?}"),
        };
        assert_eq!(first.share_at_grant, Share::new(14, 101));
        // Second while the first is in flight: (13+1+1)/(100+1+1) = 15/102.
        let second = match reserve_heavy_slot(&mut route, NOW_MS, &policy) {
            ReservationOutcome::Granted(r) => r,
            other => panic!("expected grant, got {other:?}"),
        };
        assert_eq!(second.share_at_grant, Share::new(15, 102));
        // Third: (13+2+1)/(100+2+1) = 16/103 > 0.15 → denied.
        assert!(matches!(
            reserve_heavy_slot(&mut route, NOW_MS, &policy),
            ReservationOutcome::Denied { .. }
        ));
        // Releasing one slot frees capacity again.
        release_reservation(&mut route, &second);
        assert!(matches!(
            reserve_heavy_slot(&mut route, NOW_MS, &policy),
            ReservationOutcome::Granted(_)
        ));
    }

    #[test]
    fn window_events_expire_by_timestamp() {
        let policy = PolicySnapshot::default();
        let mut route = fresh_route(&policy);
        route.record_event(NOW_MS - 8 * DAY_MS, true);
        route.record_event(NOW_MS - DAY_MS, false);
        assert_eq!(route.heavy_share(NOW_MS), Share::new(0, 1), "old heavy event expired");
    }

    // -- incidents ----------------------------------------------------------------

    #[test]
    fn incident_lifecycle_and_auto_expiry() {
        let policy = PolicySnapshot::default();
        let mut route = fresh_route(&policy);
        let clock = ScriptedClock::starting_at(NOW_MS);

        assert!(matches!(
            incident_mode(&mut route, IncidentAction::Close, &clock),
            Err(EngineError::NoActiveIncident)
        ));

        let entry = incident_mode(
            &mut route,
            IncidentAction::Open { ticket_id: "T1".to_string(), duration_ms: 2 * 60 * 60 * 1000 },
            &clock,
        )
        .unwrap();
        assert_eq!(entry.event, IncidentEvent::Opened);
        assert!(matches!(
            incident_mode(
                &mut route,
                IncidentAction::Open { ticket_id: "T2".to_string(), duration_ms: 1000 },
                &clock
            ),
            Err(EngineError::OverlappingIncident { .. })
        ));

        // Cap bypass while the incident runs: an empty window would
        // otherwise deny (1/1 > 0.15).
        match reserve_heavy_slot(&mut route, clock.now_ms(), &policy) {
            ReservationOutcome::Granted(res) => {
                assert_eq!(res.incident.as_deref(), Some("T1"));
            }
            other => panic!("expected incident-tagged grant, got {other:?}"),
        }
        release_reservation(&mut route, &Reservation {
            reservation_id: "x".to_string(),
            share_at_grant: Share::one(),
            incident: None,
        });

        // Two hours later the incident auto-closes and the cap is back.
        clock.set(NOW_MS + 2 * 60 * 60 * 1000);
        assert!(route.incident_active(clock.now_ms()).is_none());
        assert!(matches!(
            reserve_heavy_slot(&mut route, clock.now_ms(), &policy),
            ReservationOutcome::Denied { .. }
        ));
        let events: Vec<IncidentEvent> =
            route.incident_log.iter().map(|e| e.event).collect();
        assert_eq!(events, vec![IncidentEvent::Opened, IncidentEvent::AutoExpired]);
    }

    // -- latency budget -------------------------------------------------------------

    #[test]
    fn latency_budget_arithmetic_matches_the_defaults() {
        let budget = LatencyBudget::default();
        // 400 consumed + 220 heavy + 80 proofs + 50 signing = 750 ≤ 900.
        assert!(fits_latency_budget(400, &budget, 220));
        // 700 consumed + 220 + 80 + 50 = 1050 > 900.
        assert!(!fits_latency_budget(700, &budget, 220));
        // A skipped heavy call costs nothing: 700 + 0 + 130 = 830 ≤ 900.
        assert!(fits_latency_budget(700, &budget, 0));
    }

    // -- run_stage ---------------------------------------------------------------------

    #[test]
    fn retrieval_succeeds_on_retry_with_deterministic_backoff() {
        let spec = StageTimeout {
            timeout_ms: 250,
            retries: 1,
            backoff: Some(Backoff::Exponential { base_ms: 50 }),
        };
        let clock = ScriptedClock::starting_at(NOW_MS);
        let script = [300u64, 40];
        let run = || {
            run_stage("retrieval", spec, "seed-1", &clock, |attempt| {
                let cost = script[attempt as usize];
                if cost >= spec.timeout_ms {
                    AttemptResult::TimedOut
                } else {
                    AttemptResult::Done { value: "fragments", elapsed_ms: cost }
                }
            })
        };
        let outcome = run();
        assert_eq!(outcome.value, Some("fragments"));
        assert_eq!(outcome.attempts.len(), 2, "both attempts recorded");
        assert!(outcome.attempts[0].timed_out);
        assert!(!outcome.attempts[1].timed_out);
        // 250 (timeout) + backoff in [50, 75) + 40 (success).
        let backoff = outcome.elapsed_ms - 250 - 40;
        assert!((50..75).contains(&backoff), "backoff {backoff} out of range");
        // Deterministic: identical on re-run.
        assert_eq!(run().elapsed_ms, outcome.elapsed_ms);
    }

    #[test]
    fn zero_retry_stages_fail_after_one_attempt() {
        let spec = StageTimeout { timeout_ms: 220, retries: 0, backoff: None };
        let clock = ScriptedClock::starting_at(NOW_MS);
        let outcome: StageOutcome<()> =
            run_stage("heavy", spec, "seed-1", &clock, |_| AttemptResult::TimedOut);
        assert!(outcome.value.is_none());
        assert_eq!(outcome.attempts.len(), 1);
        assert_eq!(outcome.elapsed_ms, 220);
    }

    #[test]
    fn fixed_backoff_is_flat() {
        assert_eq!(backoff_delay(Backoff::Fixed { ms: 30 }, "cheap", 0, "s"), 30);
        assert_eq!(backoff_delay(Backoff::Fixed { ms: 30 }, "cheap", 3, "s"), 30);
        // Exponential doubles the base per attempt (plus jitter < base/2).
        let d0 = backoff_delay(Backoff::Exponential { base_ms: 50 }, "s1", 0, "seed");
        let d1 = backoff_delay(Backoff::Exponential { base_ms: 50 }, "s1", 1, "seed");
        assert!((50..75).contains(&d0));
        assert!((100..125).contains(&d1));
    }

    // -- heavy triggers ---------------------------------------------------------------

    fn quiet_signals(margin: f64) -> HeavySignals {
        HeavySignals {
            tier_disagreement: false,
            aggregate_margin: margin,
            high_stakes: false,
            adversarial_score: None,
            retrieval_anomaly: false,
            sample_rate: 0.10,
        }
    }

    #[test]
    fn margin_inside_the_band_triggers() {
        let policy = PolicySnapshot::default();
        let id = unsampled_request_id("route-seed-1", 0.10);
        let (need, fired) =
            heavy_triggered(&id, "route-seed-1", &quiet_signals(0.60), &policy);
        assert!(need);
        assert_eq!(fired, BTreeSet::from([Trigger::MarginBand]));
    }

    #[test]
    fn no_signal_means_no_trigger() {
        let policy = PolicySnapshot::default();
        let id = unsampled_request_id("route-seed-1", 0.10);
        let (need, fired) =
            heavy_triggered(&id, "route-seed-1", &quiet_signals(0.90), &policy);
        assert!(!need);
        assert!(fired.is_empty());
    }

    #[test]
    fn adversarial_score_at_tau_icl_triggers() {
        let policy = PolicySnapshot::default();
        let id = unsampled_request_id("route-seed-1", 0.10);
        let mut signals = quiet_signals(0.90);
        signals.adversarial_score = Some(policy.tau_icl);
        let (need, fired) = heavy_triggered(&id, "route-seed-1", &signals, &policy);
        assert!(need);
        assert_eq!(fired, BTreeSet::from([Trigger::Adversarial]));
    }

    #[test]
    fn sampling_rate_is_statistically_ten_percent() {
        let policy = PolicySnapshot::default();
        let n = 10_000;
        let hits = (0..n)
            .filter(|i| {
                let (_, fired) = heavy_triggered(
                    &format!("req-{i}"),
                    "route-seed-1",
                    &quiet_signals(0.90),
                    &policy,
                );
                fired.contains(&Trigger::Sampling)
            })
            .count();
        let rate = hits as f64 / n as f64;
        // Binomial 3σ band around 0.10: ±0.009.
        assert!((rate - 0.10).abs() < 0.009, "sampling rate {rate}");
    }

    // -- decide: cascade paths ----------------------------------------------------------

    #[test]
    fn out_of_jurisdiction_pool_abstains_with_scope_reasons() {
        let policy = PolicySnapshot {
            route_jurisdictions: vec!["US".to_string()],
            ..PolicySnapshot::default()
        };
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        let request = make_request(clear_pool()); // fragments are EU

        let decision = decide(&request, &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("scope"));
        assert!(!decision.evidence.scope.ok);
        assert!(decision
            .evidence
            .scope
            .ids_for(ScopeCategory::Jurisdiction)
            .is_some());
        // The pool still counts as a window event.
        assert_eq!(route.window.len(), 1);
    }

    #[test]
    fn one_surviving_support_abstains_insufficient_support() {
        let policy = PolicySnapshot::default();
        let mut harness = Harness::new();
        harness.small = TableVerifier::new(Tier::Small)
            .with("f1", strong_support(0.001, 0.85))
            .with("f2", non_support())
            .with("f3", non_support());
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(clear_pool()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("insufficient_support"));
    }

    #[test]
    fn weak_support_pvalues_abstain_on_risk_bounds() {
        let policy = PolicySnapshot::default();
        let mut harness = Harness::new();
        harness.small = TableVerifier::new(Tier::Small)
            .with("f1", strong_support(0.5, 0.85))
            .with("f2", strong_support(0.6, 0.87))
            .with("f3", non_support());
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(clear_pool()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("risk_bounds"));
        let stats = decision.evidence.verifier_stats.expect("stats recorded");
        assert!(stats.fdr.rejected.is_empty(), "BY rejects nothing at these p-values");
    }

    #[test]
    fn surviving_contradiction_abstains_on_risk_bounds() {
        let policy = PolicySnapshot::default();
        let mut harness = Harness::new();
        // f3 carries a Holm-significant contradiction p-value.
        harness.small = TableVerifier::new(Tier::Small)
            .with("f1", strong_support(0.001, 0.85))
            .with("f2", strong_support(0.004, 0.87))
            .with(
                "f3",
                TierVerdict {
                    support: false,
                    contradict: true,
                    p_support: 0.9,
                    p_contradict: 0.001,
                    calibrated_confidence: 0.8,
                    elapsed_ms: 5,
                },
            );
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(clear_pool()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("risk_bounds"));
        let pair = decision.trace.multiplicity.expect("both families evaluated");
        assert!(pair.fwer.rejected.contains("f3"));
    }

    #[test]
    fn all_clear_promotes_full() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        let mut request = make_request(clear_pool());
        request.request_id = unsampled_request_id("route-seed-1", 0.10);

        let decision = decide(&request, &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::PromoteFull);
        assert!(decision.trace.reasons.is_empty());
        assert!(decision.trace.abstain_reason.is_none());
        assert_eq!(decision.trace.heavy_calls, 0);

        let pack = decision.evidence.pack.expect("evidence pack");
        assert_eq!(pack.mses, vec!["f1".to_string(), "f2".to_string()]);
        let report = decision.evidence.independence.expect("independence report");
        assert!(report.pass);
        assert_eq!(report.g_indep, Share::new(1, 1));
        assert_eq!(decision.evidence.proofs.len(), 1);
        assert_eq!(decision.evidence.mses_issuer_counts.len(), 2);
        let j = decision.trace.justification.expect("J computed");
        assert!(j.j > 0.0 && j.j <= 1.0);
        assert!(decision.evidence.verifier_stats.is_some());
        // τ_eff is jittered within ±0.02 of τ and logged.
        assert!((decision.trace.tau_effective - policy.tau).abs() <= 0.02);
        assert_eq!(route.window.len(), 1);
        assert!(!route.window[0].was_heavy);
    }

    #[test]
    fn shared_ancestor_supports_abstain_independence_or_cap() {
        let policy = PolicySnapshot::default();
        let mut harness = Harness::new();
        // Both supports cite the same upstream document W.
        harness.citations.insert(
            "doc-1".to_string(),
            vec![CitationRef::Doc("doc-w".to_string())],
        );
        harness.citations.insert(
            "doc-2".to_string(),
            vec![CitationRef::Doc("doc-w".to_string())],
        );
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(clear_pool()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("independence_or_cap"));
        let report = decision.evidence.independence.expect("failing report recorded");
        assert_eq!(report.g_indep, Share::new(0, 1));
        assert_eq!(report.flagged_pairs.len(), 1);
    }

    #[test]
    fn high_stakes_heavy_contradiction_vetoes() {
        let policy = PolicySnapshot::default();
        let mut harness = Harness::new();
        harness.heavy = TableVerifier::new(Tier::Heavy).with_default(TierVerdict {
            support: false,
            contradict: true,
            p_support: 0.9,
            p_contradict: 0.001,
            calibrated_confidence: 0.95,
            elapsed_ms: 50,
        });
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        preload(&mut route, 10, 0); // warm window so the governor can grant
        let mut request = make_request(clear_pool());
        request.high_stakes = true;

        let decision = decide(&request, &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("heavy_veto"));
        assert!(decision.trace.triggers_fired.contains(&Trigger::HighStakes));
        assert_eq!(decision.trace.heavy_calls, 1);
        assert!(decision.trace.reservation_id.is_some());
        // The heavy call settled: one heavy event, no in-flight slots.
        assert_eq!(route.inflight_heavy, 0);
        assert_eq!(route.heavy_share(NOW_MS), Share::new(1, 11));
    }

    #[test]
    fn heavy_support_upgrades_the_target_tier() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        preload(&mut route, 10, 0);
        let mut request = make_request(clear_pool());
        request.high_stakes = true;

        let decision = decide(&request, &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::PromoteFull);
        assert_eq!(decision.trace.heavy_calls, 1);
        // f1 has the smallest support p-value, so heavy adjudicated it.
        let f1 = decision
            .evidence
            .supports
            .iter()
            .find(|v| v.fragment_id() == "f1")
            .expect("f1 is a support");
        assert_eq!(f1.tier, Tier::Heavy);
        assert_eq!(f1.calibrated_confidence, 0.95);
        assert!(route.window.iter().any(|e| e.was_heavy));
    }

    #[test]
    fn window_at_cap_degrades_to_lite_or_abstains() {
        // Heavy triggered, window at cap, no incident, lite permissible.
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        preload(&mut route, 100, 15); // 16/101 > 0.15 post-grant
        let mut request = make_request(clear_pool());
        request.high_stakes = true;

        let decision = decide(&request, &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::PromoteLite);
        assert_eq!(decision.trace.reasons, vec!["heavy_budget_exhausted".to_string()]);
        assert_eq!(decision.trace.heavy_calls, 0);
        assert!(decision.trace.reservation_id.is_none());

        // Same scenario with the lite fallback disabled: fail closed.
        let strict = PolicySnapshot { lite_fallback_allowed: false, ..PolicySnapshot::default() };
        let mut route = fresh_route(&strict);
        preload(&mut route, 100, 15);
        let decision = decide(&request, &strict, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("budget_exhausted"));
    }

    #[test]
    fn incident_bypasses_the_cap_and_is_traced() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        // Empty window would deny (1/1); the incident bypasses the cap.
        incident_mode(
            &mut route,
            IncidentAction::Open { ticket_id: "T-77".to_string(), duration_ms: 60 * 60 * 1000 },
            &harness.clock,
        )
        .unwrap();
        let mut request = make_request(clear_pool());
        request.high_stakes = true;

        let decision = decide(&request, &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::PromoteFull);
        assert_eq!(decision.trace.incident_ticket.as_deref(), Some("T-77"));
        assert_eq!(decision.trace.heavy_calls, 1);
    }

    #[test]
    fn slow_proofs_degrade_to_lite_with_reason() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = SlowProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(clear_pool()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::PromoteLite);
        assert_eq!(decision.trace.reasons, vec!["proof_timeout_or_size".to_string()]);
        assert!(decision.evidence.proofs.is_empty());

        let strict = PolicySnapshot { lite_fallback_allowed: false, ..PolicySnapshot::default() };
        let mut route = fresh_route(&strict);
        let decision = decide(&make_request(clear_pool()), &strict, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("proof_timeout_or_size"));
    }

    #[test]
    fn retrieval_exhaustion_abstains_scope_or_freshness_with_timeout_diagnostic() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let mut deps = harness.deps(&proofs);
        deps.retrieval_script = Some(vec![999, 999]);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(clear_pool()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("scope_or_freshness"));
        assert!(decision.evidence.scope.ids_for(ScopeCategory::Timeout).is_some());
        let timing = &decision.trace.stage_timings[0];
        assert_eq!(timing.stage, "retrieval");
        assert_eq!(timing.attempts, 2, "one retry per the stage table");
    }

    #[test]
    fn missing_dates_on_a_drifting_topic_need_cataloging() {
        let mut policy = PolicySnapshot::default();
        policy.drifting_topics.insert("route-1".to_string());
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        let mut pool = clear_pool();
        pool[0].publication_date = None;

        let decision = decide(&make_request(pool), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("needs_cataloging"));
    }

    #[test]
    fn narrow_pool_fails_the_poisoning_gate_as_insufficient_diversity() {
        // Two issuers in the whole pool, policy requires three.
        let policy = PolicySnapshot::default();
        let mut harness = Harness::new();
        harness.cheap = TableVerifier::new(Tier::Cheap)
            .with("f1", strong_support(0.002, 0.9))
            .with("f2", strong_support(0.003, 0.9));
        harness.small = TableVerifier::new(Tier::Small)
            .with("f1", strong_support(0.001, 0.85))
            .with("f2", strong_support(0.004, 0.87));
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        let pool = vec![
            make_fragment("f1", "doc-1", "issuer-a"),
            make_fragment("f2", "doc-2", "issuer-b"),
        ];

        let decision = decide(&make_request(pool), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("insufficient_diversity"));
        let poison = decision.evidence.poisoning.expect("poison report");
        assert_eq!(poison.first_failure.unwrap().layer, PoisonLayer::PoolDiversity);
    }

    #[test]
    fn malformed_fragment_fails_closed_as_scope() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        let mut pool = clear_pool();
        pool[1].issuer = String::new(); // structural fault

        let decision = decide(&make_request(pool), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("scope"));
        assert!(decision
            .trace
            .escalation_trail
            .iter()
            .any(|e| e.reason.contains("internal fault")));
    }

    #[test]
    fn empty_pool_abstains_insufficient_support() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);

        let decision = decide(&make_request(Vec::new()), &policy, &mut route, &deps);
        assert_eq!(decision.return_state, ReturnState::Abstain);
        assert_eq!(decision.trace.abstain_reason.as_deref(), Some("insufficient_support"));
    }

    #[test]
    fn low_conditional_power_raises_the_sampling_rate_to_the_cap() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        preload(&mut route, 10, 0);
        route.conditional_power = Some(ConditionalPowerEstimate {
            n_enrolled: 100,
            n_target: 1000,
            effect_hat: 0.01,
            cp: 0.2,
            low: true,
        });
        let mut request = make_request(clear_pool());
        request.request_id = unsampled_request_id("route-seed-1", 0.10);

        let decision = decide(&request, &policy, &mut route, &deps);
        assert!(decision.trace.triggers_fired.contains(&Trigger::LowConditionalPower));
        assert_eq!(decision.trace.heavy_calls, 1, "low power arms the heavy tier");
    }

    // -- determinism and invariants ------------------------------------------------------

    #[test]
    fn decide_is_byte_deterministic() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let request = make_request(clear_pool());

        let mut route_a = fresh_route(&policy);
        let mut route_b = fresh_route(&policy);
        let a = decide(&request, &policy, &mut route_a, &deps);
        let b = decide(&request, &policy, &mut route_b, &deps);
        let bytes_a = crate::canon::canonical_bytes(&a.trace).unwrap();
        let bytes_b = crate::canon::canonical_bytes(&b.trace).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let ev_a = crate::canon::canonical_bytes(&a.evidence).unwrap();
        let ev_b = crate::canon::canonical_bytes(&b.evidence).unwrap();
        assert_eq!(ev_a, ev_b);
    }

    #[test]
    fn heavy_never_runs_twice_and_share_stays_under_the_cap() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let deps = harness.deps(&proofs);
        let mut route = fresh_route(&policy);
        preload(&mut route, 20, 0);

        for i in 0..200 {
            let mut request = make_request(clear_pool());
            request.request_id = format!("req-prop-{i}");
            request.high_stakes = i % 3 == 0;
            let decision = decide(&request, &policy, &mut route, &deps);
            assert!(decision.trace.heavy_calls <= 1, "at most one heavy call per request");
            assert_eq!(route.inflight_heavy, 0, "reservations always settle");
            let share = route.heavy_share(NOW_MS);
            assert!(
                share.le_f64(policy.heavy_cap),
                "window share {share} exceeded the cap at request {i}"
            );
        }
    }

    #[test]
    fn every_emitted_reason_maps_to_the_canonical_enum() {
        let policy = PolicySnapshot::default();
        let harness = Harness::new();
        let proofs = OkProofs;
        let slow = SlowProofs;

        let mut traces = Vec::new();
        // A battery of scenarios covering all return paths.
        let scenarios: Vec<(PolicySnapshot, Request, &dyn ProofSource)> = vec![
            (policy.clone(), make_request(clear_pool()), &proofs),
            (policy.clone(), make_request(Vec::new()), &proofs),
            (policy.clone(), make_request(clear_pool()), &slow),
            (
                PolicySnapshot {
                    route_jurisdictions: vec!["US".to_string()],
                    ..PolicySnapshot::default()
                },
                make_request(clear_pool()),
                &proofs,
            ),
            (
                policy.clone(),
                Request { high_stakes: true, ..make_request(clear_pool()) },
                &proofs,
            ),
        ];
        for (p, request, source) in &scenarios {
            let deps = harness.deps(*source);
            let mut route = fresh_route(p);
            traces.push(decide(request, p, &mut route, &deps).trace);
        }
        for trace in &traces {
            for reason in &trace.reasons {
                assert!(
                    ReasonCode::from_code(reason).is_some(),
                    "unmapped reason code `{reason}`"
                );
            }
            if trace.return_state == ReturnState::Abstain {
                let reason = trace.abstain_reason.as_deref().expect("abstain carries a reason");
                assert!(ReasonCode::from_code(reason).is_some());
            }
        }
    }

    #[test]
    fn histogram_reports_bins_only() {
        assert_eq!(proof_latency_histogram(&[]), None);
        let bins = proof_latency_histogram(&[10, 20, 30, 40, 50, 60, 70, 80, 90, 100]).unwrap();
        assert_eq!(bins.p50_ms, 50);
        assert_eq!(bins.p95_ms, 100);
        assert_eq!(bins.p99_ms, 100);
        assert_eq!(bins.samples, 10);
    }
}
