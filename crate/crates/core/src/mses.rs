//! Minimal sufficient evidence sets, counterfactual flips, and the
//! composite justification score.
//!
//! Given a support set that already clears the admission gates, greedy
//! backward elimination strips fragments one at a time — lowest marginal
//! contribution first — keeping each removal only if the remaining set
//! still passes. The result is a passing set from which no single fragment
//! can be removed: every member carries a counterfactual ("drop this and
//! the decision flips") recorded with the first gate that breaks.
//!
//! The one-fragment-per-issuer monoculture rule is handled by repair:
//! an input set may violate it (elimination removes the surplus), but a
//! repaired set is never allowed to regress, and an unrepairable set is a
//! dedicated error rather than a silent pass.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{g_indep, IndependenceReport, ProvenanceGraph};
use crate::policy::{temporal_diversity_ok, Fragment, PolicySnapshot};
use crate::stats::{by_fdr, holm_fwer, FamilyKind, PValueFamily};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Errors raised by evidence-set extraction and scoring.
#[derive(Debug, Error)]
pub enum MsesError {
    /// The input set does not pass the gate predicate.
    #[error("input evidence set does not pass the gates (first broken: {broken:?})")]
    NonPassingInput { broken: Option<BrokenGate> },
    /// No sequence of removals reaches one-fragment-per-issuer.
    #[error("no subset satisfies the one-fragment-per-issuer rule")]
    MonocultureUnrepairable,
    /// The fragility index is undefined without slacks.
    #[error("fragility index requires at least one gate slack")]
    EmptySlacks,
    /// A slack value is outside [0, 1].
    #[error("gate `{gate}` slack {value} is not in [0, 1]")]
    InvalidSlack { gate: String, value: f64 },
    /// A verdict probability is outside [0, 1].
    #[error("fragment `{fragment_id}` field `{field}` = {value} is not in [0, 1]")]
    InvalidProbability { fragment_id: String, field: &'static str, value: f64 },
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Verifier tier that produced a verdict (highest tier wins).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Cheap,
    Small,
    Heavy,
}

/// A fragment together with the verdict of the highest verifier tier that
/// scored it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictedFragment {
    pub fragment: Fragment,
    /// P-value against "does not support the claim".
    pub support_p: f64,
    /// P-value against "does not contradict the claim".
    pub contradict_p: f64,
    /// Calibrated confidence that the fragment supports the claim.
    pub calibrated_confidence: f64,
    pub tier: Tier,
}

impl VerdictedFragment {
    pub fn fragment_id(&self) -> &str {
        &self.fragment.fragment_id
    }

    fn validate(&self) -> Result<(), MsesError> {
        for (field, value) in [
            ("support_p", self.support_p),
            ("contradict_p", self.contradict_p),
            ("calibrated_confidence", self.calibrated_confidence),
        ] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(MsesError::InvalidProbability {
                    fragment_id: self.fragment.fragment_id.clone(),
                    field,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Gates that a counterfactual removal can break, in canonical reporting
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokenGate {
    SupportCount,
    FdrBudget,
    FwerBudget,
    GIndep,
    IssuerCap,
    Temporal,
    Scope,
}

/// Outcome of evaluating the gate predicate on one subset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GateCheck {
    pub pass: bool,
    /// Broken gates in canonical order; empty iff `pass`.
    pub broken: Vec<BrokenGate>,
}

impl GateCheck {
    pub fn passing() -> GateCheck {
        GateCheck { pass: true, broken: Vec::new() }
    }

    pub fn failing(mut broken: Vec<BrokenGate>) -> GateCheck {
        broken.sort();
        broken.dedup();
        GateCheck { pass: broken.is_empty(), broken }
    }

    pub fn first_broken(&self) -> Option<BrokenGate> {
        self.broken.first().copied()
    }
}

/// The gate predicate evaluated during elimination.
///
/// Implementations must be pure: the same subset must always produce the
/// same answer, or extraction loses its determinism guarantee. The
/// monoculture rule is exposed separately so the eliminator can repair a
/// violating input instead of rejecting it.
pub trait GatePredicate {
    /// Every gate except the one-fragment-per-issuer rule.
    fn base_check(&self, subset: &[VerdictedFragment]) -> GateCheck;

    /// The one-fragment-per-issuer rule.
    fn monoculture_ok(&self, subset: &[VerdictedFragment]) -> bool;

    /// Independence score of the subset in [0, 1], used when ordering
    /// removal attempts by marginal contribution.
    fn independence(&self, subset: &[VerdictedFragment]) -> f64;

    /// Normalized slack per gate for the subset (0 = at threshold,
    /// 1 = maximal margin). Predicates without slack information may
    /// return an empty map, which yields fragility 0.
    fn gate_slacks(&self, _subset: &[VerdictedFragment]) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
}

/// Base gates plus monoculture, with monoculture reported under the
/// issuer-cap category.
fn combined_check(gate: &dyn GatePredicate, subset: &[VerdictedFragment]) -> GateCheck {
    let mut broken = gate.base_check(subset).broken;
    if !gate.monoculture_ok(subset) {
        broken.push(BrokenGate::IssuerCap);
    }
    GateCheck::failing(broken)
}

/// A member of the evidence set and the gate its removal breaks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualFlip {
    pub fragment_id: String,
    pub broken_gate: BrokenGate,
}

/// The extracted evidence set with its audit trail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidencePack {
    /// Fragment ids of the minimal sufficient evidence set, in the order
    /// they survive from the input.
    pub mses: Vec<String>,
    /// ΔJ contributed by each member (J of the set minus J without it).
    pub delta_scores: BTreeMap<String, f64>,
    /// 1 − min normalized gate slack; higher means closer to a flip.
    pub fragility: f64,
    /// For each member, the first gate broken by its removal.
    pub counterfactual_flips: Vec<CounterfactualFlip>,
    /// Number of full elimination passes executed.
    pub recheck_passes: u32,
    /// Why each member was retained, keyed by fragment id.
    pub per_fragment_reasons: BTreeMap<String, String>,
    /// Fragment ids removed during elimination, in removal order.
    pub removal_order: Vec<String>,
}

/// The composite justification score and its components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JustificationScore {
    pub j: f64,
    pub support_strength: f64,
    pub independence: f64,
    pub minimality: f64,
    pub w_support: f64,
    pub w_indep: f64,
    pub w_minimality: f64,
}

// ---------------------------------------------------------------------------
// Justification scoring
// ---------------------------------------------------------------------------

fn mean_confidence(subset: &[VerdictedFragment]) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    subset.iter().map(|v| v.calibrated_confidence).sum::<f64>() / subset.len() as f64
}

fn minimality_component(size: usize, min_supports: u32) -> f64 {
    if size == 0 {
        0.0
    } else {
        (min_supports as f64 / size as f64).min(1.0)
    }
}

fn weighted_j(
    support_strength: f64,
    independence: f64,
    minimality: f64,
    policy: &PolicySnapshot,
) -> f64 {
    let w = policy.justification_weights;
    w.w_support * support_strength + w.w_indep * independence + w.w_minimality * minimality
}

/// J of a subset as seen during elimination, using the predicate's
/// independence score.
fn set_score(subset: &[VerdictedFragment], gate: &dyn GatePredicate, policy: &PolicySnapshot) -> f64 {
    let support = mean_confidence(subset);
    let independence = gate.independence(subset).clamp(0.0, 1.0);
    let minimality = minimality_component(subset.len(), policy.min_supports);
    weighted_j(support, independence, minimality, policy)
}

/// Composite justification score over the final evidence set.
///
/// `support_strength` is the mean calibrated confidence of the members,
/// `independence` is the pairwise-disjoint-ancestry score, and
/// `minimality` rewards small sets (`min_supports / |MSES|`, capped at 1).
pub fn justification_score(
    supports: &[VerdictedFragment],
    independence_report: &IndependenceReport,
    pack: &EvidencePack,
    policy: &PolicySnapshot,
) -> JustificationScore {
    let member_ids: BTreeSet<&str> = pack.mses.iter().map(String::as_str).collect();
    let members: Vec<VerdictedFragment> = supports
        .iter()
        .filter(|v| member_ids.contains(v.fragment_id()))
        .cloned()
        .collect();

    let support_strength = mean_confidence(&members);
    let independence = independence_report.g_indep.as_f64().clamp(0.0, 1.0);
    let minimality = minimality_component(pack.mses.len(), policy.min_supports);
    let w = policy.justification_weights;
    JustificationScore {
        j: weighted_j(support_strength, independence, minimality, policy),
        support_strength,
        independence,
        minimality,
        w_support: w.w_support,
        w_indep: w.w_indep,
        w_minimality: w.w_minimality,
    }
}

/// Fragility of a decision: `1 − min(slacks)`, where each slack is the
/// normalized margin of one gate (0 = at threshold, 1 = maximal margin).
pub fn fragility_index(gate_slacks: &BTreeMap<String, f64>) -> Result<f64, MsesError> {
    if gate_slacks.is_empty() {
        return Err(MsesError::EmptySlacks);
    }
    let mut min_slack = f64::INFINITY;
    for (gate, value) in gate_slacks {
        if !(0.0..=1.0).contains(value) || value.is_nan() {
            return Err(MsesError::InvalidSlack { gate: gate.clone(), value: *value });
        }
        min_slack = min_slack.min(*value);
    }
    Ok(1.0 - min_slack)
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

fn monoculture_rule_allows(
    gate: &dyn GatePredicate,
    current: &[VerdictedFragment],
    candidate: &[VerdictedFragment],
) -> bool {
    // Repair-then-preserve: while the current set violates monoculture any
    // removal is allowed (it may be the repair); once repaired, never
    // reintroduce a violation.
    gate.monoculture_ok(candidate) || !gate.monoculture_ok(current)
}

/// Extract the minimal sufficient evidence set by greedy backward
/// elimination.
///
/// Removal attempts run lowest-marginal-ΔJ first (ties broken by fragment
/// id), a removal is kept iff the remaining set still passes, and full
/// passes repeat until one removes nothing. The input must pass every gate
/// except monoculture, which elimination repairs when possible.
pub fn extract_mses(
    supports: &[VerdictedFragment],
    gate: &dyn GatePredicate,
    policy: &PolicySnapshot,
) -> Result<EvidencePack, MsesError> {
    if supports.is_empty() {
        return Err(MsesError::NonPassingInput { broken: Some(BrokenGate::SupportCount) });
    }
    for v in supports {
        v.validate()?;
    }
    let input_check = gate.base_check(supports);
    if !input_check.pass {
        return Err(MsesError::NonPassingInput { broken: input_check.first_broken() });
    }

    let mut current: Vec<VerdictedFragment> = supports.to_vec();
    let mut removal_order: Vec<String> = Vec::new();
    let mut recheck_passes = 0u32;

    loop {
        recheck_passes += 1;

        // Order fixed at the start of the pass: ascending marginal ΔJ over
        // the pass-start set, ties by fragment id.
        let pass_start = current.clone();
        let j_full = set_score(&pass_start, gate, policy);
        let mut order: Vec<(f64, String)> = pass_start
            .iter()
            .map(|v| {
                let without: Vec<VerdictedFragment> = pass_start
                    .iter()
                    .filter(|w| w.fragment_id() != v.fragment_id())
                    .cloned()
                    .collect();
                (j_full - set_score(&without, gate, policy), v.fragment_id().to_string())
            })
            .collect();
        order.sort_by(|(da, ia), (db, ib)| {
            da.partial_cmp(db).expect("ΔJ is finite").then_with(|| ia.cmp(ib))
        });

        let mut removed_any = false;
        for (_, id) in &order {
            if !current.iter().any(|v| v.fragment_id() == id) {
                continue;
            }
            let candidate: Vec<VerdictedFragment> =
                current.iter().filter(|v| v.fragment_id() != id).cloned().collect();
            if candidate.is_empty() {
                continue;
            }
            if gate.base_check(&candidate).pass
                && monoculture_rule_allows(gate, &current, &candidate)
            {
                current = candidate;
                removal_order.push(id.clone());
                removed_any = true;
            }
        }

        if !removed_any {
            break;
        }
    }

    if !gate.monoculture_ok(&current) {
        return Err(MsesError::MonocultureUnrepairable);
    }

    let flips = counterfactual_flips(&current, gate)?;
    let per_fragment_reasons: BTreeMap<String, String> = flips
        .iter()
        .map(|f| {
            (
                f.fragment_id.clone(),
                format!("removal breaks {:?}", f.broken_gate).to_lowercase(),
            )
        })
        .collect();

    let j_final = set_score(&current, gate, policy);
    let delta_scores: BTreeMap<String, f64> = current
        .iter()
        .map(|v| {
            let without: Vec<VerdictedFragment> = current
                .iter()
                .filter(|w| w.fragment_id() != v.fragment_id())
                .cloned()
                .collect();
            (v.fragment_id().to_string(), j_final - set_score(&without, gate, policy))
        })
        .collect();

    let slacks = gate.gate_slacks(&current);
    let fragility = if slacks.is_empty() { 0.0 } else { fragility_index(&slacks)? };

    Ok(EvidencePack {
        mses: current.iter().map(|v| v.fragment_id().to_string()).collect(),
        delta_scores,
        fragility,
        counterfactual_flips: flips,
        recheck_passes,
        per_fragment_reasons,
        removal_order,
    })
}

/// For each member of a passing evidence set, evaluate the set without it
/// and record the first gate that breaks (members whose removal would
/// still pass — possible only for non-minimal inputs — are omitted).
pub fn counterfactual_flips(
    mses: &[VerdictedFragment],
    gate: &dyn GatePredicate,
) -> Result<Vec<CounterfactualFlip>, MsesError> {
    if mses.is_empty() {
        return Err(MsesError::NonPassingInput { broken: Some(BrokenGate::SupportCount) });
    }
    let check = combined_check(gate, mses);
    if !check.pass {
        return Err(MsesError::NonPassingInput { broken: check.first_broken() });
    }

    let mut flips = Vec::new();
    for member in mses {
        let without: Vec<VerdictedFragment> = mses
            .iter()
            .filter(|v| v.fragment_id() != member.fragment_id())
            .cloned()
            .collect();
        let broken = if without.is_empty() {
            Some(BrokenGate::SupportCount)
        } else {
            combined_check(gate, &without).first_broken()
        };
        if let Some(broken_gate) = broken {
            flips.push(CounterfactualFlip {
                fragment_id: member.fragment_id().to_string(),
                broken_gate,
            });
        }
    }
    Ok(flips)
}

// ---------------------------------------------------------------------------
// Standard gate predicate
// ---------------------------------------------------------------------------

/// The production gate predicate: support count, optional multiplicity
/// budgets over support p-values, independence floor, issuer cap, and
/// optional temporal diversity, all taken from the policy snapshot.
pub struct StandardGate<'a> {
    policy: &'a PolicySnapshot,
    graph: &'a ProvenanceGraph,
    /// Enforce the FWER budget (Holm at `policy.alpha`) on support p-values.
    pub require_fwer: bool,
    /// Enforce the FDR budget (BY at `policy.q`) on support p-values.
    pub require_fdr: bool,
    /// Treat the topic as drifting and require temporal diversity.
    pub drifting_topic: bool,
}

impl<'a> StandardGate<'a> {
    pub fn new(policy: &'a PolicySnapshot, graph: &'a ProvenanceGraph) -> StandardGate<'a> {
        StandardGate {
            policy,
            graph,
            require_fwer: false,
            require_fdr: false,
            drifting_topic: false,
        }
    }

    fn fragments(subset: &[VerdictedFragment]) -> Vec<Fragment> {
        subset.iter().map(|v| v.fragment.clone()).collect()
    }

    fn budget_rejections(
        &self,
        subset: &[VerdictedFragment],
        fwer: bool,
    ) -> usize {
        let family = PValueFamily::new(
            FamilyKind::Supports,
            subset
                .iter()
                .map(|v| (v.fragment_id().to_string(), v.support_p))
                .collect(),
        );
        let result = if fwer {
            holm_fwer(&family, self.policy.alpha)
        } else {
            by_fdr(&family, self.policy.q)
        };
        result.map(|r| r.rejected.len()).unwrap_or(0)
    }
}

impl GatePredicate for StandardGate<'_> {
    fn base_check(&self, subset: &[VerdictedFragment]) -> GateCheck {
        let mut broken = Vec::new();

        if (subset.len() as u32) < self.policy.min_supports {
            broken.push(BrokenGate::SupportCount);
            return GateCheck::failing(broken);
        }

        if self.require_fdr
            && self.budget_rejections(subset, false) < self.policy.min_supports as usize
        {
            broken.push(BrokenGate::FdrBudget);
        }
        if self.require_fwer
            && self.budget_rejections(subset, true) < self.policy.min_supports as usize
        {
            broken.push(BrokenGate::FwerBudget);
        }

        let fragments = Self::fragments(subset);
        if let Ok(report) = g_indep(&fragments, self.graph, self.policy) {
            if !report.pass_independence {
                broken.push(BrokenGate::GIndep);
            }
            if !report.pass_issuer_cap || !report.pass_author_cap {
                broken.push(BrokenGate::IssuerCap);
            }
        }

        if self.drifting_topic {
            let diverse = temporal_diversity_ok(&fragments, self.policy, true)
                .map(|t| t.pass)
                .unwrap_or(false);
            if !diverse {
                broken.push(BrokenGate::Temporal);
            }
        }

        GateCheck::failing(broken)
    }

    fn monoculture_ok(&self, subset: &[VerdictedFragment]) -> bool {
        if !self.policy.mses_monoculture_check {
            return true;
        }
        let mut seen = BTreeSet::new();
        subset.iter().all(|v| seen.insert(v.fragment.issuer.as_str()))
    }

    fn independence(&self, subset: &[VerdictedFragment]) -> f64 {
        let fragments = Self::fragments(subset);
        g_indep(&fragments, self.graph, self.policy)
            .map(|r| r.g_indep.as_f64())
            .unwrap_or(0.0)
    }

    fn gate_slacks(&self, subset: &[VerdictedFragment]) -> BTreeMap<String, f64> {
        let mut slacks = BTreeMap::new();
        let fragments = Self::fragments(subset);
        if let Ok(report) = g_indep(&fragments, self.graph, self.policy) {
            // Margin above the floor, normalized by the headroom to 1.
            let floor = self.policy.g_indep_min;
            let g = report.g_indep.as_f64();
            let headroom = (1.0 - floor).max(f64::EPSILON);
            slacks.insert("g_indep".to_string(), ((g - floor) / headroom).clamp(0.0, 1.0));

            // Margin below the issuer cap, normalized by the cap itself.
            let cap = self.policy.issuer_cap;
            let share = report.max_issuer_share.as_f64();
            slacks.insert(
                "issuer_cap".to_string(),
                ((cap - share) / cap.max(f64::EPSILON)).clamp(0.0, 1.0),
            );
        }
        let extra = subset.len().saturating_sub(self.policy.min_supports as usize);
        let denom = (self.policy.min_supports as f64).max(1.0);
        slacks.insert(
            "support_count".to_string(),
            ((extra as f64) / denom).clamp(0.0, 1.0),
        );
        slacks
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
