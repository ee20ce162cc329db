//! Monte Carlo propagation of dependent verifier errors.
//!
//! Pair-level false-positive/false-negative indicators are drawn under a
//! configurable dependence model — independent, Gaussian copula, Student-t
//! copula (shared heavy-tail shock), or beta-binomial overdispersion —
//! then cascaded pair → claim → answer under a named cascade rule. The
//! copulas act on latent uniforms with exactly preserved marginals, so the
//! same draws double as p-values: Holm and BY corrections inside the
//! simulation call the risk-stats implementations directly rather than
//! re-deriving any step procedure here.
//!
//! Every estimate carries a Monte Carlo standard error, every run echoes
//! its config and config hash for replay, and all randomness flows from
//! one seeded counter-based stream per answer draw, so identical
//! (config, seed) pairs reproduce bitwise-identical results and draw
//! batches can be partitioned across workers without changing them.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::canon::canonical_bytes;
use crate::hash::{hash_domain, Digest};
use crate::stats::{
    by_fdr, holm_fwer, m_eff_estimate, sample_size_two_proportions, z_quantile, DependenceReport,
    FamilyKind, MEffInput, PValueFamily,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("statistics failure: {0}")]
    Stats(#[from] crate::stats::StatsError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Dependence structure of pair-level errors within one claim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DependenceModel {
    Independent,
    /// Exchangeable Gaussian copula with correlation `rho`.
    GaussianCopula { rho: f64 },
    /// Exchangeable Student-t copula: a shared chi-square shock gives
    /// tail dependence even at moderate `rho`.
    TCopula { rho: f64, nu: u32 },
    /// Beta-binomial overdispersion: a per-claim error rate drawn from a
    /// Beta with the configured mean and overdispersion `phi`; `phi` → 0
    /// recovers plain binomial draws.
    BetaBinomial { phi: f64 },
}

/// How pair-level errors escalate to a claim error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeRule {
    /// The claim flips if any raw (uncorrected) pair false positive fires.
    AnyRawFp,
    /// The claim flips only if a pair false positive survives the Holm
    /// correction at `alpha`.
    PostCorrectionRejection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Marginal pair-level false-positive rate.
    pub pair_fp: f64,
    /// Marginal pair-level false-negative rate.
    pub pair_fn: f64,
    /// Fragments (pair checks) per claim.
    pub n_f: usize,
    /// Claims per answer.
    pub n_c: usize,
    pub cascade_rule: CascadeRule,
    pub dependence: DependenceModel,
    pub n_draws: usize,
    pub seed: u64,
    pub alpha: f64,
    pub q: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.pair_fp) || !rate_ok(self.pair_fn) {
            return Err(SimError::InvalidConfig(format!(
                "rates must lie in [0,1]: fp={}, fn={}",
                self.pair_fp, self.pair_fn
            )));
        }
        if !rate_ok(self.alpha) || !rate_ok(self.q) {
            return Err(SimError::InvalidConfig(format!(
                "levels must lie in [0,1]: alpha={}, q={}",
                self.alpha, self.q
            )));
        }
        match self.dependence {
            DependenceModel::GaussianCopula { rho } | DependenceModel::TCopula { rho, .. } => {
                if !(0.0..1.0).contains(&rho) {
                    return Err(SimError::InvalidConfig(format!("rho must lie in [0,1): {rho}")));
                }
            }
            DependenceModel::BetaBinomial { phi } => {
                if !(0.0..1.0).contains(&phi) {
                    return Err(SimError::InvalidConfig(format!("phi must lie in [0,1): {phi}")));
                }
            }
            DependenceModel::Independent => {}
        }
        if let DependenceModel::TCopula { nu, .. } = self.dependence {
            if ![4, 6, 10].contains(&nu) {
                return Err(SimError::InvalidConfig(format!("nu must be one of 4, 6, 10: {nu}")));
            }
        }
        if self.n_draws == 0 {
            return Err(SimError::InvalidConfig("n_draws must be at least 1".to_string()));
        }
        if self.n_f == 0 || self.n_c == 0 {
            return Err(SimError::InvalidConfig("n_f and n_c must be at least 1".to_string()));
        }
        Ok(())
    }

    /// Content hash of the canonical config encoding, echoed in results.
    pub fn config_hash(&self) -> Digest {
        let bytes = canonical_bytes(self).expect("config has no non-finite fields");
        hash_domain("simconfig:v1", &[&bytes])
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    fn of_proportion(hits: u64, n: u64) -> Estimate {
        let p = hits as f64 / n as f64;
        Estimate { value: p, se: (p * (1.0 - p) / n as f64).sqrt() }
    }

    /// |value − reference| ≤ 3·SE.
    pub fn within_3se(&self, reference: f64) -> bool {
        (self.value - reference).abs() <= 3.0 * self.se
    }
}

/// One row of the power overlay: closed form vs simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub p0: f64,
    pub p1: f64,
    pub n_closed_form: u64,
    pub n_simulated: u64,
    /// (n_simulated − n_closed_form) / n_closed_form.
    pub rel_gap: f64,
}

/// Stress-vs-normal cost multipliers with component breakdowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub baseline_p50: f64,
    pub baseline_p90: f64,
    pub stress_p50: f64,
    pub stress_p90: f64,
    pub p50_multiplier: f64,
    pub p90_multiplier: f64,
    /// Per-stage mean cost increase as a fraction of the baseline mean.
    pub component_contributions: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// P(claim errs) under the configured cascade rule (false-positive
    /// escalation, plus loss of the claim when every pair check is a
    /// false negative).
    pub claim_error: Estimate,
    /// P(answer errs) = P(any of the `n_c` claims errs).
    pub answer_error: Estimate,
    /// P(≥1 Holm rejection in an all-null pair family) at `alpha`.
    pub fwer_post_holm: Estimate,
    /// Mean false-discovery proportion after BY at `q` (all nulls true,
    /// so any rejection is a false discovery).
    pub fdr_post_by: Estimate,
    /// Effective-test-count estimate over the pair indicator matrix,
    /// absent when the matrix is degenerate (e.g., zero error rate).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m_eff: Option<DependenceReport>,
    /// Filled by [`power_overlay`] when composed into one artifact.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_per_arm: Option<Vec<PowerRow>>,
    /// Filled by [`stress_cost`] when composed into one artifact.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stress_cost: Option<StressReport>,
    /// Config echo for replay.
    pub config: SimConfig,
    /// Hash of the canonical config encoding.
    pub config_hash: String,
}

// ---------------------------------------------------------------------------
// Latent-uniform sampling
// ---------------------------------------------------------------------------

/// Draw one claim's worth of latent uniforms with exactly uniform
/// marginals and the configured dependence. Thresholding at a rate gives
/// the error indicator; the uniforms themselves serve as the p-values of
/// all-null pair tests.
fn claim_uniforms(
    model: DependenceModel,
    marginal_rate: f64,
    n_f: usize,
    rng: &mut ChaCha12Rng,
    out: &mut Vec<f64>,
) {
    out.clear();
    match model {
        DependenceModel::Independent => {
            for _ in 0..n_f {
                out.push(rng.gen::<f64>());
            }
        }
        DependenceModel::GaussianCopula { rho } => {
            let shared: f64 = rand_distr::StandardNormal.sample(rng);
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            for _ in 0..n_f {
                let e: f64 = rand_distr::StandardNormal.sample(rng);
                out.push(crate::stats::phi(a * shared + b * e));
            }
        }
        DependenceModel::TCopula { rho, nu } => {
            let shared: f64 = rand_distr::StandardNormal.sample(rng);
            let chi = rand_distr::ChiSquared::new(nu as f64).expect("valid dof");
            let w: f64 = chi.sample(rng);
            let scale = (w / nu as f64).sqrt();
            let t_dist = StudentsT::new(0.0, 1.0, nu as f64).expect("valid t");
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            for _ in 0..n_f {
                let e: f64 = rand_distr::StandardNormal.sample(rng);
                let t = (a * shared + b * e) / scale;
                out.push(t_dist.cdf(t));
            }
        }
        DependenceModel::BetaBinomial { phi } => {
            // Draw the per-claim rate, then map each Bernoulli event back
            // onto a uniform via its conditional bucket so the marginal
            // stays exactly uniform.
            let p_claim = if phi <= f64::EPSILON || marginal_rate <= 0.0 || marginal_rate >= 1.0 {
                marginal_rate
            } else {
                let a = marginal_rate * (1.0 - phi) / phi;
                let b = (1.0 - marginal_rate) * (1.0 - phi) / phi;
                rand_distr::Beta::new(a, b).expect("valid beta").sample(rng)
            };
            for _ in 0..n_f {
                let event = rng.gen::<f64>() < p_claim;
                let v = rng.gen::<f64>();
                out.push(if event {
                    v * marginal_rate
                } else {
                    marginal_rate + v * (1.0 - marginal_rate)
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Maximum claims kept for the m_eff cross-check matrix.
const MEFF_SAMPLE_ROWS: usize = 2_000;
const MEFF_BOOTSTRAPS: usize = 200;

/// Run the cascade simulation. Validates the config first; see
/// [`SimResult`] for what is estimated.
pub fn simulate(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    Ok(run_sim(config))
}

/// The unchecked core; also used by [`validate_baselines`] for limit
/// cases (e.g. the degenerate ρ→1 copula) outside the config contract.
fn run_sim(config: &SimConfig) -> SimResult {
    let ids: Vec<String> = (0..config.n_f).map(|i| format!("t{i}")).collect();

    let mut claim_err_hits = 0u64;
    let mut answer_err_hits = 0u64;
    let mut fwer_hits = 0u64;
    let mut fdr_hits = 0u64;
    let mut meff_rows: Vec<Vec<f64>> = Vec::new();

    let mut fp_u: Vec<f64> = Vec::with_capacity(config.n_f);
    let mut fn_u: Vec<f64> = Vec::with_capacity(config.n_f);

    for draw in 0..config.n_draws {
        // Counter-based stream per answer draw: batches can be split
        // across workers without reordering the randomness.
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(draw as u64);

        let mut answer_err = false;
        for _claim in 0..config.n_c {
            claim_uniforms(config.dependence, config.pair_fp, config.n_f, &mut rng, &mut fp_u);
            claim_uniforms(config.dependence, config.pair_fn, config.n_f, &mut rng, &mut fn_u);

            let raw_fp_any = fp_u.iter().any(|&u| u < config.pair_fp);
            let all_fn = fn_u.iter().all(|&u| u < config.pair_fn);

            // The latent uniforms are the all-null p-values; the
            // corrections are the risk-stats implementations.
            let family = PValueFamily::new(
                FamilyKind::Supports,
                ids.iter().cloned().zip(fp_u.iter().copied()).collect(),
            );
            let holm = holm_fwer(&family, config.alpha).expect("uniforms are valid p-values");
            let by = by_fdr(&family, config.q).expect("uniforms are valid p-values");
            let holm_any = !holm.rejected.is_empty();
            let by_any = !by.rejected.is_empty();
            if holm_any {
                fwer_hits += 1;
            }
            if by_any {
                fdr_hits += 1;
            }

            let fp_flip = match config.cascade_rule {
                CascadeRule::AnyRawFp => raw_fp_any,
                CascadeRule::PostCorrectionRejection => holm_any,
            };
            let claim_err = fp_flip || all_fn;
            if claim_err {
                claim_err_hits += 1;
            }
            answer_err |= claim_err;

            if meff_rows.len() < MEFF_SAMPLE_ROWS {
                meff_rows.push(
                    fp_u.iter().map(|&u| if u < config.pair_fp { 1.0 } else { 0.0 }).collect(),
                );
            }
        }
        if answer_err {
            answer_err_hits += 1;
        }
    }

    let n_claims = (config.n_draws * config.n_c) as u64;
    let m_eff = m_eff_estimate(
        &MEffInput::Outcomes(meff_rows),
        MEFF_BOOTSTRAPS,
        config.seed ^ 0x6d5f_6566,
    )
    .ok();

    SimResult {
        claim_error: Estimate::of_proportion(claim_err_hits, n_claims),
        answer_error: Estimate::of_proportion(answer_err_hits, config.n_draws as u64),
        fwer_post_holm: Estimate::of_proportion(fwer_hits, n_claims),
        fdr_post_by: Estimate::of_proportion(fdr_hits, n_claims),
        m_eff,
        n_per_arm: None,
        stress_cost: None,
        config: config.clone(),
        config_hash: config.config_hash().to_hex(),
    }
}

// ---------------------------------------------------------------------------
// Baseline validation
// ---------------------------------------------------------------------------

/// One baseline check: a simulated estimate against its oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub label: String,
    pub simulated: f64,
    pub oracle: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Baseline-validation report. Failures are entries, never errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub entries: Vec<BaselineEntry>,
    /// |simulated − analytic| along the ρ sweep, largest ρ first;
    /// convergence is reported for inspection, not asserted.
    pub rho_sweep_gaps: Vec<(f64, f64)>,
    pub all_pass: bool,
}

/// Sweep the dependence strength toward independence and check the
/// analytic limits: the ρ→0 claim error against the closed form, the
/// union bound on answer error, and the degenerate ρ→1 copula collapsing
/// m_eff to 1.
pub fn validate_baselines(base: &SimConfig) -> Result<BaselineReport, SimError> {
    base.validate()?;
    let mut entries = Vec::new();
    let mut rho_sweep_gaps = Vec::new();

    let analytic = 1.0 - (1.0 - base.pair_fp).powi(base.n_f as i32);
    for rho in [0.5, 0.2, 0.05, 0.0] {
        let config = SimConfig {
            dependence: DependenceModel::GaussianCopula { rho },
            cascade_rule: CascadeRule::AnyRawFp,
            pair_fn: 0.0,
            n_c: 1,
            ..base.clone()
        };
        let result = run_sim(&config);
        rho_sweep_gaps.push((rho, (result.claim_error.value - analytic).abs()));
        if rho == 0.0 {
            entries.push(BaselineEntry {
                label: "rho0_claim_error_matches_independence_formula".to_string(),
                simulated: result.claim_error.value,
                oracle: analytic,
                tolerance: 3.0 * result.claim_error.se,
                pass: result.claim_error.within_3se(analytic),
            });
        }
    }

    // Union bound on the answer cascade: P(answer err) ≤ n_c · claim err.
    let multi = SimConfig {
        cascade_rule: CascadeRule::AnyRawFp,
        pair_fn: 0.0,
        ..base.clone()
    };
    let result = run_sim(&multi);
    let bound = multi.n_c as f64 * result.claim_error.value;
    entries.push(BaselineEntry {
        label: "answer_error_respects_union_bound".to_string(),
        simulated: result.answer_error.value,
        oracle: bound,
        tolerance: 3.0 * result.answer_error.se,
        pass: result.answer_error.value <= bound + 3.0 * result.answer_error.se,
    });

    // Degenerate copula: identical pairs, one effective test. ρ = 1 sits
    // outside the config contract, so the limit runs on the unchecked
    // core.
    let degenerate = SimConfig {
        dependence: DependenceModel::GaussianCopula { rho: 1.0 },
        cascade_rule: CascadeRule::AnyRawFp,
        pair_fn: 0.0,
        n_c: 1,
        ..base.clone()
    };
    let result = run_sim(&degenerate);
    let m_eff = result.m_eff.as_ref().map(|r| r.m_eff).unwrap_or(f64::NAN);
    entries.push(BaselineEntry {
        label: "degenerate_copula_collapses_m_eff_to_one".to_string(),
        simulated: m_eff,
        oracle: 1.0,
        tolerance: 0.02,
        pass: (m_eff - 1.0).abs() <= 0.02,
    });

    let all_pass = entries.iter().all(|e| e.pass);
    Ok(BaselineReport { entries, rho_sweep_gaps, all_pass })
}

// ---------------------------------------------------------------------------
// Power overlay
// ---------------------------------------------------------------------------

/// Simulated power of the two-sided pooled z-test at `n` per arm, with
/// the Yates continuity correction the closed-form plan is built for.
///
/// Independent mode draws binomial arm counts directly; a copula model
/// with ρ > 0 draws cluster-correlated outcomes (clusters of `n_f`
/// checks), inflating the estimator variance and therefore the required
/// n.
fn simulated_power(
    n: u64,
    p0: f64,
    p1: f64,
    alpha: f64,
    config: &SimConfig,
    n_sims: usize,
    seed: u64,
) -> f64 {
    let z_crit = z_quantile(1.0 - alpha / 2.0);
    let rho = match config.dependence {
        DependenceModel::GaussianCopula { rho } | DependenceModel::TCopula { rho, .. } => rho,
        _ => 0.0,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rejections = 0usize;

    let draw_arm = |rng: &mut ChaCha12Rng, p: f64| -> u64 {
        if rho == 0.0 {
            rand_distr::Binomial::new(n, p).expect("valid binomial").sample(rng)
        } else {
            // Exchangeable correlation within clusters of n_f checks.
            let threshold = z_quantile(p);
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            let mut hits = 0u64;
            let mut drawn = 0u64;
            while drawn < n {
                let shared: f64 = rand_distr::StandardNormal.sample(rng);
                let cluster = (n - drawn).min(config.n_f as u64);
                for _ in 0..cluster {
                    let e: f64 = rand_distr::StandardNormal.sample(rng);
                    if a * shared + b * e < threshold {
                        hits += 1;
                    }
                }
                drawn += cluster;
            }
            hits
        }
    };

    for _ in 0..n_sims {
        let x0 = draw_arm(&mut rng, p0);
        let x1 = draw_arm(&mut rng, p1);
        let (ph0, ph1) = (x0 as f64 / n as f64, x1 as f64 / n as f64);
        let pooled = (x0 + x1) as f64 / (2 * n) as f64;
        let var = pooled * (1.0 - pooled) * 2.0 / n as f64;
        if var <= 0.0 {
            continue;
        }
        // Yates correction: 1/(2n) per arm.
        let delta = ((ph0 - ph1).abs() - 1.0 / n as f64).max(0.0);
        if delta / var.sqrt() >= z_crit {
            rejections += 1;
        }
    }
    rejections as f64 / n_sims as f64
}

/// Simulation-based n-per-arm table over a p0 grid, bisected to the
/// minimal n reaching `target_power` and cross-checked against the
/// closed form.
pub fn power_overlay(
    config: &SimConfig,
    p0_grid: &[f64],
    rel_drop: f64,
    target_power: f64,
) -> Result<Vec<PowerRow>, SimError> {
    config.validate()?;
    if p0_grid.iter().any(|&p| !(0.0 < p && p < 1.0)) {
        return Err(SimError::InvalidConfig("p0 grid must lie in (0,1)".to_string()));
    }
    let n_sims = config.n_draws.clamp(2_000, 40_000);
    let mut rows = Vec::with_capacity(p0_grid.len());
    for (i, &p0) in p0_grid.iter().enumerate() {
        let plan = sample_size_two_proportions(p0, rel_drop, config.alpha, target_power, 0.10)?;
        let seed = config.seed.wrapping_add(i as u64);
        let power_at =
            |n: u64| simulated_power(n, p0, plan.p1, config.alpha, config, n_sims, seed);
        // Bisect over a bracket around the closed form.
        let mut lo = (plan.n_per_arm / 2).max(2);
        let mut hi = plan.n_per_arm * 2;
        while power_at(hi) < target_power {
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if power_at(mid) >= target_power {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let n_simulated = hi;
        rows.push(PowerRow {
            p0,
            p1: plan.p1,
            n_closed_form: plan.n_per_arm,
            n_simulated,
            rel_gap: (n_simulated as f64 - plan.n_per_arm as f64) / plan.n_per_arm as f64,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Stress cost
// ---------------------------------------------------------------------------

/// Per-stage unit costs. These are configuration inputs — the simulator
/// attaches no currency or hardware meaning to them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub retrieval: f64,
    pub cheap: f64,
    pub small: f64,
    pub heavy: f64,
    pub proof: f64,
    pub signing: f64,
}

/// A traffic scenario: what share of requests go heavy, and whether the
/// retrieval cache is off (multiplying retrieval cost).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressScenario {
    pub heavy_share: f64,
    pub cache_off: bool,
    /// Retrieval cost multiplier when the cache is off.
    pub cache_miss_multiplier: f64,
}

fn scenario_costs(
    costs: &CostModel,
    scenario: &StressScenario,
    n_draws: usize,
    seed: u64,
) -> (Vec<f64>, BTreeMap<String, f64>) {
    let retrieval = if scenario.cache_off {
        costs.retrieval * scenario.cache_miss_multiplier
    } else {
        costs.retrieval
    };
    let base = retrieval + costs.cheap + costs.small + costs.proof + costs.signing;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut totals = Vec::with_capacity(n_draws);
    let mut heavy_hits = 0u64;
    for _ in 0..n_draws {
        let heavy = rng.gen::<f64>() < scenario.heavy_share;
        if heavy {
            heavy_hits += 1;
        }
        totals.push(base + if heavy { costs.heavy } else { 0.0 });
    }
    let heavy_mean = costs.heavy * heavy_hits as f64 / n_draws as f64;
    let means = BTreeMap::from([
        ("retrieval".to_string(), retrieval),
        ("cheap".to_string(), costs.cheap),
        ("small".to_string(), costs.small),
        ("heavy".to_string(), heavy_mean),
        ("proof".to_string(), costs.proof),
        ("signing".to_string(), costs.signing),
    ]);
    (totals, means)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p / 100.0 * sorted.len() as f64).ceil() as usize).max(1) - 1;
    sorted[idx.min(sorted.len() - 1)]
}

/// Compose per-request cost distributions under a baseline and a stress
/// mix and report the P50/P90 multipliers with per-stage contributions.
/// Both scenarios draw from the same seed stream, so identical scenarios
/// yield multipliers of exactly 1.
pub fn stress_cost(
    config: &SimConfig,
    costs: &CostModel,
    baseline: &StressScenario,
    stress: &StressScenario,
) -> Result<StressReport, SimError> {
    config.validate()?;
    for (name, scenario) in [("baseline", baseline), ("stress", stress)] {
        if !(0.0..=1.0).contains(&scenario.heavy_share) {
            return Err(SimError::InvalidConfig(format!(
                "{name} heavy_share must lie in [0,1]: {}",
                scenario.heavy_share
            )));
        }
    }
    let (mut base_costs, base_means) =
        scenario_costs(costs, baseline, config.n_draws, config.seed);
    let (mut stress_costs, stress_means) =
        scenario_costs(costs, stress, config.n_draws, config.seed);
    base_costs.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    stress_costs.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));

    let baseline_p50 = percentile(&base_costs, 50.0);
    let baseline_p90 = percentile(&base_costs, 90.0);
    let stress_p50 = percentile(&stress_costs, 50.0);
    let stress_p90 = percentile(&stress_costs, 90.0);

    let baseline_mean: f64 = base_means.values().sum();
    let component_contributions = stress_means
        .iter()
        .map(|(stage, &mean)| (stage.clone(), (mean - base_means[stage]) / baseline_mean))
        .collect();

    Ok(StressReport {
        baseline_p50,
        baseline_p90,
        stress_p50,
        stress_p90,
        p50_multiplier: stress_p50 / baseline_p50,
        p90_multiplier: stress_p90 / baseline_p90,
        component_contributions,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
