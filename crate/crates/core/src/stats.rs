//! Multiplicity control, dependence-aware effective test counts, power and
//! conditional-power planning, and threshold jitter.
//!
//! Contradiction checks run under family-wise error control (Holm step-down);
//! support checks run under false-discovery-rate control (Benjamini–
//! Yekutieli, valid under arbitrary dependence). Storey's π₀/q-value
//! estimator is available as an exploratory signal only — its results carry a
//! flag that gates structurally ignore.

use crate::hash::hash_to_unit;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF as _, Normal};
use std::collections::BTreeSet;

/// Jitter half-width applied to calibration thresholds (±0.02).
pub const TAU_JITTER_HALFWIDTH: f64 = 0.02;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("p-value family is empty")]
    EmptyFamily,
    #[error("p-value {p} for test {test_id:?} outside [0,1]")]
    InvalidPValue { test_id: String, p: f64 },
    #[error("lambda must lie strictly inside (0,1), got {0}")]
    InvalidLambda(f64),
    #[error("invalid rates: {0}")]
    InvalidRates(String),
    #[error("invalid enrollment: n_enrolled={n_enrolled} n_target={n_target}")]
    InvalidEnrollment { n_enrolled: u64, n_target: u64 },
    #[error("tau {tau} ± {half} leaves (0,1)")]
    OutOfRange { tau: f64, half: f64 },
    #[error("outcome matrix needs ≥ 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("no usable columns remain after dropping degenerate ones")]
    DegenerateInput,
}

// ---------------------------------------------------------------------------
// P-value families and multiplicity results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Supports,
    Contradictions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub test_id: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueFamily {
    pub family: FamilyKind,
    pub values: Vec<PValue>,
}

impl PValueFamily {
    pub fn new(family: FamilyKind, values: Vec<(String, f64)>) -> Self {
        PValueFamily {
            family,
            values: values
                .into_iter()
                .map(|(test_id, p)| PValue { test_id, p })
                .collect(),
        }
    }

    fn validate(&self) -> Result<(), StatsError> {
        for v in &self.values {
            if !(0.0..=1.0).contains(&v.p) || v.p.is_nan() {
                return Err(StatsError::InvalidPValue {
                    test_id: v.test_id.clone(),
                    p: v.p,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultMethod {
    Holm,
    By,
    Storey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedP {
    pub test_id: String,
    pub p: f64,
    /// Holm/BY adjusted p-value, or Storey q-value.
    pub adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityResult {
    pub method: MultMethod,
    /// α for Holm, q for BY, λ for Storey.
    pub level: f64,
    /// Per-test adjusted values, in input order.
    pub adjusted: Vec<AdjustedP>,
    pub rejected: BTreeSet<String>,
    /// Storey results are exploratory and never feed a gate.
    pub exploratory: bool,
    /// Storey's null-proportion estimate (absent for Holm/BY).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi0: Option<f64>,
}

impl MultiplicityResult {
    fn empty(method: MultMethod, level: f64, exploratory: bool) -> Self {
        MultiplicityResult {
            method,
            level,
            adjusted: Vec::new(),
            rejected: BTreeSet::new(),
            exploratory,
            pi0: None,
        }
    }
}

/// Ascending sort of (index, p), tie-broken by test id for determinism.
fn sorted_order(family: &PValueFamily) -> Vec<usize> {
    let mut order: Vec<usize> = (0..family.values.len()).collect();
    order.sort_by(|&a, &b| {
        family.values[a]
            .p
            .partial_cmp(&family.values[b].p)
            .expect("p-values validated finite")
            .then_with(|| family.values[a].test_id.cmp(&family.values[b].test_id))
    });
    order
}

/// Holm step-down FWER control at level `alpha`: reject p_(i) while
/// p_(i) ≤ α/(m−i+1), stopping at the first failure. Adjusted p-values are
/// the running maxima of min(1, (m−j+1)·p_(j)).
pub fn holm_fwer(family: &PValueFamily, alpha: f64) -> Result<MultiplicityResult, StatsError> {
    family.validate()?;
    let m = family.values.len();
    if m == 0 {
        return Ok(MultiplicityResult::empty(MultMethod::Holm, alpha, false));
    }
    let order = sorted_order(family);
    let mut adjusted_by_index = vec![0.0f64; m];
    let mut rejected = BTreeSet::new();
    let mut running_max = 0.0f64;
    let mut still_rejecting = true;
    for (rank, &idx) in order.iter().enumerate() {
        let p = family.values[idx].p;
        let factor = (m - rank) as f64;
        running_max = running_max.max((factor * p).min(1.0));
        adjusted_by_index[idx] = running_max;
        if still_rejecting && p <= alpha / factor {
            rejected.insert(family.values[idx].test_id.clone());
        } else {
            still_rejecting = false;
        }
    }
    Ok(MultiplicityResult {
        method: MultMethod::Holm,
        level: alpha,
        adjusted: family
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| AdjustedP {
                test_id: v.test_id.clone(),
                p: v.p,
                adjusted: adjusted_by_index[i],
            })
            .collect(),
        rejected,
        exploratory: false,
        pi0: None,
    })
}

/// Benjamini–Yekutieli step-up FDR control at level `q`, valid under
/// arbitrary dependence: with c(m) = Σ_{i≤m} 1/i, find the largest k with
/// p_(k) ≤ k·q/(m·c(m)) and reject tests 1..k.
pub fn by_fdr(family: &PValueFamily, q: f64) -> Result<MultiplicityResult, StatsError> {
    family.validate()?;
    let m = family.values.len();
    if m == 0 {
        return Ok(MultiplicityResult::empty(MultMethod::By, q, false));
    }
    let order = sorted_order(family);
    let c_m: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    let k = (1..=m)
        .filter(|&i| family.values[order[i - 1]].p <= i as f64 * q / (m as f64 * c_m))
        .next_back()
        .unwrap_or(0);
    let mut rejected = BTreeSet::new();
    for &idx in &order[..k] {
        rejected.insert(family.values[idx].test_id.clone());
    }
    // Step-up adjusted values: running minima of min(1, m·c(m)·p_(j)/j)
    // from the largest rank down.
    let mut adjusted_by_index = vec![0.0f64; m];
    let mut running_min = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let p = family.values[idx].p;
        running_min = running_min.min((m as f64 * c_m * p / (rank + 1) as f64).min(1.0));
        adjusted_by_index[idx] = running_min;
    }
    Ok(MultiplicityResult {
        method: MultMethod::By,
        level: q,
        adjusted: family
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| AdjustedP {
                test_id: v.test_id.clone(),
                p: v.p,
                adjusted: adjusted_by_index[i],
            })
            .collect(),
        rejected,
        exploratory: false,
        pi0: None,
    })
}

/// Storey π₀ estimate and q-values at tuning parameter `lambda`.
/// Exploratory only: the result is flagged and carries no rejections, so no
/// gate can act on it.
pub fn storey_q(family: &PValueFamily, lambda: f64) -> Result<MultiplicityResult, StatsError> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(StatsError::InvalidLambda(lambda));
    }
    family.validate()?;
    let m = family.values.len();
    if m == 0 {
        return Err(StatsError::EmptyFamily);
    }
    let over = family.values.iter().filter(|v| v.p > lambda).count();
    let pi0 = (over as f64 / ((1.0 - lambda) * m as f64)).min(1.0);
    let order = sorted_order(family);
    let mut adjusted_by_index = vec![0.0f64; m];
    let mut running_min = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let p = family.values[idx].p;
        running_min = running_min.min((pi0 * m as f64 * p / (rank + 1) as f64).min(1.0));
        adjusted_by_index[idx] = running_min;
    }
    Ok(MultiplicityResult {
        method: MultMethod::Storey,
        level: lambda,
        adjusted: family
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| AdjustedP {
                test_id: v.test_id.clone(),
                p: v.p,
                adjusted: adjusted_by_index[i],
            })
            .collect(),
        rejected: BTreeSet::new(),
        exploratory: true,
        pi0: Some(pi0),
    })
}

// ---------------------------------------------------------------------------
// Effective number of tests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    /// Usable test count (after dropping degenerate columns).
    pub m: usize,
    pub rho_bar: f64,
    pub m_eff: f64,
    /// 95% percentile bootstrap interval (degenerate when no draws given).
    pub ci: (f64, f64),
    pub n_boot: usize,
    /// Indices of zero-variance columns dropped with a warning.
    pub dropped_columns: Vec<usize>,
}

/// Input to [`m_eff_estimate`]: either raw outcomes (rows = draws, columns =
/// tests) or a precomputed correlation matrix.
#[derive(Debug, Clone)]
pub enum MEffInput {
    Outcomes(Vec<Vec<f64>>),
    Correlation(Vec<Vec<f64>>),
}

fn mean_offdiag_clamped(corr: &[Vec<f64>]) -> f64 {
    let m = corr.len();
    if m < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            sum += corr[i][j];
            count += 1;
        }
    }
    (sum / count as f64).clamp(0.0, 1.0 - f64::EPSILON)
}

fn kish_m_eff(m: usize, rho_bar: f64) -> f64 {
    m as f64 / (1.0 + (m as f64 - 1.0) * rho_bar)
}

/// Mean pairwise Pearson correlation of `cols` (each a column of equal
/// length), clamped to [0,1).
fn rho_bar_of_columns(cols: &[Vec<f64>]) -> f64 {
    let m = cols.len();
    if m < 2 {
        return 0.0;
    }
    let n = cols[0].len() as f64;
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let sds: Vec<f64> = cols
        .iter()
        .zip(&means)
        .map(|(c, &mu)| (c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            if sds[i] == 0.0 || sds[j] == 0.0 {
                continue;
            }
            let cov = cols[i]
                .iter()
                .zip(&cols[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum::<f64>()
                / n;
            sum += cov / (sds[i] * sds[j]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).clamp(0.0, 1.0 - f64::EPSILON)
    }
}

/// Kish-style effective test count m_eff = m / (1 + (m−1)·ρ̄) with a
/// percentile bootstrap CI over draws. Zero-variance columns are dropped
/// (recorded in the report) rather than failing the whole estimate.
pub fn m_eff_estimate(
    input: &MEffInput,
    n_boot: usize,
    seed: u64,
) -> Result<DependenceReport, StatsError> {
    match input {
        MEffInput::Correlation(corr) => {
            let m = corr.len();
            if m == 0 {
                return Err(StatsError::DegenerateInput);
            }
            let rho_bar = mean_offdiag_clamped(corr);
            let m_eff = kish_m_eff(m, rho_bar);
            Ok(DependenceReport {
                m,
                rho_bar,
                m_eff,
                ci: (m_eff, m_eff),
                n_boot: 0,
                dropped_columns: Vec::new(),
            })
        }
        MEffInput::Outcomes(rows) => {
            let draws = rows.len();
            if draws < 2 {
                return Err(StatsError::TooFewDraws(draws));
            }
            let m_all = rows[0].len();
            // Transpose to columns, dropping degenerate (constant) ones.
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m_all);
            let mut dropped = Vec::new();
            for j in 0..m_all {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let first = col[0];
                if col.iter().all(|&x| x == first) {
                    dropped.push(j);
                } else {
                    cols.push(col);
                }
            }
            let m = cols.len();
            if m == 0 {
                return Err(StatsError::DegenerateInput);
            }
            let rho_bar = rho_bar_of_columns(&cols);
            let m_eff = kish_m_eff(m, rho_bar);
            // Bootstrap over DRAWS: rows are resampled jointly (one index
            // vector applied to every column) so the cross-column dependence
            // being estimated survives the resample.
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut boot = Vec::with_capacity(n_boot);
            for _ in 0..n_boot {
                let picks: Vec<usize> = (0..draws).map(|_| rng.gen_range(0..draws)).collect();
                let resampled: Vec<Vec<f64>> = cols
                    .iter()
                    .map(|col| picks.iter().map(|&r| col[r]).collect())
                    .collect();
                boot.push(kish_m_eff(m, rho_bar_of_columns(&resampled)));
            }
            let ci = if boot.is_empty() {
                (m_eff, m_eff)
            } else {
                boot.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let lo = boot[((boot.len() as f64 - 1.0) * 0.025).round() as usize];
                let hi = boot[((boot.len() as f64 - 1.0) * 0.975).round() as usize];
                // The point estimate is kept inside the reported interval so
                // downstream band checks are well-formed even at small n_boot.
                (lo.min(m_eff), hi.max(m_eff))
            };
            Ok(DependenceReport {
                m,
                rho_bar,
                m_eff,
                ci,
                n_boot,
                dropped_columns: dropped,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Power planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPlan {
    pub p0: f64,
    pub rel_drop: f64,
    pub p1: f64,
    pub alpha: f64,
    pub power: f64,
    pub n_per_arm: u64,
    pub n_with_margin: u64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Φ⁻¹(p), polished to full double precision: the library quantile (rational
/// approximation, ~1e-9) is refined with two Newton steps against the
/// erf-based CDF.
pub fn z_quantile(p: f64) -> f64 {
    let n = std_normal();
    let mut x = n.inverse_cdf(p);
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf == 0.0 {
            break;
        }
        x -= (n.cdf(x) - p) / pdf;
    }
    x
}

/// Φ(x).
pub fn phi(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Two-proportion sample size per arm: two-sided pooled Wald z-test with
/// Fleiss continuity correction, ceil rounding, planning margin (default
/// +10%) applied to the rounded n.
pub fn sample_size_two_proportions(
    p0: f64,
    rel_drop: f64,
    alpha: f64,
    power: f64,
    margin: f64,
) -> Result<PowerPlan, StatsError> {
    if !(0.0 < p0 && p0 < 1.0) || !(0.0 < rel_drop && rel_drop < 1.0) {
        return Err(StatsError::InvalidRates(format!(
            "p0={p0}, rel_drop={rel_drop}"
        )));
    }
    if !(0.5 < power && power < 1.0) || !(0.0 < alpha && alpha < 1.0) {
        return Err(StatsError::InvalidRates(format!(
            "alpha={alpha}, power={power}"
        )));
    }
    if margin < 0.0 {
        return Err(StatsError::InvalidRates(format!("margin={margin}")));
    }
    let p1 = p0 * (1.0 - rel_drop);
    let delta = p0 - p1;
    let z_a = z_quantile(1.0 - alpha / 2.0);
    let z_b = z_quantile(power);
    let p_bar = (p0 + p1) / 2.0;
    let n_wald = ((z_a * (2.0 * p_bar * (1.0 - p_bar)).sqrt()
        + z_b * (p0 * (1.0 - p0) + p1 * (1.0 - p1)).sqrt())
        / delta)
        .powi(2);
    // Fleiss continuity correction.
    let n_cc = n_wald / 4.0 * (1.0 + (1.0 + 4.0 / (n_wald * delta)).sqrt()).powi(2);
    let n_per_arm = n_cc.ceil() as u64;
    let n_with_margin = ((1.0 + margin) * n_per_arm as f64).ceil() as u64;
    Ok(PowerPlan {
        p0,
        rel_drop,
        p1,
        alpha,
        power,
        n_per_arm,
        n_with_margin,
    })
}

// ---------------------------------------------------------------------------
// Conditional power
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPowerEstimate {
    pub n_enrolled: u64,
    pub n_target: u64,
    pub effect_hat: f64,
    pub cp: f64,
    /// True when cp < 0.70 (the escalation trigger).
    pub low: bool,
}

/// Conditional power under the current-trend assumption at information
/// fraction t = n_enrolled/n_target. The observed standardized effect is
/// scaled from the design: δ̂ = (effect_hat / target_rel_drop)·(z_{1−α/2} +
/// z_{planned_power}). For t < 1, cp = Φ((δ̂ − z_{1−α/2})/√(1−t)); at t = 1
/// the remaining information is zero and cp = Φ(δ̂ − z_{1−α/2}), i.e. the
/// final-analysis rejection indicator smoothed at the observed estimate —
/// observing exactly the design effect at full enrollment reproduces the
/// planned power.
pub fn conditional_power(
    n_enrolled: u64,
    n_target: u64,
    effect_hat: f64,
    alpha: f64,
    target_rel_drop: f64,
    planned_power: f64,
) -> Result<ConditionalPowerEstimate, StatsError> {
    if n_target == 0 || n_enrolled > n_target {
        return Err(StatsError::InvalidEnrollment {
            n_enrolled,
            n_target,
        });
    }
    if !(0.0 < alpha && alpha < 1.0)
        || !(0.0 < target_rel_drop && target_rel_drop < 1.0)
        || !(0.5 < planned_power && planned_power < 1.0)
    {
        return Err(StatsError::InvalidRates(format!(
            "alpha={alpha}, target_rel_drop={target_rel_drop}, planned_power={planned_power}"
        )));
    }
    let t = n_enrolled as f64 / n_target as f64;
    let z_a = z_quantile(1.0 - alpha / 2.0);
    let z_b = z_quantile(planned_power);
    let delta_hat = effect_hat / target_rel_drop * (z_a + z_b);
    let cp = if t < 1.0 {
        phi((delta_hat - z_a) / (1.0 - t).sqrt())
    } else {
        phi(delta_hat - z_a)
    };
    Ok(ConditionalPowerEstimate {
        n_enrolled,
        n_target,
        effect_hat,
        cp,
        low: cp < 0.70,
    })
}

// ---------------------------------------------------------------------------
// Threshold jitter
// ---------------------------------------------------------------------------

/// Deterministic per-session jitter: uniform in [τ−0.02, τ+0.02], derived
/// from the session seed. Makes the effective calibration threshold
/// unpredictable across sessions while staying reproducible within one.
pub fn jitter_tau(tau: f64, session_seed: &str) -> Result<f64, StatsError> {
    let half = TAU_JITTER_HALFWIDTH;
    if tau - half <= 0.0 || tau + half >= 1.0 {
        return Err(StatsError::OutOfRange { tau, half });
    }
    let u = hash_to_unit("tau-jitter:v1", &[session_seed.as_bytes()]);
    Ok(tau + (2.0 * u - 1.0) * half)
}
