//! Value-at-Risk and Conditional Value-at-Risk on finite weighted distributions.
//!
//! Values are "rewards" (barrier values): the risky tail is the *lower* tail.
//! `CVaR_β(h)` is the probability-weighted mean of the worst `β` mass of `h`,
//! computed through the Rockafellar-Uryasev form
//!
//! ```text
//! CVaR_β(h) = -inf_ζ E[ ζ + (-h - ζ)_+ / β ]
//! ```
//!
//! whose infimum is attained at `ζ = -v` for some atom `v` of a finite
//! distribution, so a scan over the atoms is exact.

use crate::{Error, Result};

/// Tolerance on the total probability mass of a distribution.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Gap tolerance used by [`upper_bound_search`] by default.
pub const BISECTION_TOL: f64 = 1e-4;

const BISECTION_MAX_ITERS: usize = 64;

/// Risk level `β ∈ (0, 1]`. `β = 1` is the risk-neutral expectation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RiskLevel(f64);

impl RiskLevel {
    pub const NEUTRAL: RiskLevel = RiskLevel(1.0);

    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta > 0.0 && beta <= 1.0 {
            Ok(RiskLevel(beta))
        } else {
            Err(Error::InvalidRiskLevel(beta))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl std::fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Finite random variable: `values[j]` occurs with probability `probs[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDistribution {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl WeightedDistribution {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        if values.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} values but {} probabilities",
                values.len(),
                probs.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!("non-finite value {v}")));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "probability {p} is not strictly positive"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(WeightedDistribution { values, probs })
    }

    /// Equal weights `1/n` on every value.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        let probs = vec![1.0 / n.max(1) as f64; n];
        Self::new(values, probs)
    }

    /// Point mass at `value`.
    pub fn degenerate(value: f64) -> Result<Self> {
        Self::new(vec![value], vec![1.0])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Same probabilities, values mapped through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect(), self.probs.clone())
    }

    /// Distribution of `X + c`.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        self.map(|v| v + c)
    }
}

/// Sorts atoms by value and merges equal values.
fn merged_atoms(values: &[f64], probs: &[f64]) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = values.iter().copied().zip(probs.iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (v, p) in atoms {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += p,
            _ => merged.push((v, p)),
        }
    }
    merged
}

/// `VaR_β`: the largest value `ζ` with `P(h ≥ ζ) ≥ 1 - β`.
pub fn empirical_var(dist: &WeightedDistribution, beta: RiskLevel) -> f64 {
    var_slices(&dist.values, &dist.probs, beta.0)
}

pub(crate) fn var_slices(values: &[f64], probs: &[f64], beta: f64) -> f64 {
    let atoms = merged_atoms(values, probs);
    let need = 1.0 - beta - 1e-12;
    let mut upper_mass = 0.0;
    for &(v, p) in atoms.iter().rev() {
        upper_mass += p;
        if upper_mass >= need {
            return v;
        }
    }
    atoms[0].0
}

/// `CVaR_β`: mean of the worst `β` tail, `β = 1` giving the mean.
pub fn empirical_cvar(dist: &WeightedDistribution, beta: RiskLevel) -> f64 {
    cvar_certificate(dist, beta).0
}

/// CVaR together with a minimizer `ζ*` of the Rockafellar-Uryasev objective.
///
/// Among tied minimizers the largest `ζ` (the smallest tail atom) is
/// returned. For `β = 1` the minimizer is `-max(values)`.
pub fn cvar_certificate(dist: &WeightedDistribution, beta: RiskLevel) -> (f64, f64) {
    cvar_slices(&dist.values, &dist.probs, beta.0)
}

pub(crate) fn cvar_slices(values: &[f64], probs: &[f64], beta: f64) -> (f64, f64) {
    let atoms = merged_atoms(values, probs);
    if beta >= 1.0 {
        let mean = values.iter().zip(probs).map(|(v, p)| v * p).sum();
        let top = atoms.last().map_or(0.0, |a| a.0);
        return (mean, -top);
    }
    // Objective at ζ = -v_m:  -v_m + (v_m * P_{<m} - S_{<m}) / β
    let mut below_mass = 0.0;
    let mut below_moment = 0.0;
    let mut best = f64::INFINITY;
    let mut zeta = 0.0;
    for &(v, p) in &atoms {
        let objective = -v + (v * below_mass - below_moment) / beta;
        if objective < best {
            best = objective;
            zeta = -v;
        }
        below_mass += p;
        below_moment += p * v;
    }
    (-best, zeta)
}

/// Weights `q_j` of the worst-case tail measure: `CVaR_β = Σ q_j h_j` with
/// `0 ≤ q_j ≤ p_j / β` and `Σ q_j = 1`. Aligned with the input order.
pub(crate) fn tail_weights(values: &[f64], probs: &[f64], beta: f64) -> Vec<f64> {
    if beta >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut q = vec![0.0; values.len()];
    let mut remaining = beta;
    for j in order {
        if remaining <= 0.0 {
            break;
        }
        let take = probs[j].min(remaining);
        q[j] = take / beta;
        remaining -= take;
    }
    q
}

/// Dynamic risk offset `δ = (CVaR_β(Δ_next) - (1-γ) Δ_now) r_safe²`.
pub fn risk_offset(
    delta_next: &WeightedDistribution,
    delta_now: f64,
    gamma: f64,
    r_safe: f64,
    beta: RiskLevel,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta_now) {
        return Err(Error::invariant("delta_now", format!("{delta_now} not in [0, 1]")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invariant("gamma", format!("{gamma} not in (0, 1]")));
    }
    if !(r_safe > 0.0 && r_safe.is_finite()) {
        return Err(Error::invariant("r_safe", format!("{r_safe} must be positive")));
    }
    let cvar = empirical_cvar(delta_next, beta);
    Ok((cvar - (1.0 - gamma) * delta_now) * r_safe * r_safe)
}

/// Finds `β̄ ∈ [β_u, β_max]` with `CVaR_β̄(h) = CVaR_{β_u}(h) + δ` by
/// bisection on the CVaR gap. Saturates at `β_max` when the target is out of
/// reach and returns `β_u` for `δ ≤ 0`.
pub fn upper_bound_search(
    h_dist: &WeightedDistribution,
    beta_u: RiskLevel,
    delta: f64,
    beta_max: f64,
    tol: f64,
) -> RiskLevel {
    let beta_max = beta_max.clamp(beta_u.0, 1.0);
    if delta <= 0.0 || beta_max <= beta_u.0 {
        return beta_u;
    }
    let target = empirical_cvar(h_dist, beta_u) + delta;
    let gap = |b: f64| cvar_slices(&h_dist.values, &h_dist.probs, b).0 - target;

    if gap(beta_max) < -tol {
        return RiskLevel(beta_max);
    }
    let (mut lo, mut hi) = (beta_u.0, beta_max);
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if g.abs() <= tol {
            return RiskLevel(mid);
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    RiskLevel(hi)
}
