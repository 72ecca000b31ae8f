//! CVaR barrier-function safety filter with an adaptive risk level.
//!
//! For every obstacle `i` in range the filter enforces
//!
//! ```text
//! CVaR_β( h_{i,k+1}(u) ) ≥ (1 - γ) h_{i,k}
//! ```
//!
//! over the sampled obstacle predictions while staying as close as possible
//! to the nominal control. In the auxiliary-variable form the constraint
//! reads `η_ij ≥ 0`, `η_ij ≥ -h_ij(u) - ζ_i`, `-(ζ_i + Σ_j p_j η_ij / β) ≥ rhs_i`.
//! Eliminating `ζ, η` leaves `φ_i(u) = CVaR_β(h_i(u)) ≥ rhs_i`, and for an
//! affine model of `h` the map `u ↦ φ_i(u)` is concave piecewise linear, so
//! each linearized subproblem is a planar projection onto a polygon solved
//! exactly by cutting planes (see [`crate::qp`]).
//!
//! `h` is nonlinear in `u`, so the filter runs damped sequential
//! linearization and only reports a control that passes the exact
//! (hard-max) constraints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barriers::{self, BarrierConfig, BarrierKind, RelativeKinematics, DEFAULT_SOFTPLUS_TEMP};
use crate::dynamics::{propagate, ControlBox, ControlInput, Limits, ObstaclePrediction, ObstacleState, RobotState};
use crate::geometry::Vec2;
use crate::qp::{self, HalfPlane};
use crate::risk::{self, RiskLevel, BISECTION_TOL};
use crate::{Error, Result};

/// Exact constraints must hold to this residual for a control to be reported.
pub const VERIFY_TOL: f64 = 1e-6;

const CUT_ROUNDS: usize = 64;
const CUT_TOL: f64 = 1e-10;
const POLISH_ITERS: usize = 4;
const REFINE_ITERS: usize = 40;
/// Residual slack for a refined point to count as on the exact boundary.
const EXACT_TOL: f64 = 1e-10;
/// Softplus temperature giving the exact approach-factor slope away from the kink.
const SHARP_TEMP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains { kp: 0.5, kd: 3.0 }
    }
}

/// Candidate risk levels probed in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaGrid {
    /// `count` levels spaced linearly from `lowest` to the current upper bound.
    Rescaled { lowest: f64, count: usize },
    /// Fixed levels, filtered to those below the current upper bound.
    Fixed(Vec<f64>),
}

impl Default for BetaGrid {
    fn default() -> Self {
        BetaGrid::Rescaled {
            lowest: 0.02,
            count: 15,
        }
    }
}

impl BetaGrid {
    /// Candidates not exceeding `upper`, never empty.
    pub fn candidates(&self, upper: f64) -> Vec<f64> {
        match self {
            BetaGrid::Rescaled { lowest, count } => {
                let lowest = lowest.min(upper);
                if *count <= 1 || upper <= lowest {
                    return vec![lowest];
                }
                let step = (upper - lowest) / (*count - 1) as f64;
                (0..*count)
                    .map(|i| {
                        if i + 1 == *count {
                            upper
                        } else {
                            lowest + step * i as f64
                        }
                    })
                    .collect()
            }
            BetaGrid::Fixed(levels) => {
                let kept: Vec<f64> = levels.iter().copied().filter(|b| *b <= upper).collect();
                if kept.is_empty() {
                    levels.first().copied().into_iter().collect()
                } else {
                    kept
                }
            }
        }
    }
}

/// Which neighbors bound `β̄_u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaBarScope {
    /// Minimum over every sensed neighbor.
    #[default]
    AllNeighbors,
    /// Minimum over neighbors with a positive dynamic risk offset.
    Approaching,
}

/// How the filter picks its risk level at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RiskPolicy {
    /// Always the given level.
    Fixed(f64),
    /// Smallest feasible grid level up to `β_u`, or up to the dynamic-zone
    /// bound `β̄_u` when `dynamic_bound` is set.
    Adaptive { dynamic_bound: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub beta_u: f64,
    pub beta_max: f64,
    pub beta_bar_scope: BetaBarScope,
    pub grid: BetaGrid,
    pub risk: RiskPolicy,
    pub gamma: f64,
    pub barrier: BarrierKind,
    pub softplus_temp: f64,
    pub sqp_iters: usize,
    pub damping: f64,
    /// Also linearize from braking, the box corners and the box edge
    /// midpoints, keeping the cheapest verified result.
    pub restarts: bool,
    /// Resolution of the brute-force grid oracle.
    pub grid_resolution: usize,
    pub gains: Gains,
    pub parallel_probes: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            beta_u: 0.5,
            beta_max: 0.99,
            beta_bar_scope: BetaBarScope::default(),
            grid: BetaGrid::default(),
            risk: RiskPolicy::Adaptive { dynamic_bound: true },
            gamma: 0.2,
            barrier: BarrierKind::DynamicZone,
            softplus_temp: DEFAULT_SOFTPLUS_TEMP,
            sqp_iters: 5,
            damping: 0.5,
            restarts: true,
            grid_resolution: 41,
            gains: Gains::default(),
            parallel_probes: false,
        }
    }
}

fn in_open_unit(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !in_open_unit(self.beta_u) {
            return Err(Error::invariant("beta_u", format!("{} not in (0, 1)", self.beta_u)));
        }
        if !(self.beta_max >= self.beta_u && self.beta_max < 1.0) {
            return Err(Error::invariant(
                "beta_max",
                format!("{} not in [beta_u, 1)", self.beta_max),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invariant("gamma", format!("{} not in (0, 1]", self.gamma)));
        }
        match &self.grid {
            BetaGrid::Rescaled { lowest, count } => {
                if !in_open_unit(*lowest) || *count == 0 {
                    return Err(Error::invariant("grid", "lowest must lie in (0, 1) and count ≥ 1"));
                }
            }
            BetaGrid::Fixed(levels) => {
                if levels.is_empty()
                    || !levels.iter().all(|b| in_open_unit(*b))
                    || !levels.windows(2).all(|w| w[0] < w[1])
                {
                    return Err(Error::invariant("grid", "levels must be strictly increasing in (0, 1)"));
                }
            }
        }
        if let RiskPolicy::Fixed(b) = self.risk {
            if !in_open_unit(b) {
                return Err(Error::invariant("risk", format!("fixed level {b} not in (0, 1)")));
            }
        }
        if !(self.softplus_temp > 0.0) {
            return Err(Error::invariant("softplus_temp", "must be positive"));
        }
        if self.sqp_iters == 0 {
            return Err(Error::invariant("sqp_iters", "must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invariant("damping", "must lie in (0, 1]"));
        }
        if self.grid_resolution < 2 {
            return Err(Error::invariant("grid_resolution", "must be at least 2"));
        }
        Ok(())
    }
}

/// One sensed obstacle: its exact current state, sampled next states and
/// the safety radius used in its barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub current: ObstacleState,
    pub prediction: ObstaclePrediction,
    pub r_safe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    NominalPass,
    Filtered,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub u: ControlInput,
    pub beta_k: RiskLevel,
    pub feasible: bool,
    /// Exact current barrier value per neighbor (`-inf` where undefined).
    pub per_obstacle_h: Vec<f64>,
    pub beta_bar_u: RiskLevel,
    pub solver_status: SolverStatus,
}

/// Auxiliary variables of the lifted problem for a given control.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub beta: f64,
    pub h_now: Vec<f64>,
    pub h_next: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub zeta: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
}

impl ConstraintSystem {
    /// Largest violation over all lifted constraints (≤ 0 when satisfied).
    pub fn max_violation(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.zeta.len() {
            let mut tail = 0.0;
            for j in 0..self.eta[i].len() {
                worst = worst.max(-self.eta[i][j]);
                worst = worst.max(-self.h_next[i][j] - self.zeta[i] - self.eta[i][j]);
                tail += self.probs[i][j] * self.eta[i][j];
            }
            let lhs = -(self.zeta[i] + tail / self.beta);
            worst = worst.max(self.rhs[i] - lhs);
        }
        worst
    }
}

/// Go-to-goal PD law `kp (goal - p) - kd v`, clamped into the admissible box.
pub fn nominal_control(s: &RobotState, goal: &Vec2, lim: &Limits, gains: &Gains) -> ControlInput {
    let raw = (goal - s.p) * gains.kp - s.v * gains.kd;
    ControlInput {
        a: ControlBox::for_state(s, lim).clamp(raw),
    }
}

/// Braking control `-v / dt`, clamped into the admissible box.
pub fn braking_control(s: &RobotState, lim: &Limits) -> ControlInput {
    ControlInput {
        a: ControlBox::for_state(s, lim).clamp(-s.v / lim.dt),
    }
}

/// Affine model of one obstacle's next-step barrier samples,
/// `h_j(u) = base_j + grad_j · u`, constrained by `CVaR_β(h(u)) ≥ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBarrier {
    pub base: Vec<f64>,
    pub grads: Vec<Vec2>,
    pub probs: Vec<f64>,
    pub rhs: f64,
}

impl AffineBarrier {
    pub fn values(&self, u: &Vec2) -> Vec<f64> {
        self.base.iter().zip(&self.grads).map(|(b, g)| b + g.dot(u)).collect()
    }

    fn cut(&self, u: &Vec2, beta: f64) -> Result<Option<HalfPlane>, ()> {
        let q = risk::tail_weights(&self.values(u), &self.probs, beta);
        let mut normal = Vec2::zeros();
        let mut constant = 0.0;
        for ((qj, b), g) in q.iter().zip(&self.base).zip(&self.grads) {
            normal += g * *qj;
            constant += qj * b;
        }
        HalfPlane::new(normal, self.rhs - constant)
    }
}

/// Solves `min |u - target|²` over the box subject to every affine CVaR
/// constraint, by cutting planes on the tail weights. `None` when infeasible.
pub fn solve_affine_cvar(models: &[AffineBarrier], beta: RiskLevel, target: Vec2, bounds: &ControlBox) -> Option<Vec2> {
    solve_linearized(models, beta.value(), target, bounds)
}

fn solve_linearized(models: &[AffineBarrier], beta: f64, target: Vec2, bounds: &ControlBox) -> Option<Vec2> {
    let mut planes: Vec<HalfPlane> = qp::box_constraints(bounds.lo, bounds.hi).to_vec();
    let seed = bounds.clamp(target);
    for m in models {
        planes.extend(m.cut(&seed, beta).ok()?);
    }
    let mut u = qp::project(target, &planes)?;
    for _ in 0..CUT_ROUNDS {
        let mut added = false;
        for m in models {
            let (phi, _) = risk::cvar_slices(&m.values(&u), &m.probs, beta);
            if phi < m.rhs - CUT_TOL {
                if let Some(plane) = m.cut(&u, beta).ok()? {
                    planes.push(plane);
                    added = true;
                }
            }
        }
        if !added {
            break;
        }
        u = qp::project(target, &planes)?;
    }
    Some(u)
}

/// The safety filter for one robot, parameterized by method and limits.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyFilter {
    pub config: FilterConfig,
    pub limits: Limits,
}

impl SafetyFilter {
    pub fn new(config: FilterConfig, limits: Limits) -> Result<Self> {
        config.validate()?;
        limits.validate()?;
        Ok(SafetyFilter { config, limits })
    }

    fn barrier_config(&self, r_safe: f64) -> BarrierConfig {
        BarrierConfig {
            r_safe,
            softplus_temp: self.config.softplus_temp,
            kind: self.config.barrier,
        }
    }

    pub fn nominal_control(&self, s: &RobotState, goal: &Vec2) -> ControlInput {
        nominal_control(s, goal, &self.limits, &self.config.gains)
    }

    fn next_state(&self, s: &RobotState, u: &ControlInput) -> RobotState {
        let mut next = propagate(s, u, self.limits.dt);
        let v_max = self.limits.v_max;
        next.v = next.v.map(|c| c.clamp(-v_max, v_max));
        next
    }

    /// Exact barrier value between the robot and the neighbor's current state.
    pub fn current_barrier(&self, s: &RobotState, n: &Neighbor) -> Result<f64> {
        let rel = RelativeKinematics::new(s.p, n.current.p, s.v, n.current.v);
        barriers::evaluate(self.config.barrier, &rel, n.r_safe)
    }

    fn next_barrier_values(&self, next: &RobotState, n: &Neighbor) -> Option<Vec<f64>> {
        n.prediction
            .positions
            .iter()
            .zip(&n.prediction.velocities)
            .map(|(p, v)| {
                let rel = RelativeKinematics::new(next.p, *p, next.v, *v);
                barriers::evaluate(self.config.barrier, &rel, n.r_safe).ok()
            })
            .collect()
    }

    /// `CVaR_β(h_{k+1}) - (1-γ) h_k` for one neighbor under control `u`;
    /// `-inf` when a barrier is undefined.
    pub fn residual(&self, s: &RobotState, u: &ControlInput, n: &Neighbor, beta: RiskLevel) -> f64 {
        let Ok(h_now) = self.current_barrier(s, n) else {
            return f64::NEG_INFINITY;
        };
        let next = self.next_state(s, u);
        let Some(values) = self.next_barrier_values(&next, n) else {
            return f64::NEG_INFINITY;
        };
        risk::cvar_slices(&values, &n.prediction.probs, beta.value()).0 - (1.0 - self.config.gamma) * h_now
    }

    fn satisfies(&self, s: &RobotState, u: &ControlInput, neighbors: &[Neighbor], beta: RiskLevel, tol: f64) -> bool {
        neighbors.iter().all(|n| self.residual(s, u, n, beta) >= -tol)
    }

    /// Brute-force oracle: best grid point of the admissible box where every
    /// exact residual is nonnegative.
    pub fn brute_force_probe(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        beta: RiskLevel,
        u_nom: &ControlInput,
    ) -> Option<ControlInput> {
        let bounds = ControlBox::for_state(s, &self.limits);
        let n = self.config.grid_resolution.max(2);
        let axis = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let mut best: Option<(f64, ControlInput)> = None;
        for i in 0..n {
            for j in 0..n {
                let u = ControlInput {
                    a: Vec2::new(axis(bounds.lo.x, bounds.hi.x, i), axis(bounds.lo.y, bounds.hi.y, j)),
                };
                let cost = (u.a - u_nom.a).norm_squared();
                if best.is_some_and(|(c, _)| c <= cost) {
                    continue;
                }
                if self.satisfies(s, &u, neighbors, beta, 0.0) {
                    best = Some((cost, u));
                }
            }
        }
        best.map(|(_, u)| u)
    }

    fn linearize(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        h_now: &[f64],
        around: &Vec2,
        temp: f64,
    ) -> Vec<AffineBarrier> {
        let dt = self.limits.dt;
        let next = propagate(s, &ControlInput { a: *around }, dt);
        neighbors
            .iter()
            .zip(h_now)
            .map(|(n, h)| {
                let cfg = BarrierConfig {
                    softplus_temp: temp,
                    ..self.barrier_config(n.r_safe)
                };
                let mut base = Vec::with_capacity(n.prediction.len());
                let mut grads = Vec::with_capacity(n.prediction.len());
                for (p, v) in n.prediction.positions.iter().zip(&n.prediction.velocities) {
                    let rel = RelativeKinematics::new(next.p, *p, next.v, *v);
                    let g = barriers::smooth_gradient(&cfg, &rel);
                    // Exact value where defined, smooth slope.
                    let value = barriers::evaluate(cfg.kind, &rel, cfg.r_safe).unwrap_or(g.value);
                    // d p_{k+1}/du = dt²/2, d v_{k+1}/du = dt
                    let grad = g.d_p * (0.5 * dt * dt) + g.d_v * dt;
                    base.push(value - grad.dot(around));
                    grads.push(grad);
                }
                AffineBarrier {
                    base,
                    grads,
                    probs: n.prediction.probs.clone(),
                    rhs: (1.0 - self.config.gamma) * h,
                }
            })
            .collect()
    }

    fn sqp_from(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        h_now: &[f64],
        beta: RiskLevel,
        target: Vec2,
        start: Vec2,
        bounds: &ControlBox,
    ) -> Option<ControlInput> {
        let check = |a: &Vec2| self.satisfies(s, &ControlInput { a: *a }, neighbors, beta, VERIFY_TOL);
        let mut around = start;
        let mut verified: Option<Vec2> = None;
        let mut last = None;
        for _ in 0..self.config.sqp_iters {
            let models = self.linearize(s, neighbors, h_now, &around, self.config.softplus_temp);
            let Some(u) = solve_linearized(&models, beta.value(), target, bounds) else {
                break;
            };
            if check(&u) && verified.is_none_or(|b| (u - target).norm_squared() < (b - target).norm_squared()) {
                verified = Some(u);
            }
            last = Some(u);
            around += (u - around) * self.config.damping;
        }
        if verified.is_none() {
            // Undamped steps converge the last iterate onto the exact boundary.
            if let Some(mut u) = last {
                for _ in 0..POLISH_ITERS {
                    let models = self.linearize(s, neighbors, h_now, &u, self.config.softplus_temp);
                    let Some(next) = solve_linearized(&models, beta.value(), target, bounds) else {
                        break;
                    };
                    u = next;
                    if check(&u) {
                        verified = Some(u);
                        break;
                    }
                }
            }
        }
        verified
            .map(|a| self.refine(s, neighbors, h_now, beta, target, a, bounds))
            .map(|a| ControlInput { a })
    }

    /// Undamped iterations with the sharp approach slope, moving a verified
    /// point onto the exact constrained optimum.
    fn refine(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        h_now: &[f64],
        beta: RiskLevel,
        target: Vec2,
        start: Vec2,
        bounds: &ControlBox,
    ) -> Vec2 {
        if (start - target).norm_squared() == 0.0 {
            return start;
        }
        let mut u = start;
        for _ in 0..REFINE_ITERS {
            let models = self.linearize(s, neighbors, h_now, &u, SHARP_TEMP);
            let Some(next) = solve_linearized(&models, beta.value(), target, bounds) else {
                break;
            };
            let step = (next - u).norm();
            u = next;
            if step < 1e-12 {
                break;
            }
        }
        let a = ControlInput { a: u };
        let exact = self.satisfies(s, &a, neighbors, beta, EXACT_TOL);
        let cheaper = (u - target).norm_squared() <= (start - target).norm_squared();
        if exact || (cheaper && self.satisfies(s, &a, neighbors, beta, VERIFY_TOL)) {
            u
        } else {
            start
        }
    }

    /// Minimal modification of `u_nom` satisfying every CVaR constraint at
    /// level `beta`, or `None` when no verified solution is found.
    pub fn solve_constrained(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        beta: RiskLevel,
        u_nom: &ControlInput,
    ) -> Option<ControlInput> {
        let bounds = ControlBox::for_state(s, &self.limits);
        let target = u_nom.a;
        if neighbors.is_empty() {
            return Some(ControlInput {
                a: bounds.clamp(target),
            });
        }
        let h_now: Vec<f64> = neighbors
            .iter()
            .map(|n| self.current_barrier(s, n))
            .collect::<Result<_>>()
            .ok()?;

        let mut starts = vec![bounds.clamp(target)];
        if self.config.restarts {
            starts.push(braking_control(s, &self.limits).a);
            starts.extend([
                bounds.lo,
                bounds.hi,
                Vec2::new(bounds.lo.x, bounds.hi.y),
                Vec2::new(bounds.hi.x, bounds.lo.y),
            ]);
            let mid = (bounds.lo + bounds.hi) * 0.5;
            starts.extend([
                Vec2::new(bounds.lo.x, mid.y),
                Vec2::new(bounds.hi.x, mid.y),
                Vec2::new(mid.x, bounds.lo.y),
                Vec2::new(mid.x, bounds.hi.y),
            ]);
        }
        starts
            .into_iter()
            .filter_map(|start| self.sqp_from(s, neighbors, &h_now, beta, target, start, &bounds))
            .min_by(|a, b| (a.a - target).norm_squared().total_cmp(&(b.a - target).norm_squared()))
    }

    /// Lifted `(ζ, η)` certificate for control `u` at level `beta`.
    pub fn lift(
        &self,
        s: &RobotState,
        u: &ControlInput,
        neighbors: &[Neighbor],
        beta: RiskLevel,
    ) -> Option<ConstraintSystem> {
        let next = self.next_state(s, u);
        let mut sys = ConstraintSystem {
            beta: beta.value(),
            h_now: Vec::new(),
            h_next: Vec::new(),
            probs: Vec::new(),
            rhs: Vec::new(),
            zeta: Vec::new(),
            eta: Vec::new(),
        };
        for n in neighbors {
            let h_now = self.current_barrier(s, n).ok()?;
            let values = self.next_barrier_values(&next, n)?;
            let (_, zeta) = risk::cvar_slices(&values, &n.prediction.probs, beta.value());
            sys.eta.push(values.iter().map(|h| (-h - zeta).max(0.0)).collect());
            sys.zeta.push(zeta);
            sys.rhs.push((1.0 - self.config.gamma) * h_now);
            sys.h_now.push(h_now);
            sys.h_next.push(values);
            sys.probs.push(n.prediction.probs.clone());
        }
        Some(sys)
    }

    /// Dynamic-zone upper bound `β̄_u`: per neighbor, the level at which the
    /// distance-barrier CVaR gains the dynamic risk offset `δ`; the minimum
    /// over neighbors, clamped to `[β_u, β_max]`.
    pub fn compute_beta_bar(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        prev_delta: &[f64],
        u_nom: &ControlInput,
    ) -> RiskLevel {
        let beta_u = RiskLevel::new(self.config.beta_u).expect("validated");
        let next = self.next_state(s, u_nom);
        let mut bound = self.config.beta_max;
        let mut constrained = false;
        for (n, &delta_now) in neighbors.iter().zip(prev_delta) {
            let h_dist = n.prediction.distribution(|p, _| barriers::h_dist(&next.p, p, n.r_safe));
            let approach = n
                .prediction
                .distribution(|p, v| barriers::delta_factor(&RelativeKinematics::new(next.p, *p, next.v, *v)));
            let (Ok(h_dist), Ok(approach)) = (h_dist, approach) else {
                return beta_u;
            };
            let offset = risk::risk_offset(
                &approach,
                delta_now.clamp(0.0, 1.0),
                self.config.gamma,
                n.r_safe,
                beta_u,
            )
            .unwrap_or(0.0);
            if offset <= 0.0 && self.config.beta_bar_scope == BetaBarScope::Approaching {
                continue;
            }
            let level = risk::upper_bound_search(&h_dist, beta_u, offset, self.config.beta_max, BISECTION_TOL);
            bound = bound.min(level.value());
            constrained = true;
        }
        if !constrained {
            bound = self.config.beta_u;
        }
        RiskLevel::new(bound.clamp(self.config.beta_u, self.config.beta_max)).expect("in (0, 1)")
    }

    /// Upper bound of the admissible risk levels under the configured policy.
    pub fn risk_bound(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        prev_delta: &[f64],
        u_nom: &ControlInput,
    ) -> RiskLevel {
        let level = match self.config.risk {
            RiskPolicy::Fixed(b) => b,
            RiskPolicy::Adaptive { dynamic_bound: false } => self.config.beta_u,
            RiskPolicy::Adaptive { dynamic_bound: true } => {
                return self.compute_beta_bar(s, neighbors, prev_delta, u_nom);
            }
        };
        RiskLevel::new(level).expect("validated")
    }

    /// Candidate levels probed for the given bound.
    pub fn candidates(&self, bound: RiskLevel) -> Vec<RiskLevel> {
        let levels = match self.config.risk {
            RiskPolicy::Fixed(b) => vec![b],
            RiskPolicy::Adaptive { .. } => self.config.grid.candidates(bound.value()),
        };
        levels.into_iter().filter_map(|b| RiskLevel::new(b).ok()).collect()
    }

    /// Adaptive risk selection: the smallest candidate level for which the
    /// constrained problem is solvable, with braking as the infeasible fallback.
    pub fn select_beta(
        &self,
        s: &RobotState,
        neighbors: &[Neighbor],
        prev_delta: &[f64],
        u_nom: &ControlInput,
    ) -> FilterDecision {
        let beta_bar_u = self.risk_bound(s, neighbors, prev_delta, u_nom);
        let candidates = self.candidates(beta_bar_u);
        let per_obstacle_h: Vec<f64> = neighbors
            .iter()
            .map(|n| self.current_barrier(s, n).unwrap_or(f64::NEG_INFINITY))
            .collect();

        let decision = |u: ControlInput, beta_k: RiskLevel, status: SolverStatus| FilterDecision {
            u,
            beta_k,
            feasible: status != SolverStatus::Infeasible,
            per_obstacle_h: per_obstacle_h.clone(),
            beta_bar_u,
            solver_status: status,
        };

        let solved = if self.config.parallel_probes {
            let results: Vec<Option<ControlInput>> = candidates
                .par_iter()
                .map(|b| self.solve_constrained(s, neighbors, *b, u_nom))
                .collect();
            results
                .into_iter()
                .zip(&candidates)
                .find_map(|(u, b)| u.map(|u| (u, *b)))
        } else {
            candidates
                .iter()
                .find_map(|b| self.solve_constrained(s, neighbors, *b, u_nom).map(|u| (u, *b)))
        };

        match solved {
            Some((u, beta_k)) => {
                let status = if (u.a - u_nom.a).norm() <= VERIFY_TOL {
                    SolverStatus::NominalPass
                } else {
                    SolverStatus::Filtered
                };
                decision(u, beta_k, status)
            }
            None => decision(
                braking_control(s, &self.limits),
                candidates[candidates.len() - 1],
                SolverStatus::Infeasible,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::predict_obstacle;
    use crate::geometry::vec2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filter() -> SafetyFilter {
        SafetyFilter::new(FilterConfig::default(), Limits::default()).unwrap()
    }

    fn neighbor(p: Vec2, v: Vec2, sigma: f64, seed: u64) -> Neighbor {
        let current = ObstacleState { p, v, radius: 0.4 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Neighbor {
            current,
            prediction: predict_obstacle(&current, &Limits::default(), sigma, 20, &mut rng),
            r_safe: 0.8,
        }
    }

    fn beta(b: f64) -> RiskLevel {
        RiskLevel::new(b).unwrap()
    }

    #[test]
    fn nominal_examples() {
        let lim = Limits::default();
        let g = Gains { kp: 1.0, kd: 2.0 };
        let at_goal = RobotState::at_rest(vec2(2.0, 3.0));
        assert_eq!(nominal_control(&at_goal, &vec2(2.0, 3.0), &lim, &g).a, Vec2::zeros());
        let s = RobotState::at_rest(Vec2::zeros());
        assert_eq!(nominal_control(&s, &vec2(1.0, 0.0), &lim, &g).a, vec2(1.0, 0.0));
        assert_eq!(nominal_control(&s, &vec2(10.0, 0.0), &lim, &g).a, vec2(3.0, 0.0));
    }

    #[test]
    fn grid_candidates() {
        let g = BetaGrid::default();
        let c = g.candidates(0.5);
        assert_eq!(c.len(), 15);
        assert_eq!(c[0], 0.02);
        assert_eq!(c[14], 0.5);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        let fixed = BetaGrid::Fixed(vec![0.1, 0.3, 0.6]);
        assert_eq!(fixed.candidates(0.5), vec![0.1, 0.3]);
        assert_eq!(fixed.candidates(0.05), vec![0.1]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig {
            gamma: 1.5,
            ..FilterConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Invariant { ref field, .. }) if field == "gamma"));
        cfg.gamma = 0.2;
        cfg.grid = BetaGrid::Fixed(vec![0.3, 0.2]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn residual_far_obstacle_positive() {
        let f = filter();
        let s = RobotState::at_rest(Vec2::zeros());
        let n = neighbor(vec2(100.0, 0.0), vec2(-1.0, 0.0), 0.05, 1);
        for u in [ControlInput::zero(), ControlInput::new(3.0, -3.0)] {
            assert!(f.residual(&s, &u, &n, beta(0.1)) > 0.0);
        }
    }

    #[test]
    fn residual_coincident_obstacle() {
        // σ = 0 and coincident positions: h_{k+1} = h_k = -R² when nothing moves,
        // so the residual is γ h_k < 0.
        let f = filter();
        let s = RobotState::at_rest(vec2(1.0, 1.0));
        let n = neighbor(vec2(1.0, 1.0), Vec2::zeros(), 0.0, 1);
        let r = f.residual(&s, &ControlInput::zero(), &n, beta(0.3));
        assert!((r - 0.2 * -0.64).abs() < 1e-12, "{r}");
    }

    #[test]
    fn residual_degenerate_is_deterministic_cbf() {
        let f = filter();
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(0.5, 0.2),
        };
        let n = neighbor(vec2(2.0, 0.5), vec2(-0.6, 0.0), 0.0, 1);
        let u = ControlInput::new(0.4, -1.0);
        let next = f.next_state(&s, &u);
        let h1 = barriers::h_zone(
            &RelativeKinematics::new(next.p, n.current.p + n.current.v * 0.1, next.v, n.current.v),
            0.8,
            barriers::DeltaMode::Exact,
        );
        let h0 = f.current_barrier(&s, &n).unwrap();
        for b in [0.02, 0.5, 0.99] {
            assert!((f.residual(&s, &u, &n, beta(b)) - (h1 - 0.8 * h0)).abs() < 1e-12);
        }
    }

    #[test]
    fn no_obstacles_returns_nominal() {
        let f = filter();
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(0.3, 0.0),
        };
        let u_nom = ControlInput::new(1.2, -0.7);
        assert_eq!(f.solve_constrained(&s, &[], beta(0.1), &u_nom), Some(u_nom));
        let probe = f.brute_force_probe(&s, &[], beta(0.1), &u_nom).unwrap();
        let cell = 6.0 / 40.0;
        assert!((probe.a - u_nom.a).abs().max() <= cell / 2.0 + 1e-12);
        let d = f.select_beta(&s, &[], &[], &u_nom);
        assert_eq!(d.solver_status, SolverStatus::NominalPass);
        assert_eq!(d.u, u_nom);
        assert_eq!(d.beta_k.value(), 0.02);
        assert_eq!(d.beta_bar_u.value(), 0.5);
    }

    #[test]
    fn enclosed_robot_is_infeasible() {
        // A wall of obstacles sitting on the robot: nothing reachable is safe.
        let f = filter();
        let s = RobotState::at_rest(Vec2::zeros());
        let neighbors: Vec<Neighbor> = (0..8)
            .map(|i| {
                let ang = i as f64 * std::f64::consts::TAU / 8.0;
                neighbor(vec2(ang.cos(), ang.sin()) * 0.3, vec2(-ang.cos(), -ang.sin()), 0.05, i)
            })
            .collect();
        let u_nom = ControlInput::new(1.0, 0.0);
        assert!(f.brute_force_probe(&s, &neighbors, beta(0.02), &u_nom).is_none());
        assert!(f.solve_constrained(&s, &neighbors, beta(0.02), &u_nom).is_none());
        let d = f.select_beta(&s, &neighbors, &[0.0; 8], &u_nom);
        assert_eq!(d.solver_status, SolverStatus::Infeasible);
        assert!(!d.feasible);
        assert_eq!(d.u, braking_control(&s, &Limits::default()));
    }

    #[test]
    fn head_on_obstacle_is_avoided() {
        let f = filter();
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(1.0, 0.0),
        };
        let n = neighbor(vec2(2.3, 0.05), vec2(-0.5, 0.0), 0.02, 3);
        let u_nom = ControlInput::new(3.0, 0.0);
        let d = f.select_beta(&s, std::slice::from_ref(&n), &[1.0], &u_nom);
        assert!(d.feasible);
        assert!(f
            .brute_force_probe(&s, std::slice::from_ref(&n), d.beta_k, &u_nom)
            .is_some());
        assert_eq!(d.solver_status, SolverStatus::Filtered);
        assert!(f.residual(&s, &d.u, &n, d.beta_k) >= -VERIFY_TOL);
        assert!(d.beta_k <= d.beta_bar_u);
        let lifted = f.lift(&s, &d.u, &[n], d.beta_k).unwrap();
        assert!(lifted.max_violation() <= VERIFY_TOL);
        assert!(lifted.eta.iter().flatten().all(|e| *e >= 0.0));
    }

    #[test]
    fn beta_bar_examples() {
        let f = filter();
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(-1.0, 0.0),
        };
        // Receding obstacle: Δ samples all zero and Δ_k = 0.
        let away = neighbor(vec2(2.0, 0.0), vec2(1.0, 0.0), 0.05, 1);
        let u = ControlInput::zero();
        assert_eq!(f.compute_beta_bar(&s, &[away], &[0.0], &u).value(), 0.5);

        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(1.0, 0.0),
        };
        let toward = neighbor(vec2(2.0, 0.0), vec2(-1.0, 0.0), 0.05, 1);
        let bar = f
            .compute_beta_bar(&s, std::slice::from_ref(&toward), &[0.0], &u)
            .value();
        assert!(bar > 0.5, "{bar}");

        // Huge offset relative to the spread of h^D: saturates.
        let mut big = toward.clone();
        big.r_safe = 1.9;
        assert_eq!(f.compute_beta_bar(&s, &[big], &[0.0], &u).value(), 0.99);
    }

    #[test]
    fn parallel_and_sequential_probes_agree() {
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(1.2, 0.3),
        };
        let neighbors = vec![
            neighbor(vec2(1.6, 0.2), vec2(-1.0, 0.0), 0.05, 5),
            neighbor(vec2(1.0, 1.2), vec2(0.0, -0.9), 0.05, 6),
        ];
        let u_nom = ControlInput::new(3.0, 0.0);
        let seq = filter();
        let mut par = filter();
        par.config.parallel_probes = true;
        let a = seq.select_beta(&s, &neighbors, &[0.5, 0.5], &u_nom);
        let b = par.select_beta(&s, &neighbors, &[0.5, 0.5], &u_nom);
        assert_eq!(a, b);
    }
}
