//! Randomized cross-checks of the safety filter against the brute-force
//! grid oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::{delta_factor, RelativeKinematics};
use crate::crowd::{RADIUS_CHOICES, SPEED_CHOICES};
use crate::dynamics::{predict_obstacle, ControlBox, ControlInput, Limits, ObstacleState, RobotState};
use crate::filter::{FilterConfig, Neighbor, SafetyFilter};
use crate::geometry::Vec2;
use crate::risk::RiskLevel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSpec {
    /// Single-obstacle scenes for the solver/oracle agreement check.
    pub scenes: usize,
    /// Multi-obstacle scenes for the β-selection minimality check.
    pub minimality_scenes: usize,
    pub max_obstacles: usize,
    pub base_seed: u64,
    /// Oracle grid points per axis.
    pub resolution: usize,
    pub sigma: f64,
    pub samples: usize,
    pub robot_radius: f64,
    pub safety_margin: f64,
    /// Required fraction of matching feasibility verdicts.
    pub min_agreement: f64,
    pub limits: Limits,
    pub filter: FilterConfig,
}

impl Default for AuditSpec {
    fn default() -> Self {
        AuditSpec {
            scenes: 200,
            minimality_scenes: 100,
            max_obstacles: 3,
            base_seed: 0,
            resolution: 81,
            sigma: 0.05,
            samples: 20,
            robot_radius: 0.3,
            safety_margin: 0.1,
            min_agreement: 0.95,
            limits: Limits::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl AuditSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::invariant("resolution", "must be at least 2"));
        }
        if self.max_obstacles == 0 {
            return Err(Error::invariant("max_obstacles", "must be at least 1"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invariant("sigma", "must be nonnegative"));
        }
        if self.samples == 0 {
            return Err(Error::invariant("samples", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.min_agreement) {
            return Err(Error::invariant("min_agreement", "must lie in [0, 1]"));
        }
        self.limits.validate()?;
        self.filter.validate()
    }

    /// Filter whose oracle runs at the audit resolution.
    pub fn safety_filter(&self) -> Result<SafetyFilter> {
        let config = FilterConfig {
            grid_resolution: self.resolution,
            ..self.filter.clone()
        };
        SafetyFilter::new(config, self.limits)
    }
}

/// A random local planning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub robot: RobotState,
    pub neighbors: Vec<Neighbor>,
    pub prev_delta: Vec<f64>,
    pub u_nom: ControlInput,
    pub beta: RiskLevel,
}

/// Draws a scene with `n_obstacles` obstacles between 0.8 m and 4 m away.
pub fn random_scene<R: Rng + ?Sized>(spec: &AuditSpec, n_obstacles: usize, rng: &mut R) -> Scene {
    let lim = spec.limits;
    let robot = RobotState {
        p: Vec2::zeros(),
        v: Vec2::new(
            rng.random_range(-lim.v_max..=lim.v_max),
            rng.random_range(-lim.v_max..=lim.v_max),
        ),
    };
    let mut neighbors = Vec::with_capacity(n_obstacles);
    let mut prev_delta = Vec::with_capacity(n_obstacles);
    for _ in 0..n_obstacles {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.8..4.0);
        let top = SPEED_CHOICES[SPEED_CHOICES.len() - 1];
        let current = ObstacleState {
            p: Vec2::new(angle.cos(), angle.sin()) * dist,
            v: Vec2::new(rng.random_range(-top..=top), rng.random_range(-top..=top)),
            radius: RADIUS_CHOICES[rng.random_range(0..RADIUS_CHOICES.len())],
        };
        prev_delta.push(delta_factor(&RelativeKinematics::new(
            robot.p, current.p, robot.v, current.v,
        )));
        neighbors.push(Neighbor {
            current,
            prediction: predict_obstacle(&current, &lim, spec.sigma, spec.samples, rng),
            r_safe: spec.robot_radius + current.radius + spec.safety_margin,
        });
    }
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let goal = Vec2::new(heading.cos(), heading.sin()) * 5.0;
    let u_nom = crate::filter::nominal_control(&robot, &goal, &lim, &spec.filter.gains);
    let beta = RiskLevel::new(rng.random_range(0.02..0.99)).expect("in (0, 1)");
    Scene {
        robot,
        neighbors,
        prev_delta,
        u_nom,
        beta,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub scenes: usize,
    pub matches: usize,
    pub both_feasible: usize,
    /// Feasible in the solver only.
    pub solver_only: usize,
    /// Feasible on the oracle grid only.
    pub oracle_only: usize,
    /// Both feasible but the solver is worse than the grid optimum by more
    /// than one cell.
    pub objective_failures: usize,
    /// Solver returned a control violating the exact constraints.
    pub verification_failures: usize,
}

impl AgreementReport {
    pub fn agreement(&self) -> f64 {
        if self.scenes == 0 {
            1.0
        } else {
            self.matches as f64 / self.scenes as f64
        }
    }
}

/// Cost slack allowed for a grid optimum at distance `sqrt(grid_cost)` from
/// the target: the cost change across one cell diagonal.
pub fn cell_gap(filter: &SafetyFilter, robot: &RobotState, grid_cost: f64) -> f64 {
    let b = ControlBox::for_state(robot, &filter.limits);
    let n = (filter.config.grid_resolution.max(2) - 1) as f64;
    let diag = ((b.hi - b.lo) / n).norm();
    (grid_cost.sqrt() + diag).powi(2) - grid_cost
}

pub fn audit_agreement(spec: &AuditSpec) -> Result<AgreementReport> {
    let filter = spec.safety_filter()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed);
    let mut report = AgreementReport::default();
    for _ in 0..spec.scenes {
        let scene = random_scene(spec, 1, &mut rng);
        let solved = filter.solve_constrained(&scene.robot, &scene.neighbors, scene.beta, &scene.u_nom);
        let oracle = filter.brute_force_probe(&scene.robot, &scene.neighbors, scene.beta, &scene.u_nom);
        report.scenes += 1;
        if let Some(u) = &solved {
            let ok = scene
                .neighbors
                .iter()
                .all(|n| filter.residual(&scene.robot, u, n, scene.beta) >= -crate::filter::VERIFY_TOL);
            if !ok {
                report.verification_failures += 1;
            }
        }
        match (solved, oracle) {
            (Some(u), Some(g)) => {
                report.matches += 1;
                report.both_feasible += 1;
                let grid_cost = (g.a - scene.u_nom.a).norm_squared();
                let cost = (u.a - scene.u_nom.a).norm_squared();
                if cost > grid_cost + cell_gap(&filter, &scene.robot, grid_cost) {
                    report.objective_failures += 1;
                }
            }
            (None, None) => report.matches += 1,
            (Some(_), None) => report.solver_only += 1,
            (None, Some(_)) => report.oracle_only += 1,
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinimalityReport {
    pub scenes: usize,
    /// Selected level not oracle-feasible.
    pub not_feasible: usize,
    /// Some smaller candidate is oracle-feasible.
    pub not_minimal: usize,
    /// Filter reported infeasible while some candidate is oracle-feasible.
    pub missed: usize,
    /// `β_k > β̄_u`.
    pub above_bound: usize,
}

impl MinimalityReport {
    pub fn failures(&self) -> usize {
        self.not_feasible + self.not_minimal + self.missed + self.above_bound
    }
}

pub fn audit_minimality(spec: &AuditSpec) -> Result<MinimalityReport> {
    let filter = spec.safety_filter()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed ^ 0x6d69_6e69_6d61_6c00);
    let mut report = MinimalityReport::default();
    for _ in 0..spec.minimality_scenes {
        let n = rng.random_range(1..=spec.max_obstacles);
        let scene = random_scene(spec, n, &mut rng);
        let d = filter.select_beta(&scene.robot, &scene.neighbors, &scene.prev_delta, &scene.u_nom);
        report.scenes += 1;
        if d.beta_k > d.beta_bar_u {
            report.above_bound += 1;
        }
        let oracle = |b: RiskLevel| {
            filter
                .brute_force_probe(&scene.robot, &scene.neighbors, b, &scene.u_nom)
                .is_some()
        };
        let candidates = filter.candidates(d.beta_bar_u);
        if d.feasible {
            if !oracle(d.beta_k) {
                report.not_feasible += 1;
            }
            if candidates.iter().filter(|b| **b < d.beta_k).any(|b| oracle(*b)) {
                report.not_minimal += 1;
            }
        } else if candidates.iter().any(|b| oracle(*b)) {
            report.missed += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub agreement: AgreementReport,
    pub minimality: MinimalityReport,
    pub min_agreement: f64,
}

impl AuditReport {
    pub fn agreement_passed(&self) -> bool {
        self.agreement.agreement() >= self.min_agreement
            && self.agreement.objective_failures == 0
            && self.agreement.verification_failures == 0
    }

    pub fn minimality_passed(&self) -> bool {
        self.minimality.failures() == 0
    }

    pub fn passed(&self) -> bool {
        self.agreement_passed() && self.minimality_passed()
    }
}

pub fn run_audit(spec: &AuditSpec) -> Result<AuditReport> {
    spec.validate()?;
    Ok(AuditReport {
        agreement: audit_agreement(spec)?,
        minimality: audit_minimality(spec)?,
        min_agreement: spec.min_agreement,
    })
}
