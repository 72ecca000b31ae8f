//! Deterministic episode engine: robot, uncooperative crowd, sampled
//! predictions and a pluggable controller stepped on a single clock.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barriers::{delta_factor, BarrierKind, RelativeKinematics};
use crate::crowd::{generate_crowd, step_crowd, CrowdLayout, CrowdMember, KeepOut, SfmParams};
use crate::dynamics::{
    step_robot, ControlInput, Limits, ObstaclePrediction, ObstacleState, PredictionSampler, RobotState,
    SampleWeighting, TruncatedGaussian,
};
use crate::filter::{FilterConfig, FilterDecision, Neighbor, RiskPolicy, SafetyFilter};
use crate::geometry::{from_array, Vec2};
use crate::{Error, Result};

/// Risk level used by the robust cone baseline. Below the smallest sample
/// weight CVaR is the minimum over samples, so every sample is enforced.
pub const ROBUST_BETA: f64 = 1e-3;

const KEEP_OUT_RADIUS: f64 = 1.0;

/// The navigation method driving the safety filter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MethodSpec {
    /// Dynamic-zone barrier with adaptive β bounded by `β̄_u`.
    #[default]
    Proposed,
    /// Distance barrier at a fixed risk level.
    CvarDistFixed { beta: f64 },
    /// Dynamic-zone barrier at a fixed risk level.
    ZoneFixed { beta: f64 },
    /// Cone barrier on the mean prediction only.
    CbfCone,
    /// Cone barrier enforced on every prediction sample.
    RobustCbfCone,
    /// Distance barrier with adaptive β bounded by `β_u`.
    DistAdaptive,
    /// Cone barrier with adaptive β bounded by `β_u`.
    ConeAdaptive,
}

impl MethodSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MethodSpec::CvarDistFixed { beta } | MethodSpec::ZoneFixed { beta } if !(beta > 0.0 && beta < 1.0) => {
                Err(Error::invariant("method.beta", format!("{beta} not in (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in summary tables.
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Proposed => "Proposed".into(),
            MethodSpec::CvarDistFixed { beta } => format!("CVaRDist(beta={beta})"),
            MethodSpec::ZoneFixed { beta } => format!("Zone(beta={beta})"),
            MethodSpec::CbfCone => "CBFCone".into(),
            MethodSpec::RobustCbfCone => "RCBFCone".into(),
            MethodSpec::DistAdaptive => "DistAdaptive".into(),
            MethodSpec::ConeAdaptive => "ConeAdaptive".into(),
        }
    }

    /// Uses a single noiseless constant-velocity prediction.
    pub fn uses_mean_prediction(&self) -> bool {
        matches!(self, MethodSpec::CbfCone)
    }

    /// Specializes a base filter configuration to this method.
    pub fn filter_config(&self, base: &FilterConfig) -> FilterConfig {
        let (barrier, risk) = match *self {
            MethodSpec::Proposed => (BarrierKind::DynamicZone, RiskPolicy::Adaptive { dynamic_bound: true }),
            MethodSpec::CvarDistFixed { beta } => (BarrierKind::Distance, RiskPolicy::Fixed(beta)),
            MethodSpec::ZoneFixed { beta } => (BarrierKind::DynamicZone, RiskPolicy::Fixed(beta)),
            MethodSpec::CbfCone => (BarrierKind::Cone, RiskPolicy::Fixed(base.beta_u)),
            MethodSpec::RobustCbfCone => (BarrierKind::Cone, RiskPolicy::Fixed(ROBUST_BETA)),
            MethodSpec::DistAdaptive => (BarrierKind::Distance, RiskPolicy::Adaptive { dynamic_bound: false }),
            MethodSpec::ConeAdaptive => (BarrierKind::Cone, RiskPolicy::Adaptive { dynamic_bound: false }),
        };
        FilterConfig {
            barrier,
            risk,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Half-extent of the square arena, meters.
    pub arena: f64,
    pub n_obstacles: usize,
    /// Prediction noise standard deviation, meters.
    pub sigma: f64,
    pub robot_start: [f64; 2],
    pub robot_goal: [f64; 2],
    pub seed: u64,
    pub time_limit: f64,
    pub goal_eps: f64,
    pub sensor_range: f64,
    /// Prediction samples per obstacle.
    #[serde(alias = "L")]
    pub samples: usize,
    pub weighting: SampleWeighting,
    pub method: MethodSpec,
    pub robot_radius: f64,
    /// Added to the robot and obstacle radii to form each safety radius.
    pub safety_margin: f64,
    pub limits: Limits,
    pub filter: FilterConfig,
    pub sfm: SfmParams,
    pub layout: CrowdLayout,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            arena: 6.0,
            n_obstacles: 5,
            sigma: 0.05,
            robot_start: [0.0, -5.5],
            robot_goal: [0.0, 5.5],
            seed: 0,
            time_limit: 50.0,
            goal_eps: 0.3,
            sensor_range: 5.0,
            samples: 20,
            weighting: SampleWeighting::Uniform,
            method: MethodSpec::Proposed,
            robot_radius: 0.3,
            safety_margin: 0.1,
            limits: Limits::default(),
            filter: FilterConfig::default(),
            sfm: SfmParams::default(),
            layout: CrowdLayout::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::invariant(field, format!("{x} must be positive")))
            }
        };
        positive("arena", self.arena)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invariant("sigma", format!("{} must be nonnegative", self.sigma)));
        }
        positive("time_limit", self.time_limit)?;
        positive("goal_eps", self.goal_eps)?;
        positive("sensor_range", self.sensor_range)?;
        positive("robot_radius", self.robot_radius)?;
        if !(self.safety_margin >= 0.0) {
            return Err(Error::invariant("safety_margin", "must be nonnegative"));
        }
        if self.samples == 0 {
            return Err(Error::invariant("samples", "must be at least 1"));
        }
        if !self.robot_start.iter().chain(&self.robot_goal).all(|x| x.is_finite()) {
            return Err(Error::invariant("robot_start", "coordinates must be finite"));
        }
        self.method.validate()?;
        self.limits.validate()?;
        self.filter.validate()?;
        self.method.filter_config(&self.filter).validate()?;
        self.sfm.validate()
    }

    pub fn start(&self) -> Vec2 {
        from_array(self.robot_start)
    }

    pub fn goal(&self) -> Vec2 {
        from_array(self.robot_goal)
    }

    /// Initial crowd drawn from the scenario seed.
    pub fn initial_crowd(&self) -> Vec<CrowdMember> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let keep_out = [
            KeepOut {
                center: self.start(),
                radius: KEEP_OUT_RADIUS,
            },
            KeepOut {
                center: self.goal(),
                radius: KEEP_OUT_RADIUS,
            },
        ];
        generate_crowd(self.n_obstacles, &self.layout, &keep_out, &mut rng)
    }

    fn prediction_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Collision,
    Infeasible,
    Timeout,
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub beta_k: f64,
    pub beta_bar_u: f64,
    /// Smallest current barrier value; `None` with no obstacle in range or
    /// where the barrier is undefined.
    pub h_min: Option<f64>,
    /// Smallest surface gap to any obstacle; `None` with an empty crowd.
    pub dist_min: Option<f64>,
    pub feasible: bool,
    #[serde(skip)]
    pub per_obstacle_h: Vec<f64>,
}

/// Episode outcome without the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub outcome: Outcome,
    pub all_feasible: bool,
    pub trajectory_length: f64,
    pub elapsed: f64,
    /// Smallest surface gap over the episode; `None` with an empty crowd.
    pub min_separation: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub summary: EpisodeSummary,
    pub trace: Vec<StepRecord>,
}

impl EpisodeResult {
    pub fn outcome(&self) -> Outcome {
        self.summary.outcome
    }

    /// Writes the trace as line-delimited JSON.
    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in &self.trace {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// What a controller sees at step `k`.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub k: usize,
    pub t: f64,
    pub robot: RobotState,
    pub goal: Vec2,
    pub neighbors: &'a [Neighbor],
    /// Current approach factor `Δ` per neighbor (zero at `k = 0`).
    pub prev_delta: &'a [f64],
}

pub trait Controller {
    fn decide(&mut self, obs: &Observation<'_>) -> FilterDecision;
}

/// The CVaR safety filter around the go-to-goal nominal controller.
#[derive(Debug, Clone)]
pub struct FilterController {
    pub filter: SafetyFilter,
}

impl FilterController {
    pub fn for_scenario(cfg: &ScenarioConfig) -> Result<Self> {
        let config = cfg.method.filter_config(&cfg.filter);
        Ok(FilterController {
            filter: SafetyFilter::new(config, cfg.limits)?,
        })
    }
}

impl Controller for FilterController {
    fn decide(&mut self, obs: &Observation<'_>) -> FilterDecision {
        let u_nom = self.filter.nominal_control(&obs.robot, &obs.goal);
        self.filter
            .select_beta(&obs.robot, obs.neighbors, obs.prev_delta, &u_nom)
    }
}

/// Exact states of active members whose center lies within `range`.
pub fn sense(robot: &RobotState, crowd: &[CrowdMember], range: f64) -> Vec<ObstacleState> {
    crowd
        .iter()
        .filter(|m| m.active && (m.state.p - robot.p).norm() <= range)
        .map(|m| m.state)
        .collect()
}

/// Smallest surface gap between the robot disc and any active member.
pub fn min_surface_gap(robot: &RobotState, robot_radius: f64, crowd: &[CrowdMember]) -> Option<f64> {
    crowd
        .iter()
        .filter(|m| m.active)
        .map(|m| (m.state.p - robot.p).norm() - robot_radius - m.state.radius)
        .reduce(f64::min)
}

/// Episode-ending condition, by precedence Collision, Infeasible, Success,
/// Timeout.
pub fn check_termination(
    s: &RobotState,
    cfg: &ScenarioConfig,
    t: f64,
    last_decision: Option<&FilterDecision>,
    crowd: &[CrowdMember],
) -> Option<Outcome> {
    let collided = crowd
        .iter()
        .any(|m| m.active && (m.state.p - s.p).norm() < cfg.robot_radius + m.state.radius);
    if collided {
        Some(Outcome::Collision)
    } else if last_decision.is_some_and(|d| !d.feasible) {
        Some(Outcome::Infeasible)
    } else if (s.p - cfg.goal()).norm() < cfg.goal_eps {
        Some(Outcome::Success)
    } else if t >= cfg.time_limit {
        Some(Outcome::Timeout)
    } else {
        None
    }
}

/// Runs one episode with the scenario's own filter controller.
pub fn run_episode(cfg: &ScenarioConfig) -> Result<EpisodeResult> {
    let mut controller = FilterController::for_scenario(cfg)?;
    run_episode_with(cfg, &mut controller, &mut |_, _| {})
}

fn predictions(cfg: &ScenarioConfig, sensed: &[ObstacleState], rng: &mut ChaCha8Rng) -> Vec<Neighbor> {
    let sampler = TruncatedGaussian {
        sigma: cfg.sigma,
        samples: cfg.samples,
        weighting: cfg.weighting,
    };
    sensed
        .iter()
        .map(|o| Neighbor {
            current: *o,
            prediction: if cfg.method.uses_mean_prediction() {
                ObstaclePrediction::nominal(o, cfg.limits.dt)
            } else {
                sampler.predict(o, cfg.limits.dt, rng)
            },
            r_safe: cfg.robot_radius + o.radius + cfg.safety_margin,
        })
        .collect()
}

/// Runs one episode with an arbitrary controller. `on_step` sees the step
/// index and the crowd before each step.
pub fn run_episode_with(
    cfg: &ScenarioConfig,
    controller: &mut dyn Controller,
    on_step: &mut dyn FnMut(usize, &[CrowdMember]),
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let dt = cfg.limits.dt;
    let goal = cfg.goal();
    let mut crowd = cfg.initial_crowd();
    let mut pred_rng = cfg.prediction_rng();
    let mut robot = RobotState::at_rest(cfg.start());
    let mut trace = Vec::new();
    let mut length = 0.0;
    let mut min_gap = min_surface_gap(&robot, cfg.robot_radius, &crowd);
    let mut all_feasible = true;
    let mut last: Option<FilterDecision> = None;
    let mut k = 0usize;

    let outcome = loop {
        let t = k as f64 * dt;
        if let Some(outcome) = check_termination(&robot, cfg, t, last.as_ref(), &crowd) {
            break outcome;
        }
        on_step(k, &crowd);

        let sensed = sense(&robot, &crowd, cfg.sensor_range);
        let neighbors = predictions(cfg, &sensed, &mut pred_rng);
        let prev_delta: Vec<f64> = if k == 0 {
            vec![0.0; neighbors.len()]
        } else {
            sensed
                .iter()
                .map(|o| delta_factor(&RelativeKinematics::new(robot.p, o.p, robot.v, o.v)))
                .collect()
        };
        let decision = controller.decide(&Observation {
            k,
            t,
            robot,
            goal,
            neighbors: &neighbors,
            prev_delta: &prev_delta,
        });

        let h_min = decision
            .per_obstacle_h
            .iter()
            .copied()
            .reduce(f64::min)
            .filter(|h| h.is_finite());
        trace.push(StepRecord {
            k,
            t,
            px: robot.p.x,
            py: robot.p.y,
            vx: robot.v.x,
            vy: robot.v.y,
            ax: decision.u.a.x,
            ay: decision.u.a.y,
            beta_k: decision.beta_k.value(),
            beta_bar_u: decision.beta_bar_u.value(),
            h_min,
            dist_min: min_surface_gap(&robot, cfg.robot_radius, &crowd),
            feasible: decision.feasible,
            per_obstacle_h: decision.per_obstacle_h.clone(),
        });
        all_feasible &= decision.feasible;

        let u = ControlInput {
            a: crate::dynamics::ControlBox::for_state(&robot, &cfg.limits).clamp(decision.u.a),
        };
        let next = step_robot(&robot, &u, &cfg.limits)?;
        length += (next.p - robot.p).norm();
        robot = next;
        crowd = step_crowd(&crowd, &cfg.sfm, dt);
        if let Some(gap) = min_surface_gap(&robot, cfg.robot_radius, &crowd) {
            min_gap = Some(min_gap.map_or(gap, |g| g.min(gap)));
        }
        last = Some(decision);
        k += 1;
    };

    Ok(EpisodeResult {
        summary: EpisodeSummary {
            outcome,
            all_feasible,
            trajectory_length: length,
            elapsed: k as f64 * dt,
            min_separation: min_gap,
            steps: k,
        },
        trace,
    })
}

/// Crowd states over `steps` steps with no robot present.
pub fn crowd_rollout(cfg: &ScenarioConfig, steps: usize) -> Vec<Vec<CrowdMember>> {
    let mut crowd = cfg.initial_crowd();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(crowd.clone());
        crowd = step_crowd(&crowd, &cfg.sfm, cfg.limits.dt);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::SolverStatus;
    use crate::geometry::vec2;
    use crate::risk::RiskLevel;

    fn member_at(p: Vec2, radius: f64) -> CrowdMember {
        CrowdMember {
            state: ObstacleState {
                p,
                v: Vec2::zeros(),
                radius,
            },
            origin: p,
            goal: p,
            max_speed: vec2(0.3, 0.3),
            desired_speed: 0.3,
            active: true,
        }
    }

    fn decision(feasible: bool) -> FilterDecision {
        FilterDecision {
            u: ControlInput::zero(),
            beta_k: RiskLevel::new(0.5).unwrap(),
            feasible,
            per_obstacle_h: vec![],
            beta_bar_u: RiskLevel::new(0.5).unwrap(),
            solver_status: if feasible {
                SolverStatus::NominalPass
            } else {
                SolverStatus::Infeasible
            },
        }
    }

    #[test]
    fn sensing_boundary() {
        let robot = RobotState::at_rest(Vec2::zeros());
        let crowd = vec![
            member_at(vec2(5.0, 0.0), 0.3),
            member_at(vec2(0.0, 5.01), 0.3),
            member_at(vec2(1.0, 1.0), 0.3),
        ];
        let sensed = sense(&robot, &crowd, 5.0);
        assert_eq!(sensed.len(), 2);
        assert!(sense(&robot, &crowd[1..2], 5.0).is_empty());
    }

    #[test]
    fn termination_precedence() {
        let cfg = ScenarioConfig::default();
        let at_goal = RobotState::at_rest(cfg.goal());
        let on_top = vec![member_at(cfg.goal(), 0.3)];
        assert_eq!(
            check_termination(&at_goal, &cfg, 1.0, None, &on_top),
            Some(Outcome::Collision)
        );
        assert_eq!(
            check_termination(&at_goal, &cfg, 1.0, None, &[]),
            Some(Outcome::Success)
        );
        assert_eq!(
            check_termination(&at_goal, &cfg, 1.0, Some(&decision(false)), &[]),
            Some(Outcome::Infeasible)
        );
        let en_route = RobotState::at_rest(Vec2::zeros());
        assert_eq!(
            check_termination(&en_route, &cfg, 50.0, Some(&decision(true)), &[]),
            Some(Outcome::Timeout)
        );
        assert_eq!(
            check_termination(&en_route, &cfg, 49.9, Some(&decision(true)), &[]),
            None
        );
    }

    #[test]
    fn empty_arena_reaches_goal_straight() {
        let cfg = ScenarioConfig {
            n_obstacles: 0,
            ..ScenarioConfig::default()
        };
        let res = run_episode(&cfg).unwrap();
        assert_eq!(res.outcome(), Outcome::Success);
        let last = res.trace.last().unwrap();
        let travelled: f64 = res
            .trace
            .windows(2)
            .map(|w| vec2(w[1].px - w[0].px, w[1].py - w[0].py).norm())
            .sum();
        assert!(travelled <= res.summary.trajectory_length + 1e-9);
        let straight = (cfg.goal() - cfg.start()).norm();
        assert!(res.summary.trajectory_length >= straight - cfg.goal_eps);
        assert!(last.px.abs() < 1e-12);
        assert!(res.summary.min_separation.is_none());
    }

    #[test]
    fn method_validation() {
        let cfg = ScenarioConfig {
            method: MethodSpec::CvarDistFixed { beta: 1.0 },
            ..ScenarioConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Invariant { ref field, .. }) if field == "method.beta"));
        let cfg = ScenarioConfig {
            sigma: -1.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Invariant { ref field, .. }) if field == "sigma"));
    }

    #[test]
    fn method_serde_shape() {
        let m: MethodSpec = serde_json::from_str(r#"{"kind":"cvar_dist_fixed","beta":0.01}"#).unwrap();
        assert_eq!(m, MethodSpec::CvarDistFixed { beta: 0.01 });
        let m: MethodSpec = serde_json::from_str(r#"{"kind":"proposed"}"#).unwrap();
        assert_eq!(m, MethodSpec::Proposed);
    }
}
