//! Double-integrator robot and constant-velocity obstacle predictions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::risk::WeightedDistribution;
use crate::{Error, Result};

/// Tolerance when checking a control against the acceleration box.
const ADMISSIBLE_TOL: f64 = 1e-9;

/// Truncation half-width of prediction noise, in standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub p: Vec2,
    pub v: Vec2,
}

impl RobotState {
    pub fn at_rest(p: Vec2) -> Self {
        RobotState { p, v: Vec2::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub a: Vec2,
}

impl ControlInput {
    pub fn new(ax: f64, ay: f64) -> Self {
        ControlInput { a: Vec2::new(ax, ay) }
    }

    pub fn zero() -> Self {
        ControlInput { a: Vec2::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleState {
    pub p: Vec2,
    pub v: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub a_max: f64,
    pub v_max: f64,
    pub dt: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            a_max: 3.0,
            v_max: 2.0,
            dt: 0.1,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("a_max", self.a_max), ("v_max", self.v_max), ("dt", self.dt)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::invariant(name, format!("{value} must be positive")));
            }
        }
        Ok(())
    }
}

/// Closed-form double-integrator step followed by the per-axis speed clamp.
pub fn step_robot(s: &RobotState, u: &ControlInput, lim: &Limits) -> Result<RobotState> {
    let bound = lim.a_max + ADMISSIBLE_TOL;
    if !(u.a.x.abs() <= bound && u.a.y.abs() <= bound) {
        return Err(Error::InadmissibleControl {
            ax: u.a.x,
            ay: u.a.y,
            a_max: lim.a_max,
        });
    }
    let next = propagate(s, u, lim.dt);
    Ok(RobotState {
        p: next.p,
        v: next.v.map(|c| c.clamp(-lim.v_max, lim.v_max)),
    })
}

/// Unclamped `p + dt v + dt²a/2`, `v + dt a`.
pub fn propagate(s: &RobotState, u: &ControlInput, dt: f64) -> RobotState {
    RobotState {
        p: s.p + s.v * dt + u.a * (0.5 * dt * dt),
        v: s.v + u.a * dt,
    }
}

pub fn clamp_control(u: &ControlInput, lim: &Limits) -> ControlInput {
    ControlInput {
        a: u.a.map(|c| c.clamp(-lim.a_max, lim.a_max)),
    }
}

/// Per-axis acceleration bounds that also keep the next velocity within
/// `±v_max`. Always contains the origin when `|v| ≤ v_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBox {
    pub lo: Vec2,
    pub hi: Vec2,
}

impl ControlBox {
    pub fn for_state(s: &RobotState, lim: &Limits) -> Self {
        let axis = |v: f64| {
            let lo = ((-lim.v_max - v) / lim.dt).max(-lim.a_max);
            let hi = ((lim.v_max - v) / lim.dt).min(lim.a_max);
            if lo <= hi {
                (lo, hi)
            } else {
                // Speed already beyond the limit: only the acceleration box applies.
                (-lim.a_max, lim.a_max)
            }
        };
        let (xl, xh) = axis(s.v.x);
        let (yl, yh) = axis(s.v.y);
        ControlBox {
            lo: Vec2::new(xl, yl),
            hi: Vec2::new(xh, yh),
        }
    }

    pub fn clamp(&self, a: Vec2) -> Vec2 {
        Vec2::new(a.x.clamp(self.lo.x, self.hi.x), a.y.clamp(self.lo.y, self.hi.y))
    }

    pub fn contains(&self, a: &Vec2, tol: f64) -> bool {
        a.x >= self.lo.x - tol && a.x <= self.hi.x + tol && a.y >= self.lo.y - tol && a.y <= self.hi.y + tol
    }
}

/// `L` weighted samples of one obstacle's next state.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstaclePrediction {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub probs: Vec<f64>,
}

impl ObstaclePrediction {
    /// Single noiseless constant-velocity sample.
    pub fn nominal(o: &ObstacleState, dt: f64) -> Self {
        ObstaclePrediction {
            positions: vec![o.p + o.v * dt],
            velocities: vec![o.v],
            probs: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Distribution of `f(sample)` over the samples.
    pub fn distribution(&self, f: impl Fn(&Vec2, &Vec2) -> f64) -> Result<WeightedDistribution> {
        let values = self
            .positions
            .iter()
            .zip(&self.velocities)
            .map(|(p, v)| f(p, v))
            .collect();
        WeightedDistribution::new(values, self.probs.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleWeighting {
    /// Monte Carlo weights `1/L`.
    #[default]
    Uniform,
    /// Weights proportional to the Gaussian density of each draw.
    Density,
}

/// Source of obstacle next-state samples.
pub trait PredictionSampler {
    fn predict<R: Rng + ?Sized>(&self, o: &ObstacleState, dt: f64, rng: &mut R) -> ObstaclePrediction;
}

/// Constant-velocity prediction with per-axis Gaussian position noise,
/// truncated to `±3σ` by rejection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    pub sigma: f64,
    pub samples: usize,
    pub weighting: SampleWeighting,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION_SIGMAS {
            return z;
        }
    }
}

impl PredictionSampler for TruncatedGaussian {
    fn predict<R: Rng + ?Sized>(&self, o: &ObstacleState, dt: f64, rng: &mut R) -> ObstaclePrediction {
        let n = self.samples.max(1);
        let nominal = o.p + o.v * dt;
        let mut positions = Vec::with_capacity(n);
        let mut log_density = Vec::with_capacity(n);
        for _ in 0..n {
            if self.sigma > 0.0 {
                let zx = truncated_normal(rng);
                let zy = truncated_normal(rng);
                positions.push(nominal + Vec2::new(zx, zy) * self.sigma);
                log_density.push(-0.5 * (zx * zx + zy * zy));
            } else {
                positions.push(nominal);
                log_density.push(0.0);
            }
        }
        let probs = match self.weighting {
            SampleWeighting::Uniform => vec![1.0 / n as f64; n],
            SampleWeighting::Density => {
                let top = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = log_density.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
        };
        ObstaclePrediction {
            positions,
            velocities: vec![o.v; n],
            probs,
        }
    }
}

pub fn predict_obstacle<R: Rng + ?Sized>(
    o: &ObstacleState,
    lim: &Limits,
    sigma: f64,
    samples: usize,
    rng: &mut R,
) -> ObstaclePrediction {
    TruncatedGaussian {
        sigma,
        samples,
        weighting: SampleWeighting::Uniform,
    }
    .predict(o, lim.dt, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lim() -> Limits {
        Limits::default()
    }

    #[test]
    fn step_examples() {
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(1.0, 0.0),
        };
        let n = step_robot(&s, &ControlInput::new(2.0, 0.0), &lim()).unwrap();
        assert!((n.p - vec2(0.11, 0.0)).norm() < 1e-15);
        assert!((n.v - vec2(1.2, 0.0)).norm() < 1e-15);

        let rest = RobotState::at_rest(vec2(3.0, -1.0));
        assert_eq!(step_robot(&rest, &ControlInput::zero(), &lim()).unwrap(), rest);

        let fast = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(1.95, 0.0),
        };
        let n = step_robot(&fast, &ControlInput::new(3.0, 0.0), &lim()).unwrap();
        assert_eq!(n.v, vec2(2.0, 0.0));
    }

    #[test]
    fn step_rejects_inadmissible() {
        let s = RobotState::at_rest(vec2(0.0, 0.0));
        assert!(matches!(
            step_robot(&s, &ControlInput::new(3.5, 0.0), &lim()),
            Err(Error::InadmissibleControl { .. })
        ));
    }

    #[test]
    fn integration_matches_analytic_solution() {
        // Constant acceleration over n steps: p = p0 + v0 T + a T²/2.
        let a = ControlInput::new(0.7, -0.4);
        let mut s = RobotState {
            p: vec2(1.0, 2.0),
            v: vec2(-0.3, 0.5),
        };
        let s0 = s;
        for _ in 0..10 {
            s = step_robot(&s, &a, &lim()).unwrap();
        }
        let t = 1.0;
        let p = s0.p + s0.v * t + a.a * (0.5 * t * t);
        assert!((s.p - p).norm() < 1e-12);
        assert!((s.v - (s0.v + a.a * t)).norm() < 1e-12);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_control(&ControlInput::new(5.0, -1.0), &lim()).a, vec2(3.0, -1.0));
        assert_eq!(clamp_control(&ControlInput::zero(), &lim()).a, vec2(0.0, 0.0));
        assert_eq!(clamp_control(&ControlInput::new(-3.0, 3.0), &lim()).a, vec2(-3.0, 3.0));
        let once = clamp_control(&ControlInput::new(-9.0, 0.2), &lim());
        assert_eq!(clamp_control(&once, &lim()), once);
    }

    #[test]
    fn control_box_respects_speed_limit() {
        let s = RobotState {
            p: vec2(0.0, 0.0),
            v: vec2(1.9, -2.0),
        };
        let b = ControlBox::for_state(&s, &lim());
        assert!((b.hi.x - 1.0).abs() < 1e-12);
        assert_eq!(b.lo.x, -3.0);
        assert_eq!(b.lo.y, 0.0);
        assert!(b.contains(&Vec2::zeros(), 0.0));
    }

    fn obstacle() -> ObstacleState {
        ObstacleState {
            p: vec2(1.0, -2.0),
            v: vec2(0.6, 0.3),
            radius: 0.4,
        }
    }

    #[test]
    fn noiseless_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = predict_obstacle(&obstacle(), &lim(), 0.0, 20, &mut rng);
        assert_eq!(pred.len(), 20);
        for (p, w) in pred.positions.iter().zip(&pred.probs) {
            assert_eq!(*p, vec2(1.06, -1.97));
            assert_eq!(*w, 1.0 / 20.0);
        }
        assert!(pred.velocities.iter().all(|v| *v == obstacle().v));
    }

    #[test]
    fn prediction_truncated_and_deterministic() {
        let o = obstacle();
        let nominal = o.p + o.v * 0.1;
        for seed in 0..200 {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let pa = predict_obstacle(&o, &lim(), 0.05, 20, &mut a);
            let pb = predict_obstacle(&o, &lim(), 0.05, 20, &mut b);
            assert_eq!(pa, pb);
            for p in &pa.positions {
                assert!((p.x - nominal.x).abs() <= 0.15 + 1e-12);
                assert!((p.y - nominal.y).abs() <= 0.15 + 1e-12);
            }
        }
    }

    #[test]
    fn prediction_mean_concentrates() {
        // Sample mean of 20 draws should sit within 4σ/√L of nominal per axis.
        let o = obstacle();
        let nominal = o.p + o.v * 0.1;
        let sigma = 0.05;
        let bound = 4.0 * sigma / (20f64).sqrt();
        let trials = 500;
        let mut inside = 0;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let pred = predict_obstacle(&o, &lim(), sigma, 20, &mut rng);
            let mean = pred.positions.iter().fold(Vec2::zeros(), |acc, p| acc + p) / 20.0;
            if (mean.x - nominal.x).abs() <= bound && (mean.y - nominal.y).abs() <= bound {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * trials as f64, "{inside}/{trials}");
    }

    #[test]
    fn density_weights_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sampler = TruncatedGaussian {
            sigma: 0.1,
            samples: 20,
            weighting: SampleWeighting::Density,
        };
        let pred = sampler.predict(&obstacle(), 0.1, &mut rng);
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pred.distribution(|p, _| p.x).is_ok());
    }
}
