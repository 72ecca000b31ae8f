//! Social-force crowd of uncooperative obstacles.
//!
//! Members relax toward a desired velocity aimed at their goal and repel one
//! another exponentially. The robot never enters the force sum, so crowd
//! trajectories do not depend on what the robot does.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::ObstacleState;
use crate::geometry::{Vec2, DEGENERATE_NORM};
use crate::{Error, Result};

/// Per-axis speed caps members draw from (m/s).
pub const SPEED_CHOICES: [f64; 4] = [0.3, 0.6, 0.9, 1.2];
/// Body radii members draw from (m).
pub const RADIUS_CHOICES: [f64; 3] = [0.3, 0.4, 0.5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrowdMember {
    pub state: ObstacleState,
    pub origin: Vec2,
    pub goal: Vec2,
    /// Per-axis speed cap.
    pub max_speed: Vec2,
    pub desired_speed: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmParams {
    /// Relaxation time (s).
    pub tau: f64,
    /// Interaction strength (m/s²).
    pub strength: f64,
    /// Interaction range (m).
    pub range: f64,
    /// Gain of the body-compression term (m/s² per m of overlap).
    pub body_factor: f64,
    /// Distance at which a member counts as arrived and turns around (m).
    pub goal_tolerance: f64,
}

impl Default for SfmParams {
    fn default() -> Self {
        SfmParams {
            tau: 0.5,
            strength: 2.1,
            range: 0.3,
            body_factor: 0.0,
            goal_tolerance: 0.3,
        }
    }
}

impl SfmParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sfm.tau", self.tau),
            ("sfm.strength", self.strength),
            ("sfm.range", self.range),
            ("sfm.goal_tolerance", self.goal_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invariant(name, format!("{v} must be positive")));
            }
        }
        if !(self.body_factor >= 0.0) {
            return Err(Error::invariant("sfm.body_factor", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Acceleration of member `i`: goal relaxation plus pairwise repulsion.
pub fn sfm_acceleration(i: usize, crowd: &[CrowdMember], params: &SfmParams) -> Vec2 {
    let me = &crowd[i];
    let to_goal = me.goal - me.state.p;
    let dist = to_goal.norm();
    let desired = if dist > DEGENERATE_NORM {
        to_goal * (me.desired_speed / dist)
    } else {
        Vec2::zeros()
    };
    let mut acc = (desired - me.state.v) / params.tau;

    for (j, other) in crowd.iter().enumerate() {
        if j == i || !other.active {
            continue;
        }
        let offset = me.state.p - other.state.p;
        let d = offset.norm();
        let normal = if d < DEGENERATE_NORM {
            Vec2::new(1.0, 0.0)
        } else {
            offset / d
        };
        let reach = me.state.radius + other.state.radius;
        let mut magnitude = params.strength * ((reach - d) / params.range).exp();
        if d < reach {
            magnitude += params.body_factor * (reach - d);
        }
        acc += normal * magnitude;
    }
    acc
}

/// Synchronous Euler step of every active member.
pub fn step_crowd(crowd: &[CrowdMember], params: &SfmParams, dt: f64) -> Vec<CrowdMember> {
    let accelerations: Vec<Vec2> = (0..crowd.len())
        .map(|i| {
            if crowd[i].active {
                sfm_acceleration(i, crowd, params)
            } else {
                Vec2::zeros()
            }
        })
        .collect();

    crowd
        .iter()
        .zip(accelerations)
        .map(|(m, acc)| {
            if !m.active {
                return *m;
            }
            let mut next = *m;
            let v = m.state.v + acc * dt;
            next.state.v = Vec2::new(
                v.x.clamp(-m.max_speed.x, m.max_speed.x),
                v.y.clamp(-m.max_speed.y, m.max_speed.y),
            );
            next.state.p = m.state.p + next.state.v * dt;
            if (next.goal - next.state.p).norm() < params.goal_tolerance {
                std::mem::swap(&mut next.origin, &mut next.goal);
            }
            next
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum CrowdLayout {
    /// Start on a circle around the arena center, walk to the antipode.
    CircleCrossing { radius: f64, jitter: f64 },
    /// Starts and goals uniform in the square `[-half_extent, half_extent]²`.
    UniformRandom { half_extent: f64 },
}

impl Default for CrowdLayout {
    fn default() -> Self {
        CrowdLayout::CircleCrossing {
            radius: 4.0,
            jitter: 0.5,
        }
    }
}

/// A disc that spawned members must keep clear of (e.g. the robot start).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeepOut {
    pub center: Vec2,
    pub radius: f64,
}

const SPAWN_ATTEMPTS: usize = 200;
const SPAWN_CLEARANCE: f64 = 0.3;

/// Draws `n` members with independent per-axis speed caps and radii.
pub fn generate_crowd<R: Rng + ?Sized>(
    n: usize,
    layout: &CrowdLayout,
    keep_out: &[KeepOut],
    rng: &mut R,
) -> Vec<CrowdMember> {
    let mut crowd: Vec<CrowdMember> = Vec::with_capacity(n);
    for _ in 0..n {
        let radius = *RADIUS_CHOICES.choose(rng).expect("nonempty");
        let max_speed = Vec2::new(
            *SPEED_CHOICES.choose(rng).expect("nonempty"),
            *SPEED_CHOICES.choose(rng).expect("nonempty"),
        );
        let mut placed = None;
        for attempt in 0..SPAWN_ATTEMPTS {
            let (start, goal) = draw_route(layout, rng);
            let clear_of_crowd = crowd.iter().all(|m| {
                let gap = m.state.radius + radius + SPAWN_CLEARANCE;
                (m.state.p - start).norm() > gap && (m.goal - goal).norm() > gap
            });
            let clear_of_zones = keep_out.iter().all(|k| (k.center - start).norm() > k.radius + radius);
            if (clear_of_crowd && clear_of_zones) || attempt + 1 == SPAWN_ATTEMPTS {
                placed = Some((start, goal));
                if clear_of_crowd && clear_of_zones {
                    break;
                }
            }
        }
        let (start, goal) = placed.expect("at least one attempt");
        crowd.push(CrowdMember {
            state: ObstacleState {
                p: start,
                v: Vec2::zeros(),
                radius,
            },
            origin: start,
            goal,
            max_speed,
            desired_speed: max_speed.norm(),
            active: true,
        });
    }
    crowd
}

fn draw_route<R: Rng + ?Sized>(layout: &CrowdLayout, rng: &mut R) -> (Vec2, Vec2) {
    match *layout {
        CrowdLayout::CircleCrossing { radius, jitter } => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mut noise = || {
                if jitter > 0.0 {
                    Vec2::new(rng.random_range(-jitter..jitter), rng.random_range(-jitter..jitter))
                } else {
                    Vec2::zeros()
                }
            };
            let rim = Vec2::new(angle.cos(), angle.sin()) * radius;
            (rim + noise(), -rim + noise())
        }
        CrowdLayout::UniformRandom { half_extent } => {
            let mut point = || {
                Vec2::new(
                    rng.random_range(-half_extent..half_extent),
                    rng.random_range(-half_extent..half_extent),
                )
            };
            (point(), point())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn member(p: Vec2, v: Vec2, goal: Vec2, radius: f64, speed: f64) -> CrowdMember {
        CrowdMember {
            state: ObstacleState { p, v, radius },
            origin: p,
            goal,
            max_speed: vec2(speed, speed),
            desired_speed: speed,
            active: true,
        }
    }

    #[test]
    fn relaxation_from_rest() {
        let crowd = [member(vec2(0.0, 0.0), Vec2::zeros(), vec2(10.0, 0.0), 0.3, 1.0)];
        let params = SfmParams {
            tau: 0.5,
            ..SfmParams::default()
        };
        let a = sfm_acceleration(0, &crowd, &params);
        assert!((a - vec2(2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn relaxation_fixed_point() {
        let crowd = [member(vec2(0.0, 0.0), vec2(0.0, 1.0), vec2(0.0, 7.0), 0.3, 1.0)];
        assert_eq!(sfm_acceleration(0, &crowd, &SfmParams::default()), Vec2::zeros());
    }

    #[test]
    fn pair_repulsion_magnitude() {
        // Goals at the members' own positions: only repulsion remains.
        let a = member(vec2(0.0, 0.0), Vec2::zeros(), vec2(0.0, 0.0), 0.3, 1.0);
        let b = member(vec2(0.9, 0.0), Vec2::zeros(), vec2(0.9, 0.0), 0.3, 1.0);
        let params = SfmParams {
            strength: 2.0,
            range: 0.3,
            ..SfmParams::default()
        };
        let acc = sfm_acceleration(0, &[a, b], &params);
        let expected = 2.0 * (-1.0f64).exp();
        assert!((acc - vec2(-expected, 0.0)).norm() < 1e-12);
        assert!((expected - 0.7358).abs() < 1e-4);
    }

    #[test]
    fn coincident_members_use_fallback_direction() {
        let a = member(vec2(1.0, 1.0), Vec2::zeros(), vec2(1.0, 1.0), 0.3, 1.0);
        let acc = sfm_acceleration(0, &[a, a], &SfmParams::default());
        assert!(acc.x > 0.0);
        assert_eq!(acc.y, 0.0);
    }

    #[test]
    fn empty_crowd_steps_to_empty() {
        assert!(step_crowd(&[], &SfmParams::default(), 0.1).is_empty());
    }

    #[test]
    fn lone_member_reaches_desired_speed() {
        let mut crowd = vec![member(vec2(-20.0, 0.0), Vec2::zeros(), vec2(40.0, 0.0), 0.3, 1.0)];
        for _ in 0..100 {
            crowd = step_crowd(&crowd, &SfmParams::default(), 0.1);
        }
        let speed = crowd[0].state.v.norm();
        assert!((speed - 1.0).abs() < 0.01, "{speed}");
    }

    #[test]
    fn head_on_pair_passes_without_overlap() {
        let mut crowd = vec![
            member(vec2(-3.0, 0.05), Vec2::zeros(), vec2(3.0, 0.05), 0.3, 0.6),
            member(vec2(3.0, -0.05), Vec2::zeros(), vec2(-3.0, -0.05), 0.3, 0.6),
        ];
        let mut min_gap = f64::INFINITY;
        for _ in 0..150 {
            crowd = step_crowd(&crowd, &SfmParams::default(), 0.1);
            min_gap = min_gap.min((crowd[0].state.p - crowd[1].state.p).norm());
        }
        assert!(min_gap > 0.8 * 0.6, "min center distance {min_gap}");
        // Both made it past each other.
        assert!(crowd[0].state.p.x > crowd[1].state.p.x);
    }

    #[test]
    fn speed_caps_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut crowd = generate_crowd(12, &CrowdLayout::default(), &[], &mut rng);
        for _ in 0..300 {
            crowd = step_crowd(&crowd, &SfmParams::default(), 0.1);
            for m in &crowd {
                assert!(m.state.v.x.abs() <= m.max_speed.x);
                assert!(m.state.v.y.abs() <= m.max_speed.y);
                assert!(SPEED_CHOICES.contains(&m.max_speed.x));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_clear() {
        let keep = [KeepOut {
            center: vec2(0.0, -5.5),
            radius: 1.3,
        }];
        let a = generate_crowd(8, &CrowdLayout::default(), &keep, &mut ChaCha8Rng::seed_from_u64(4));
        let b = generate_crowd(8, &CrowdLayout::default(), &keep, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        for (i, m) in a.iter().enumerate() {
            assert!(RADIUS_CHOICES.contains(&m.state.radius));
            assert!((m.state.p - keep[0].center).norm() > keep[0].radius + m.state.radius);
            for other in &a[i + 1..] {
                assert!((m.state.p - other.state.p).norm() > m.state.radius + other.state.radius);
            }
        }
    }

    #[test]
    fn inactive_members_are_frozen_and_ignored() {
        let mut idle = member(vec2(0.5, 0.0), vec2(1.0, 0.0), vec2(5.0, 0.0), 0.3, 1.0);
        idle.active = false;
        let walker = member(vec2(0.0, 0.0), Vec2::zeros(), vec2(-5.0, 0.0), 0.3, 1.0);
        let next = step_crowd(&[walker, idle], &SfmParams::default(), 0.1);
        assert_eq!(next[1], idle);
        let alone = step_crowd(&[walker], &SfmParams::default(), 0.1);
        assert_eq!(next[0], alone[0]);
    }
}
