//! Exact projection onto a planar polygon: `min |u - target|²` subject to
//! half-plane constraints `n · u ≥ b`.
//!
//! With a strictly convex objective in two variables the minimizer has at
//! most two active constraints, so it is one of: the target itself, the
//! projection of the target onto a single constraint line, or a vertex where
//! two lines meet. Every feasible candidate is a feasible point, so the best
//! one is the global optimum.

use crate::geometry::Vec2;

/// Feasibility slack on unit-normal constraints.
pub const FEAS_TOL: f64 = 1e-9;

const PARALLEL_TOL: f64 = 1e-12;

/// `normal · u ≥ offset`, stored with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub normal: Vec2,
    pub offset: f64,
}

impl HalfPlane {
    /// Normalizes `normal · u ≥ offset`. Returns `Err(())` for a zero normal
    /// with a positive offset (an unsatisfiable constraint) and `Ok(None)`
    /// for a vacuous one.
    #[allow(clippy::result_unit_err)]
    pub fn new(normal: Vec2, offset: f64) -> Result<Option<Self>, ()> {
        let n = normal.norm();
        if n < PARALLEL_TOL {
            return if offset > FEAS_TOL { Err(()) } else { Ok(None) };
        }
        Ok(Some(HalfPlane {
            normal: normal / n,
            offset: offset / n,
        }))
    }

    pub fn slack(&self, u: &Vec2) -> f64 {
        self.normal.dot(u) - self.offset
    }
}

/// Half-planes describing `lo ≤ u ≤ hi`.
pub fn box_constraints(lo: Vec2, hi: Vec2) -> [HalfPlane; 4] {
    [
        HalfPlane {
            normal: Vec2::new(1.0, 0.0),
            offset: lo.x,
        },
        HalfPlane {
            normal: Vec2::new(-1.0, 0.0),
            offset: -hi.x,
        },
        HalfPlane {
            normal: Vec2::new(0.0, 1.0),
            offset: lo.y,
        },
        HalfPlane {
            normal: Vec2::new(0.0, -1.0),
            offset: -hi.y,
        },
    ]
}

fn feasible(u: &Vec2, planes: &[HalfPlane]) -> bool {
    planes.iter().all(|h| h.slack(u) >= -FEAS_TOL)
}

/// Closest point to `target` in the intersection of `planes`, or `None`
/// when the intersection is empty.
pub fn project(target: Vec2, planes: &[HalfPlane]) -> Option<Vec2> {
    if feasible(&target, planes) {
        return Some(target);
    }
    let mut best: Option<(f64, Vec2)> = None;
    let mut consider = |u: Vec2| {
        let cost = (u - target).norm_squared();
        if best.is_none_or(|(c, _)| cost < c) && feasible(&u, planes) {
            best = Some((cost, u));
        }
    };
    for h in planes {
        let s = h.slack(&target);
        if s < 0.0 {
            consider(target - h.normal * s);
        }
    }
    for (i, a) in planes.iter().enumerate() {
        for b in &planes[i + 1..] {
            let det = a.normal.x * b.normal.y - a.normal.y * b.normal.x;
            if det.abs() < PARALLEL_TOL {
                continue;
            }
            let x = (a.offset * b.normal.y - b.offset * a.normal.y) / det;
            let y = (a.normal.x * b.offset - b.normal.x * a.offset) / det;
            consider(Vec2::new(x, y));
        }
    }
    best.map(|(_, u)| u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec2;
    use proptest::prelude::*;

    fn hp(nx: f64, ny: f64, b: f64) -> HalfPlane {
        HalfPlane::new(vec2(nx, ny), b).unwrap().unwrap()
    }

    #[test]
    fn unconstrained_target_is_returned() {
        let planes = box_constraints(vec2(-1.0, -1.0), vec2(1.0, 1.0));
        assert_eq!(project(vec2(0.3, -0.2), &planes), Some(vec2(0.3, -0.2)));
    }

    #[test]
    fn box_projection() {
        let planes = box_constraints(vec2(-1.0, -1.0), vec2(1.0, 1.0));
        assert_eq!(project(vec2(3.0, 0.5), &planes), Some(vec2(1.0, 0.5)));
        assert_eq!(project(vec2(3.0, -4.0), &planes), Some(vec2(1.0, -1.0)));
    }

    #[test]
    fn single_line() {
        // x + y ≥ 2 from the origin lands on (1, 1).
        let u = project(Vec2::zeros(), &[hp(1.0, 1.0, 2.0)]).unwrap();
        assert!((u - vec2(1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn obtuse_wedge_vertex() {
        // Target satisfies y ≥ x - 1 yet that constraint is active at the optimum.
        let planes = [hp(0.0, 1.0, 1.0), hp(-1.0, 1.0, -1.0), hp(1.0, 0.0, 3.0)];
        let u = project(vec2(0.0, 0.0), &planes).unwrap();
        assert!((u - vec2(3.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn empty_intersection() {
        let planes = [hp(1.0, 0.0, 1.0), hp(-1.0, 0.0, 0.0)];
        assert_eq!(project(Vec2::zeros(), &planes), None);
        assert!(HalfPlane::new(Vec2::zeros(), 1.0).is_err());
        assert_eq!(HalfPlane::new(Vec2::zeros(), -1.0), Ok(None));
    }

    proptest! {
        // Compare against a dense grid search over the feasible polygon.
        #[test]
        fn optimal_against_grid(
            target in (-4.0f64..4.0, -4.0f64..4.0),
            cuts in prop::collection::vec((0.0f64..std::f64::consts::TAU, -2.0f64..1.0), 0..5),
        ) {
            let target = vec2(target.0, target.1);
            let mut planes = box_constraints(vec2(-3.0, -3.0), vec2(3.0, 3.0)).to_vec();
            planes.extend(cuts.iter().map(|&(ang, b)| hp(ang.cos(), ang.sin(), b)));
            let n = 301;
            let mut grid_best: Option<f64> = None;
            for i in 0..n {
                for j in 0..n {
                    let u = vec2(-3.0 + 6.0 * i as f64 / (n - 1) as f64, -3.0 + 6.0 * j as f64 / (n - 1) as f64);
                    if feasible(&u, &planes) {
                        let c = (u - target).norm_squared();
                        grid_best = Some(grid_best.map_or(c, |b: f64| b.min(c)));
                    }
                }
            }
            match (project(target, &planes), grid_best) {
                (Some(u), Some(g)) => {
                    prop_assert!(feasible(&u, &planes));
                    prop_assert!((u - target).norm_squared() <= g + 1e-9);
                }
                (Some(u), None) => prop_assert!(feasible(&u, &planes)),
                (None, Some(_)) => prop_assert!(false, "solver missed a feasible grid point"),
                (None, None) => {}
            }
        }
    }
}
