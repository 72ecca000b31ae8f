//! Candidate barrier functions for a robot and one obstacle.
//!
//! * distance: `h^D = |p_rel|² - R²`
//! * collision cone: `h^C = <p_rel, v_rel> + |v_rel| sqrt(|p_rel|² - R²)`
//! * dynamic zone: `h^Z = |p_rel|² - R² (1 + Δ)` where
//!   `Δ = (-cos ∠(p_rel, v_rel))_+` grows as the pair closes in head-on.
//!
//! Reported values always use the exact `Δ`. The softplus surrogate only
//! exists to give the optimizer a nonzero gradient.

use serde::{Deserialize, Serialize};

use crate::geometry::{Vec2, DEGENERATE_NORM};
use crate::{Error, Result};

/// Default softplus temperature for the smooth approach factor.
pub const DEFAULT_SOFTPLUS_TEMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeKinematics {
    /// Robot position minus obstacle position.
    pub p_rel: Vec2,
    /// Robot velocity minus obstacle velocity.
    pub v_rel: Vec2,
}

impl RelativeKinematics {
    pub fn new(p: Vec2, p_obs: Vec2, v: Vec2, v_obs: Vec2) -> Self {
        RelativeKinematics {
            p_rel: p - p_obs,
            v_rel: v - v_obs,
        }
    }

    fn is_degenerate(&self) -> bool {
        self.p_rel.norm() < DEGENERATE_NORM || self.v_rel.norm() < DEGENERATE_NORM
    }

    /// `-cos` of the angle between `p_rel` and `v_rel`; zero when either is degenerate.
    pub fn approach_cosine(&self) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        -self.p_rel.dot(&self.v_rel) / (self.p_rel.norm() * self.v_rel.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BarrierKind {
    Distance,
    Cone,
    DynamicZone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig {
    pub r_safe: f64,
    pub softplus_temp: f64,
    pub kind: BarrierKind,
}

impl BarrierConfig {
    pub fn new(kind: BarrierKind, r_safe: f64) -> Result<Self> {
        let cfg = BarrierConfig {
            r_safe,
            softplus_temp: DEFAULT_SOFTPLUS_TEMP,
            kind,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_safe > 0.0 && self.r_safe.is_finite()) {
            return Err(Error::invariant("r_safe", "must be positive"));
        }
        if !(self.softplus_temp > 0.0 && self.softplus_temp.is_finite()) {
            return Err(Error::invariant("softplus_temp", "must be positive"));
        }
        Ok(())
    }
}

/// How the approach factor `Δ` is evaluated inside `h^Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaMode {
    Exact,
    Softplus(f64),
}

pub fn h_dist(p: &Vec2, p_obs: &Vec2, r_safe: f64) -> f64 {
    (p - p_obs).norm_squared() - r_safe * r_safe
}

/// `Δ = max(0, -cos ∠(p_rel, v_rel)) ∈ [0, 1]`.
pub fn delta_factor(rel: &RelativeKinematics) -> f64 {
    rel.approach_cosine().clamp(0.0, 1.0)
}

fn softplus(x: f64, temp: f64) -> f64 {
    let z = temp * x;
    if z > 0.0 {
        x + (-z).exp().ln_1p() / temp
    } else {
        z.exp().ln_1p() / temp
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth surrogate `ln(1 + exp(t x)) / t` of `Δ`, `x = -cos ∠(p_rel, v_rel)`.
pub fn delta_softplus(rel: &RelativeKinematics, temp: f64) -> f64 {
    softplus(rel.approach_cosine(), temp)
}

/// Collision-cone barrier. Undefined once the robot is inside the safety disc.
pub fn h_cone(rel: &RelativeKinematics, r_safe: f64) -> Result<f64> {
    let dist_sq = rel.p_rel.norm_squared();
    if dist_sq <= r_safe * r_safe {
        return Err(Error::ConeDomain {
            distance: dist_sq.sqrt(),
            r_safe,
        });
    }
    // |p_rel| cos φ = sqrt(|p_rel|² - R²)
    let leg = (dist_sq - r_safe * r_safe).sqrt();
    Ok(rel.p_rel.dot(&rel.v_rel) + rel.v_rel.norm() * leg)
}

/// Dynamic-zone barrier `|p_rel|² - R² (1 + Δ)`.
pub fn h_zone(rel: &RelativeKinematics, r_safe: f64, mode: DeltaMode) -> f64 {
    let delta = match mode {
        DeltaMode::Exact => delta_factor(rel),
        DeltaMode::Softplus(temp) => delta_softplus(rel, temp),
    };
    rel.p_rel.norm_squared() - r_safe * r_safe * (1.0 + delta)
}

/// Exact barrier value for `kind`, as used for bookkeeping and verification.
pub fn evaluate(kind: BarrierKind, rel: &RelativeKinematics, r_safe: f64) -> Result<f64> {
    match kind {
        BarrierKind::Distance => Ok(rel.p_rel.norm_squared() - r_safe * r_safe),
        BarrierKind::Cone => h_cone(rel, r_safe),
        BarrierKind::DynamicZone => Ok(h_zone(rel, r_safe, DeltaMode::Exact)),
    }
}

/// Barrier value with its gradient w.r.t. the robot position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierGradient {
    pub value: f64,
    pub d_p: Vec2,
    pub d_v: Vec2,
}

/// Smooth model of the barrier used by the optimizer.
///
/// `h^Z` uses the softplus `Δ`. The cone barrier is continued past its domain
/// with a zero leg so linearization stays defined; verification still uses
/// [`evaluate`].
pub fn smooth_gradient(cfg: &BarrierConfig, rel: &RelativeKinematics) -> BarrierGradient {
    let p = rel.p_rel;
    let v = rel.v_rel;
    let r2 = cfg.r_safe * cfg.r_safe;
    match cfg.kind {
        BarrierKind::Distance => BarrierGradient {
            value: p.norm_squared() - r2,
            d_p: 2.0 * p,
            d_v: Vec2::zeros(),
        },
        BarrierKind::Cone => {
            let leg = (p.norm_squared() - r2).max(0.0).sqrt();
            let speed = v.norm();
            let mut d_p = v;
            if leg > DEGENERATE_NORM {
                d_p += p * (speed / leg);
            }
            let mut d_v = p;
            if speed > DEGENERATE_NORM {
                d_v += v * (leg / speed);
            }
            BarrierGradient {
                value: p.dot(&v) + speed * leg,
                d_p,
                d_v,
            }
        }
        BarrierKind::DynamicZone => {
            let temp = cfg.softplus_temp;
            if rel.is_degenerate() {
                return BarrierGradient {
                    value: p.norm_squared() - r2 * (1.0 + softplus(0.0, temp)),
                    d_p: 2.0 * p,
                    d_v: Vec2::zeros(),
                };
            }
            let np = p.norm();
            let nv = v.norm();
            let dot = p.dot(&v);
            let x = -dot / (np * nv);
            // x = -<p,v>/(|p||v|)
            let dx_dp = -(v / (np * nv) - p * (dot / (np * np * np * nv)));
            let dx_dv = -(p / (np * nv) - v * (dot / (np * nv * nv * nv)));
            let slope = sigmoid(temp * x);
            BarrierGradient {
                value: p.norm_squared() - r2 * (1.0 + softplus(x, temp)),
                d_p: 2.0 * p - dx_dp * (r2 * slope),
                d_v: -dx_dv * (r2 * slope),
            }
        }
    }
}
