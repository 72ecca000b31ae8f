//! Planar vector helpers shared across modules.

/// Planar vector in a global frame (meters, m/s or m/s² depending on use).
pub type Vec2 = nalgebra::Vector2<f64>;

/// Norms below this are treated as zero when a direction is required.
pub const DEGENERATE_NORM: f64 = 1e-9;

pub fn vec2(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}

pub fn from_array(a: [f64; 2]) -> Vec2 {
    Vec2::new(a[0], a[1])
}

pub fn to_array(v: &Vec2) -> [f64; 2] {
    [v.x, v.y]
}
