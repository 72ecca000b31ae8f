//! Risk-adaptive CVaR barrier-function safety filter for navigation among
//! uncertain dynamic obstacles, together with the crowd simulator and the
//! benchmark harness used to evaluate it.
//!
//! The crate is organised bottom-up:
//!
//! * [`risk`] - exact VaR / CVaR on finite weighted distributions.
//! * [`barriers`] - distance, collision-cone and dynamic-zone barrier functions.
//! * [`dynamics`] - double-integrator robot and sampled obstacle predictions.
//! * [`crowd`] - social-force crowd that ignores the robot.
//! * [`filter`] - the CVaR-constrained safety filter and adaptive risk level.
//! * [`sim`] - deterministic episode engine and trace output.
//! * [`bench`] - scenario sweeps and SR/FR/CR/ATL/ATT aggregation.
//! * [`audit`] - randomized cross-checks of the solver against a grid oracle.
//! * [`config`] - JSON configuration loading with `key=value` overrides.

pub mod audit;
pub mod barriers;
pub mod bench;
pub mod config;
pub mod crowd;
pub mod dynamics;
mod error;
pub mod filter;
pub mod geometry;
pub mod qp;
pub mod risk;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::Vec2;
