//! Simulation side of the parkour pipeline: procedural obstacle terrain,
//! exteroceptive sensing, a reduced-order quadruped model, reward terms and
//! the terrain curriculum.
//!
//! Everything here is a pure function of its inputs (or owns its own RNG
//! stream), so rollout workers can call into it freely.

pub mod curriculum;
pub mod dynamics;
pub mod error;
pub mod rewards;
pub mod rng;
pub mod sensing;
pub mod terrain;

pub use error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}
