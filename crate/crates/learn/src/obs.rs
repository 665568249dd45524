//! Fixed observation layouts for both phases.
//!
//! Phase 1: `proprio | scandots | sin,cos heading | W | v_cmd | z`.
//! Phase 2 swaps the scandot block for the depth latent; everything after it
//! keeps its relative order, so the policy backbone sees the same layout in
//! both phases with the scandots encoded to the latent width.

use parkour_core::dynamics::{Action, RobotState, ACTION_DIM, NUM_FEET};
use parkour_core::wrap_angle;
use serde::{Deserialize, Serialize};

use crate::error::{LearnError, Result};

/// Base velocity (body frame, 3), yaw, pitch, yaw rate, pitch rate, previous
/// action, contacts.
pub const PROPRIO_DIM: usize = 3 + 4 + ACTION_DIM + NUM_FEET;
pub const SCANDOT_DIM: usize = 132;
pub const LATENT_DIM: usize = 32;
pub const ENV_LATENT_DIM: usize = 8;
pub const HISTORY_LEN: usize = 20;
/// Oldest sensor reading a policy may act on, seconds.
pub const MAX_STALENESS: f64 = 0.3;
/// Scandot heights are clipped to this range before entering a network.
pub const SCANDOT_CLIP: (f64, f64) = (-1.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Teacher,
    Student,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::Teacher => 1,
            Phase::Student => 2,
        }
    }
}

/// Offsets of each block within an observation vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub extero: usize,
    pub heading: usize,
    pub walk: usize,
    pub v_cmd: usize,
    pub latent: usize,
    pub total: usize,
}

impl Layout {
    pub const fn for_phase(phase: Phase) -> Self {
        let ext = match phase {
            Phase::Teacher => SCANDOT_DIM,
            Phase::Student => LATENT_DIM,
        };
        let heading = PROPRIO_DIM + ext;
        Self {
            extero: PROPRIO_DIM,
            heading,
            walk: heading + 2,
            v_cmd: heading + 3,
            latent: heading + 4,
            total: heading + 4 + ENV_LATENT_DIM,
        }
    }

    pub fn extero_len(&self) -> usize {
        self.heading - self.extero
    }
}

pub const TEACHER: Layout = Layout::for_phase(Phase::Teacher);
pub const STUDENT: Layout = Layout::for_phase(Phase::Student);

/// What the policy is told about its heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadingObs {
    /// Yaw error toward the target, radians.
    Yaw(f64),
    /// Both slots zeroed.
    Masked,
}

impl HeadingObs {
    pub fn encode(self) -> [f64; 2] {
        match self {
            HeadingObs::Yaw(t) => {
                let t = wrap_angle(t);
                [t.sin(), t.cos()]
            }
            HeadingObs::Masked => [0.0, 0.0],
        }
    }
}

/// Proprioceptive reading as it would leave the sensors.
pub fn proprioception(state: &RobotState, prev_action: &Action) -> [f64; PROPRIO_DIM] {
    let (s, c) = state.yaw.sin_cos();
    let [vx, vy, vz] = state.base_vel;
    let mut p = [0.0; PROPRIO_DIM];
    p[0] = c * vx + s * vy;
    p[1] = -s * vx + c * vy;
    p[2] = vz;
    p[3] = wrap_angle(state.yaw);
    p[4] = state.pitch;
    p[5] = state.yaw_rate;
    p[6] = state.pitch_rate;
    p[7..7 + ACTION_DIM].copy_from_slice(&prev_action.clamped().0);
    for (i, &c) in state.contacts.iter().enumerate() {
        p[7 + ACTION_DIM + i] = if c { 1.0 } else { 0.0 };
    }
    p
}

/// Sensor payloads with the time they were measured.
#[derive(Clone, Debug)]
pub struct Sensors<'a> {
    pub proprio: &'a [f64],
    pub proprio_time: f64,
    /// Scandots (teacher) or depth latent (student).
    pub extero: &'a [f64],
    pub extero_time: f64,
    pub now: f64,
}

/// Episode-level inputs.
#[derive(Clone, Copy, Debug)]
pub struct CommandInputs<'a> {
    pub heading: HeadingObs,
    pub walk_flag: bool,
    pub v_cmd: f64,
    pub env_latent: &'a [f64],
}

/// Writes the observation for `phase` into a fresh vector.
///
/// Fails with [`LearnError::Stale`] when any sensor reading is older than
/// [`MAX_STALENESS`], which callers treat as an episode termination.
pub fn build_observation(phase: Phase, sensors: &Sensors<'_>, cmd: &CommandInputs<'_>) -> Result<Vec<f64>> {
    let layout = Layout::for_phase(phase);
    let age = (sensors.now - sensors.proprio_time).max(sensors.now - sensors.extero_time);
    if age > MAX_STALENESS + 1e-9 {
        return Err(LearnError::Stale(age));
    }
    if sensors.proprio.len() != PROPRIO_DIM
        || sensors.extero.len() != layout.extero_len()
        || cmd.env_latent.len() != ENV_LATENT_DIM
    {
        return Err(LearnError::Config(format!(
            "observation blocks have lengths {}/{}/{}, expected {PROPRIO_DIM}/{}/{ENV_LATENT_DIM}",
            sensors.proprio.len(),
            sensors.extero.len(),
            cmd.env_latent.len(),
            layout.extero_len()
        )));
    }
    let mut o = Vec::with_capacity(layout.total);
    o.extend_from_slice(sensors.proprio);
    match phase {
        Phase::Teacher => o.extend(sensors.extero.iter().map(|h| h.clamp(SCANDOT_CLIP.0, SCANDOT_CLIP.1))),
        Phase::Student => o.extend_from_slice(sensors.extero),
    }
    o.extend_from_slice(&cmd.heading.encode());
    o.push(if cmd.walk_flag { 1.0 } else { 0.0 });
    o.push(cmd.v_cmd);
    o.extend_from_slice(cmd.env_latent);
    debug_assert_eq!(o.len(), layout.total);
    Ok(o)
}
