//! Reduced-order quadruped: a rigid base with yaw and pitch, four point feet,
//! velocity-tracking ground impulses while supported and ballistic flight
//! otherwise.
//!
//! While any foot is in contact the ground pushes the base toward the
//! commanded forward speed (friction-limited) and legs hold the base at stance
//! height above the highest ground under the feet. A positive flight trigger
//! launches the base with a vertical impulse. A foot that would move onto
//! ground more than `step_max` above it, or terrain rising into the belly,
//! blocks horizontal motion for that step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::terrain::{Heightfield, WaypointCourse};

pub const NUM_FEET: usize = 4;
pub const ACTION_DIM: usize = 12;
/// Foot order.
pub const FOOT_NAMES: [&str; NUM_FEET] = ["FL", "FR", "RL", "RR"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub dt: f64,
    pub gravity: f64,
    pub contact_eps: f64,
    /// Nominal thigh-joint height when standing.
    pub nominal_height: f64,
    /// Front-to-rear foot spacing.
    pub body_length: f64,
    /// Left-to-right foot spacing.
    pub stance_width: f64,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    pub max_pitch_rate: f64,
    /// Fraction of the rate error closed each step.
    pub rate_gain: f64,
    pub pitch_limits: (f64, f64),
    pub foot_dx_scale: f64,
    pub foot_dz_scale: f64,
    /// Largest vertical launch speed a full trigger produces at unit mass.
    pub impulse_max: f64,
    /// Tallest rise a foot can step onto without being blocked.
    pub step_max: f64,
    /// Clearance below the base that terrain may not rise into.
    pub body_clearance: f64,
    /// How fast the legs re-level the base while supported, m/s.
    pub settle_speed: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            gravity: 9.81,
            contact_eps: 0.02,
            nominal_height: 0.26,
            body_length: 0.40,
            stance_width: 0.24,
            max_speed: 2.0,
            max_yaw_rate: 2.0,
            max_pitch_rate: 3.0,
            rate_gain: 0.4,
            pitch_limits: (-0.6, std::f64::consts::FRAC_PI_2),
            foot_dx_scale: 0.08,
            foot_dz_scale: 0.06,
            impulse_max: 2.6,
            step_max: 0.12,
            body_clearance: 0.05,
            settle_speed: 1.5,
        }
    }
}

/// Per-episode physical parameters; privileged information for the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvFactors {
    /// Friction coefficient.
    pub friction: f64,
    pub mass_scale: f64,
    /// Magnitude of random horizontal velocity kicks, m/s.
    pub push_magnitude: f64,
}

impl Default for EnvFactors {
    fn default() -> Self {
        Self { friction: 1.0, mass_scale: 1.0, push_magnitude: 0.0 }
    }
}

impl EnvFactors {
    pub const DIM: usize = 3;

    pub fn to_array(self) -> [f64; 3] {
        [self.friction, self.mass_scale, self.push_magnitude]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base_pos: [f64; 3],
    pub base_vel: [f64; 3],
    pub yaw: f64,
    /// Nose-down positive.
    pub pitch: f64,
    pub yaw_rate: f64,
    pub pitch_rate: f64,
    pub feet: [[f64; 3]; NUM_FEET],
    pub contacts: [bool; NUM_FEET],
    pub time: f64,
}

impl RobotState {
    pub fn is_finite(&self) -> bool {
        self.base_pos.iter().chain(&self.base_vel).chain(self.feet.iter().flatten()).all(|v| v.is_finite())
            && [self.yaw, self.pitch, self.yaw_rate, self.pitch_rate, self.time].iter().all(|v| v.is_finite())
    }

    pub fn supported(&self) -> bool {
        self.contacts.iter().any(|&c| c)
    }

    /// Translational kinetic energy per unit mass.
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.base_vel.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Twelve normalised controls: per-foot `(dx, dz)` target offsets for FL, FR,
/// RL, RR, then yaw-rate, pitch-rate, push gain (forward speed) and flight trigger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub const YAW_RATE: usize = 8;
    pub const PITCH_RATE: usize = 9;
    pub const PUSH: usize = 10;
    pub const TRIGGER: usize = 11;

    pub fn from_slice(v: &[f64]) -> Self {
        let mut a = [0.0; ACTION_DIM];
        a.copy_from_slice(&v[..ACTION_DIM]);
        Self(a)
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// What the robot is asked to do.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Command {
    /// Desired speed along the heading direction, m/s.
    pub v_cmd: f64,
    /// Target yaw, radians.
    pub heading: f64,
    /// Stylised-walk switch.
    pub walk_flag: bool,
    /// Desired body-forward direction for the stylised reward.
    pub c_hat: [f64; 3],
}

impl Command {
    /// Handstand direction: body forward pointing straight down.
    pub const HANDSTAND: [f64; 3] = [0.0, 0.0, -1.0];

    pub fn new(v_cmd: f64, heading: f64, walk_flag: bool) -> Self {
        Self { v_cmd, heading, walk_flag, c_hat: Self::HANDSTAND }
    }
}

/// Body forward axis `(cos yaw cos pitch, sin yaw cos pitch, -sin pitch)`.
pub fn forward_vector(state: &RobotState) -> [f64; 3] {
    let (sy, cy) = state.yaw.sin_cos();
    let (sp, cp) = state.pitch.sin_cos();
    [cy * cp, sy * cp, -sp]
}

/// `contact[i]` iff foot `i` is within `eps` of (or below) the terrain.
pub fn detect_contacts(feet: &[[f64; 3]; NUM_FEET], hf: &Heightfield, eps: f64) -> [bool; NUM_FEET] {
    feet.map(|f| f[2] <= hf.height_at(f[0], f[1]) + eps)
}

/// Rotates a body-frame offset by pitch (nose down) then yaw.
fn body_to_world(v: [f64; 3], yaw: f64, pitch: f64) -> [f64; 3] {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (x, z) = (cp * v[0] + sp * v[2], -sp * v[0] + cp * v[2]);
    [cy * x - sy * v[1], sy * x + cy * v[1], z]
}

impl DynamicsConfig {
    /// Nominal body-frame foot offsets (FL, FR, RL, RR), before any action.
    pub fn nominal_feet(&self) -> [[f64; 3]; NUM_FEET] {
        let (l, w, h) = (self.body_length / 2.0, self.stance_width / 2.0, self.nominal_height);
        [[l, w, -h], [l, -w, -h], [-l, w, -h], [-l, -w, -h]]
    }

    /// Base height that puts the lowest nominal foot on the highest ground under the feet.
    fn stance_height(&self, hf: &Heightfield, xy: [f64; 2], yaw: f64, pitch: f64) -> f64 {
        let mut ground = f64::NEG_INFINITY;
        let mut lowest = f64::INFINITY;
        for n in self.nominal_feet() {
            let o = body_to_world(n, yaw, pitch);
            ground = ground.max(hf.height_nearest(xy[0] + o[0], xy[1] + o[1]));
            lowest = lowest.min(o[2]);
        }
        ground - lowest
    }

    fn place_feet(&self, hf: &Heightfield, pos: [f64; 3], yaw: f64, pitch: f64, action: &Action) -> [[f64; 3]; NUM_FEET] {
        let nominal = self.nominal_feet();
        std::array::from_fn(|i| {
            let n = nominal[i];
            let local = [
                n[0] + action.0[2 * i] * self.foot_dx_scale,
                n[1],
                n[2] + action.0[2 * i + 1] * self.foot_dz_scale,
            ];
            let o = body_to_world(local, yaw, pitch);
            let (x, y) = (pos[0] + o[0], pos[1] + o[1]);
            [x, y, (pos[2] + o[2]).max(hf.height_at(x, y))]
        })
    }
}

/// Advances the robot by one control period `cfg.dt`.
pub fn step(
    state: &RobotState,
    action: &Action,
    hf: &Heightfield,
    factors: &EnvFactors,
    cfg: &DynamicsConfig,
) -> Result<RobotState> {
    if !state.is_finite() || !action.is_finite() {
        return Err(Error::contract("non-finite robot state or action"));
    }
    let a = action.clamped();
    let dt = cfg.dt;
    let supported = state.supported();

    let yaw_rate = state.yaw_rate + cfg.rate_gain * (a.0[Action::YAW_RATE] * cfg.max_yaw_rate - state.yaw_rate);
    let mut pitch_rate =
        state.pitch_rate + cfg.rate_gain * (a.0[Action::PITCH_RATE] * cfg.max_pitch_rate - state.pitch_rate);
    let yaw = state.yaw + yaw_rate * dt;
    let mut pitch = state.pitch + pitch_rate * dt;
    let (lo, hi) = cfg.pitch_limits;
    if pitch < lo || pitch > hi {
        pitch = pitch.clamp(lo, hi);
        pitch_rate = 0.0;
    }

    let [mut vx, mut vy, mut vz] = state.base_vel;
    let mut jumping = false;
    if supported {
        let speed = a.0[Action::PUSH] * cfg.max_speed;
        let (s, c) = yaw.sin_cos();
        let (dvx, dvy) = (c * speed - vx, s * speed - vy);
        let dv = dvx.hypot(dvy);
        let limit = factors.friction * cfg.gravity * dt;
        let k = if dv > limit { limit / dv } else { 1.0 };
        vx += k * dvx;
        vy += k * dvy;
        let trigger = a.0[Action::TRIGGER];
        if trigger > 0.0 {
            jumping = true;
            vz = trigger * cfg.impulse_max / factors.mass_scale.max(1e-3);
        } else {
            vz = 0.0;
        }
    } else {
        vz -= cfg.gravity * dt;
    }

    let old = state.base_pos;
    let mut pos = [old[0] + vx * dt, old[1] + vy * dt, old[2]];
    pos[2] = if supported && !jumping {
        let target = cfg.stance_height(hf, [pos[0], pos[1]], yaw, pitch);
        let max_dz = cfg.settle_speed * dt;
        old[2] + (target - old[2]).clamp(-max_dz, max_dz)
    } else {
        old[2] + vz * dt
    };

    let probe = cfg.place_feet(hf, pos, yaw, pitch, &a);
    // blocking works on the column terrain so interpolated edges cannot be climbed
    let foot_blocked = probe.iter().zip(&state.feet).zip(&state.contacts).any(|((new, prev), &contact)| {
        let level = if contact { hf.height_nearest(prev[0], prev[1]) } else { prev[2] };
        hf.height_nearest(new[0], new[1]) > level + cfg.step_max
    });
    let under = hf.height_nearest(pos[0], pos[1]);
    let belly_blocked = under > pos[2] - cfg.body_clearance && under > hf.height_nearest(old[0], old[1]);
    if foot_blocked || belly_blocked {
        pos[0] = old[0];
        pos[1] = old[1];
        vx = 0.0;
        vy = 0.0;
    }

    let feet = cfg.place_feet(hf, pos, yaw, pitch, &a);
    let contacts = detect_contacts(&feet, hf, cfg.contact_eps);
    Ok(RobotState {
        base_pos: pos,
        base_vel: [vx, vy, vz],
        yaw,
        pitch,
        yaw_rate,
        pitch_rate,
        feet,
        contacts,
        time: state.time + dt,
    })
}

/// Spawn randomisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpawnConfig {
    /// Lateral offset drawn from `[-lateral_range, lateral_range]`.
    pub lateral_range: f64,
    pub yaw_range: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self { lateral_range: 0.2, yaw_range: 0.3 }
    }
}

impl SpawnConfig {
    pub fn none() -> Self {
        Self { lateral_range: 0.0, yaw_range: 0.0 }
    }
}

/// Robot standing at a given planar pose in nominal stance.
pub fn standing_state(hf: &Heightfield, x: f64, y: f64, yaw: f64, cfg: &DynamicsConfig) -> RobotState {
    let z = cfg.stance_height(hf, [x, y], yaw, 0.0);
    let pos = [x, y, z];
    let feet = cfg.place_feet(hf, pos, yaw, 0.0, &Action::default());
    let contacts = detect_contacts(&feet, hf, cfg.contact_eps);
    RobotState {
        base_pos: pos,
        base_vel: [0.0; 3],
        yaw,
        pitch: 0.0,
        yaw_rate: 0.0,
        pitch_rate: 0.0,
        feet,
        contacts,
        time: 0.0,
    }
}

/// Spawns at the first waypoint of `level`.
pub fn reset(
    hf: &Heightfield,
    course: &WaypointCourse,
    level: usize,
    seed: u64,
    spawn: &SpawnConfig,
    cfg: &DynamicsConfig,
) -> Result<RobotState> {
    if level >= course.difficulty_levels {
        return Err(Error::config(format!(
            "level {level} out of range for a course with {} levels",
            course.difficulty_levels
        )));
    }
    let mut rng = rng::stream(seed, 0x5ba7);
    let mut uniform = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let dy = uniform(spawn.lateral_range);
    let yaw = uniform(spawn.yaw_range);
    let w = course.waypoints[course.level_starts[level]];
    Ok(standing_state(hf, w[0], w[1] + dy, yaw, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{arrange_course, generate_terrain, CourseSpec, TerrainKind, TerrainSpec, CELL_SIZE};
    use std::f64::consts::FRAC_PI_2;

    fn flat() -> Heightfield {
        Heightfield::flat(0.0, 20.0, 4.0, [-10.0, -2.0]).unwrap()
    }

    fn airborne(vel: [f64; 3]) -> RobotState {
        let cfg = DynamicsConfig::default();
        let mut s = standing_state(&flat(), 0.0, 0.0, 0.0, &cfg);
        s.base_pos[2] = 3.0;
        for f in &mut s.feet {
            f[2] += 3.0;
        }
        s.contacts = [false; 4];
        s.base_vel = vel;
        s
    }

    #[test]
    fn ballistic_vertical_velocity() {
        let cfg = DynamicsConfig::default();
        let s = airborne([2.0, 0.0, 1.0]);
        let next = step(&s, &Action::default(), &flat(), &EnvFactors::default(), &cfg).unwrap();
        assert!((next.base_vel[2] - 0.8038).abs() < 1e-12);
        assert_eq!(next.base_vel[0], 2.0);
    }

    #[test]
    fn standing_still_stays_put() {
        let cfg = DynamicsConfig::default();
        let hf = flat();
        let mut s = standing_state(&hf, 0.0, 0.0, 0.0, &cfg);
        let z0 = s.base_pos[2];
        for _ in 0..100 {
            s = step(&s, &Action::default(), &hf, &EnvFactors::default(), &cfg).unwrap();
        }
        assert!((s.base_pos[2] - z0).abs() <= cfg.contact_eps);
        assert_eq!(s.contacts, [true; 4]);
        assert!((z0 - 0.26).abs() < 1e-12);
    }

    #[test]
    fn nan_rejected() {
        let cfg = DynamicsConfig::default();
        let mut a = Action::default();
        a.0[3] = f64::NAN;
        let s = standing_state(&flat(), 0.0, 0.0, 0.0, &cfg);
        assert!(matches!(step(&s, &a, &flat(), &EnvFactors::default(), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn contacts_by_height() {
        let hf = flat();
        let on = [[0.0, 0.0, 0.0]; 4];
        assert_eq!(detect_contacts(&on, &hf, 0.01), [true; 4]);
        let above = [[0.0, 0.0, 0.1]; 4];
        assert_eq!(detect_contacts(&above, &hf, 0.01), [false; 4]);
    }

    #[test]
    fn front_feet_on_step() {
        // 0.5 m box starting at x = 1.0
        let (nx, ny) = (121, 41);
        let mut h = Vec::new();
        for ix in 0..nx {
            for _ in 0..ny {
                h.push(if ix as f64 * CELL_SIZE >= 1.0 - 1e-9 { 0.5 } else { 0.0 });
            }
        }
        let hf = Heightfield::new(CELL_SIZE, nx, ny, [0.0, -0.5], h).unwrap();
        let feet = [[1.2, 0.1, 0.5], [1.2, -0.1, 0.5], [0.8, 0.1, 0.25], [0.8, -0.1, 0.25]];
        assert_eq!(detect_contacts(&feet, &hf, 0.02), [true, true, false, false]);
    }

    #[test]
    fn forward_vectors() {
        let mut s = standing_state(&flat(), 0.0, 0.0, 0.0, &DynamicsConfig::default());
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(forward_vector(&s), [1.0, 0.0, 0.0]));
        s.pitch = FRAC_PI_2;
        assert!(close(forward_vector(&s), [0.0, 0.0, -1.0]));
        s.pitch = 0.0;
        s.yaw = FRAC_PI_2;
        assert!(close(forward_vector(&s), [0.0, 1.0, 0.0]));
    }

    #[test]
    fn reset_rules() {
        let cfg = DynamicsConfig::default();
        let (hf, course) = arrange_course(&CourseSpec::new(vec![TerrainKind::Hurdle], 3)).unwrap();
        let s = reset(&hf, &course, 0, 1, &SpawnConfig::none(), &cfg).unwrap();
        assert_eq!(s.base_pos[0], course.waypoints[0][0]);
        assert_eq!(s.base_pos[1], course.waypoints[0][1]);
        assert_eq!(s.yaw, 0.0);
        let spawn = SpawnConfig::default();
        assert_eq!(reset(&hf, &course, 2, 9, &spawn, &cfg).unwrap(), reset(&hf, &course, 2, 9, &spawn, &cfg).unwrap());
        assert!(matches!(reset(&hf, &course, 3, 0, &spawn, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn reset_yaw_range() {
        let cfg = DynamicsConfig::default();
        let (hf, course) = arrange_course(&CourseSpec::new(vec![TerrainKind::Flat], 1)).unwrap();
        let spawn = SpawnConfig { lateral_range: 0.0, yaw_range: 0.3 };
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for seed in 0..10_000 {
            let yaw = reset(&hf, &course, 0, seed, &spawn, &cfg).unwrap().yaw;
            lo = lo.min(yaw);
            hi = hi.max(yaw);
        }
        assert!(lo >= -0.3 && hi <= 0.3);
        assert!(lo < -0.29 && hi > 0.29);
    }

    #[test]
    fn walks_forward_and_jumps() {
        let cfg = DynamicsConfig::default();
        let hf = flat();
        let mut s = standing_state(&hf, 0.0, 0.0, 0.0, &cfg);
        let mut a = Action::default();
        a.0[Action::PUSH] = 0.5;
        for _ in 0..50 {
            s = step(&s, &a, &hf, &EnvFactors::default(), &cfg).unwrap();
        }
        assert!((s.base_vel[0] - 1.0).abs() < 1e-9);
        a.0[Action::TRIGGER] = 1.0;
        s = step(&s, &a, &hf, &EnvFactors::default(), &cfg).unwrap();
        assert!(!s.supported());
        assert!(s.base_vel[2] > 2.0);
    }

    #[test]
    fn tall_hurdle_blocks_walking() {
        let cfg = DynamicsConfig::default();
        let (hf, course) = arrange_course(&CourseSpec {
            kinds: vec![TerrainKind::Hurdle],
            levels: 1,
            max_difficulty: 0.0,
            ..CourseSpec::default()
        })
        .unwrap();
        // 0.1 m hurdle: walkable
        let mut s = reset(&hf, &course, 0, 0, &SpawnConfig::none(), &cfg).unwrap();
        let mut a = Action::default();
        a.0[Action::PUSH] = 0.5;
        for _ in 0..300 {
            s = step(&s, &a, &hf, &EnvFactors::default(), &cfg).unwrap();
        }
        assert!(s.base_pos[0] > course.waypoints[2][0]);

        let (hf, course) = generate_terrain(&TerrainSpec::new(TerrainKind::Hurdle, 0.5, 0)).unwrap();
        let mut s = reset(&hf, &course, 0, 0, &SpawnConfig::none(), &cfg).unwrap();
        for _ in 0..300 {
            s = step(&s, &a, &hf, &EnvFactors::default(), &cfg).unwrap();
        }
        assert!(s.base_pos[0] < course.waypoints[2][0], "walked through a 0.3 m hurdle");
    }
}
