//! Reward terms, waypoint heading targets and the MXD / MEV evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::dynamics::{forward_vector, Action, Command, RobotState, NUM_FEET};
use crate::error::{Error, Result};
use crate::terrain::{Heightfield, WaypointCourse};

/// Positive multipliers applied to each term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub tracking: f64,
    pub clearance: f64,
    pub stylized: f64,
    pub regularization: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { tracking: 1.5, clearance: 1.0, stylized: 1.0, regularization: 1.0 }
    }
}

impl RewardWeights {
    pub fn zero() -> Self {
        Self { tracking: 0.0, clearance: 0.0, stylized: 0.0, regularization: 0.0 }
    }
}

/// Generic smoothness penalties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub w_rate: f64,
    pub w_mag: f64,
    pub w_vz: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self { w_rate: 0.005, w_mag: 0.01, w_vz: 0.001 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub tracking: f64,
    pub clearance: f64,
    pub stylized: f64,
    pub regularization: f64,
    pub total: f64,
}

impl RewardTerms {
    pub fn compose(tracking: f64, clearance: f64, stylized: f64, regularization: f64, w: &RewardWeights) -> Self {
        let total = w.tracking * tracking
            + w.clearance * clearance
            + w.stylized * stylized
            + w.regularization * regularization;
        Self { tracking, clearance, stylized, regularization, total }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Episode length `T`, seconds.
    pub length: f64,
    pub v_cmd_range: (f64, f64),
    /// Probability that an episode samples `W = 1`.
    pub w_prob: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { length: 8.0, v_cmd_range: (0.6, 1.0), w_prob: 0.1 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) {
            return Err(Error::config("episode length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.w_prob) {
            return Err(Error::config("w_prob must lie in [0, 1]"));
        }
        let (lo, hi) = self.v_cmd_range;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::config("v_cmd_range must satisfy 0 <= min <= max"));
        }
        Ok(())
    }
}

/// How the velocity term is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    /// World-frame inner product with the waypoint direction.
    #[default]
    WorldInnerProduct,
    /// Forward speed along the body axis (the `noinner` ablation).
    BaseFrame,
}

/// Unit vector from the robot at `x` toward waypoint `p`.
pub fn waypoint_direction(p: [f64; 2], x: [f64; 2]) -> Result<[f64; 2]> {
    let (dx, dy) = (p[0] - x[0], p[1] - x[1]);
    let n = dx.hypot(dy);
    if n < 1e-6 {
        return Err(Error::DegenerateDirection(n));
    }
    Ok([dx / n, dy / n])
}

/// `min(<v, d>, v_cmd)`.
pub fn tracking_reward(v: [f64; 2], d: [f64; 2], v_cmd: f64) -> f64 {
    (v[0] * d[0] + v[1] * d[1]).min(v_cmd)
}

/// Forward speed in the base frame, capped at `v_cmd`.
pub fn base_frame_tracking(v: [f64; 2], yaw: f64, v_cmd: f64) -> f64 {
    let (s, c) = yaw.sin_cos();
    tracking_reward(v, [c, s], v_cmd)
}

/// `-sum_i c_i * M[p_i]`.
pub fn clearance_penalty(
    contacts: &[bool; NUM_FEET],
    feet_xy: &[[f64; 2]; NUM_FEET],
    edge: impl Fn(f64, f64) -> bool,
) -> f64 {
    -(contacts.iter().zip(feet_xy).filter(|(&c, p)| c && edge(p[0], p[1])).count() as f64)
}

/// `W * (0.5 <fwd, c> + 0.5)^2`.
pub fn stylized_reward(fwd: [f64; 3], c_hat: [f64; 3], walk_flag: bool) -> f64 {
    if !walk_flag {
        return 0.0;
    }
    let dot: f64 = fwd.iter().zip(&c_hat).map(|(a, b)| a * b).sum();
    (0.5 * dot + 0.5).powi(2)
}

pub fn regularization_penalty(prev_action: &Action, action: &Action, base_vel: [f64; 3], cfg: &RegularizationConfig) -> f64 {
    let rate: f64 = prev_action.0.iter().zip(&action.0).map(|(a, b)| (b - a).powi(2)).sum();
    let mag: f64 = action.0.iter().map(|a| a * a).sum();
    -(cfg.w_rate * rate + cfg.w_mag * mag + cfg.w_vz * base_vel[2] * base_vel[2])
}

/// Current heading target along a course.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointTracker {
    /// Index of the waypoint being steered toward.
    pub target: usize,
    /// Highest waypoint index reached so far.
    pub reached: usize,
    pub radius: f64,
}

/// Distance at which a waypoint counts as reached.
pub const WAYPOINT_RADIUS: f64 = 0.3;

impl WaypointTracker {
    /// Starts at waypoint `start` (already reached) heading for `start + 1`.
    pub fn new(start: usize, radius: f64) -> Self {
        Self { target: start + 1, reached: start, radius }
    }

    pub fn finished(&self, course: &WaypointCourse) -> bool {
        self.target >= course.waypoints.len()
    }

    /// Marks waypoints within `radius` of `pos` as reached; returns how many were passed.
    pub fn advance(&mut self, course: &WaypointCourse, pos: [f64; 2]) -> usize {
        let mut n = 0;
        while let Some(w) = course.waypoints.get(self.target) {
            if (w[0] - pos[0]).hypot(w[1] - pos[1]) >= self.radius {
                break;
            }
            self.reached = self.target;
            self.target += 1;
            n += 1;
        }
        n
    }

    /// Direction toward the current target; past the end, the last leg's direction.
    pub fn direction(&self, course: &WaypointCourse, pos: [f64; 2]) -> Result<[f64; 2]> {
        let w = &course.waypoints;
        match w.get(self.target) {
            Some(p) => waypoint_direction([p[0], p[1]], pos),
            None => {
                let (a, b) = (w[w.len() - 2], w[w.len() - 1]);
                waypoint_direction([b[0], b[1]], [a[0], a[1]])
            }
        }
    }
}

/// Per-step reward context that does not change within an episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub regularization: RegularizationConfig,
    pub tracking_mode: TrackingMode,
}

/// Evaluates every term for the transition into `state`, advancing the
/// waypoint target first when it has been reached.
pub fn total_reward(
    state: &RobotState,
    prev_action: &Action,
    action: &Action,
    command: &Command,
    course: &WaypointCourse,
    hf: &Heightfield,
    tracker: &mut WaypointTracker,
    cfg: &RewardConfig,
) -> Result<RewardTerms> {
    let pos = [state.base_pos[0], state.base_pos[1]];
    tracker.advance(course, pos);
    let d = tracker.direction(course, pos)?;
    let v = [state.base_vel[0], state.base_vel[1]];
    let tracking = match cfg.tracking_mode {
        TrackingMode::WorldInnerProduct => tracking_reward(v, d, command.v_cmd),
        TrackingMode::BaseFrame => base_frame_tracking(v, state.yaw, command.v_cmd),
    };
    let feet_xy = state.feet.map(|f| [f[0], f[1]]);
    let clearance = clearance_penalty(&state.contacts, &feet_xy, |x, y| hf.edge_at(x, y));
    let stylized = stylized_reward(forward_vector(state), command.c_hat, command.walk_flag);
    let regularization = regularization_penalty(prev_action, action, state.base_vel, &cfg.regularization);
    Ok(RewardTerms::compose(tracking, clearance, stylized, regularization, &cfg.weights))
}

/// What one robot did during an evaluation rollout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotTrace {
    /// Highest waypoint index reached before the rollout ended.
    pub max_waypoint: usize,
    /// Feet in contact with edge cells, one entry per simulated step.
    pub edge_contacts: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mxd_mean: f64,
    pub mxd_std: f64,
    pub mev_mean: f64,
    pub mev_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// MXD: waypoint progress normalised to `[0, 1]`; MEV: feet on edges per step.
/// Both are averaged per robot first; the spreads are across robots.
pub fn compute_metrics(traces: &[RobotTrace], course: &WaypointCourse) -> Result<Metrics> {
    if traces.is_empty() {
        return Err(Error::config("cannot compute metrics over an empty batch"));
    }
    let last = (course.waypoints.len() - 1).max(1) as f64;
    let mxd: Vec<f64> = traces.iter().map(|t| (t.max_waypoint as f64 / last).min(1.0)).collect();
    let mev: Vec<f64> = traces
        .iter()
        .map(|t| {
            if t.edge_contacts.is_empty() {
                0.0
            } else {
                t.edge_contacts.iter().map(|&c| c as f64).sum::<f64>() / t.edge_contacts.len() as f64
            }
        })
        .collect();
    let (mxd_mean, mxd_std) = mean_std(&mxd);
    let (mev_mean, mev_std) = mean_std(&mev);
    Ok(Metrics { mxd_mean, mxd_std, mev_mean, mev_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{standing_state, DynamicsConfig};
    use crate::terrain::{arrange_course, CourseSpec, TerrainKind, CELL_SIZE};

    #[test]
    fn direction_examples() {
        assert_eq!(waypoint_direction([2.0, 0.0], [0.0, 0.0]).unwrap(), [1.0, 0.0]);
        let d = waypoint_direction([1.0, 1.0], [0.0, 0.0]).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!((d[0] - h).abs() < 1e-15 && (d[1] - h).abs() < 1e-15);
        assert!(matches!(waypoint_direction([0.5, 0.5], [0.5, 0.5]), Err(Error::DegenerateDirection(_))));
    }

    #[test]
    fn tracking_examples() {
        assert_eq!(tracking_reward([1.0, 0.0], [1.0, 0.0], 0.5), 0.5);
        assert!((tracking_reward([0.3, 0.4], [0.6, 0.8], 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(tracking_reward([-1.0, 0.0], [1.0, 0.0], 1.0), -1.0);
    }

    #[test]
    fn base_frame_ignores_waypoints() {
        // walking sideways relative to the waypoint still scores in the base frame
        let r = base_frame_tracking([0.0, 1.0], std::f64::consts::FRAC_PI_2, 2.0);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clearance_examples() {
        let feet = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert_eq!(clearance_penalty(&[false; 4], &feet, |_, _| true), 0.0);
        assert_eq!(clearance_penalty(&[true; 4], &feet, |_, _| true), -4.0);
        assert_eq!(clearance_penalty(&[true, true, false, false], &feet, |x, _| x < 0.5), -1.0);
    }

    #[test]
    fn clearance_on_a_real_mask() {
        // a 0.5 m step at x = 1.0: mask covers |x - 1.0| <= 0.05
        let (nx, ny) = (81, 9);
        let mut h = Vec::new();
        for ix in 0..nx {
            for _ in 0..ny {
                h.push(if ix >= 40 { 0.5 } else { 0.0 });
            }
        }
        let hf = Heightfield::new(CELL_SIZE, nx, ny, [0.0, 0.0], h).unwrap();
        // oracle: an edge cell is within 0.05 of the x = 1.0 column
        let oracle = |x: f64, _y: f64| ((x / CELL_SIZE).round() * CELL_SIZE - 1.0).abs() <= 0.05 + 1e-9;
        let feet = [[0.96, 0.1], [0.5, 0.1], [1.02, 0.1], [1.5, 0.1]];
        let contacts = [true, true, false, false];
        let expected = -(feet.iter().zip(&contacts).filter(|(p, &c)| c && oracle(p[0], p[1])).count() as f64);
        assert_eq!(expected, -1.0);
        assert_eq!(clearance_penalty(&contacts, &feet, |x, y| hf.edge_at(x, y)), expected);
    }

    #[test]
    fn stylized_examples() {
        let down = Command::HANDSTAND;
        assert_eq!(stylized_reward(down, down, false), 0.0);
        assert_eq!(stylized_reward(down, down, true), 1.0);
        assert_eq!(stylized_reward([1.0, 0.0, 0.0], down, true), 0.25);
        assert_eq!(stylized_reward([0.0, 0.0, 1.0], down, true), 0.0);
    }

    #[test]
    fn regularization_examples() {
        let cfg = RegularizationConfig { w_rate: 0.3, w_mag: 0.1, w_vz: 0.2 };
        let zero = Action::default();
        assert_eq!(regularization_penalty(&zero, &zero, [0.0; 3], &cfg), 0.0);
        let mut unit = Action::default();
        unit.0[4] = 1.0;
        assert!((regularization_penalty(&unit, &unit, [0.0; 3], &cfg) + 0.1).abs() < 1e-15);
        let prev = Action([0.1, -0.2, 0.3, 0.0, 0.5, 0.2, -0.1, 0.0, 0.3, 0.1, 0.2, -0.4]);
        let act = Action([0.2, 0.1, -0.3, 0.4, 0.0, 0.1, 0.3, -0.2, 0.1, 0.0, 0.5, 0.2]);
        let v = [0.4, -0.2, 0.7];
        let base = regularization_penalty(&prev, &act, v, &cfg);
        let doubled = regularization_penalty(&Action(prev.0.map(|x| 2.0 * x)), &Action(act.0.map(|x| 2.0 * x)), v.map(|x| 2.0 * x), &cfg);
        assert!((doubled - 4.0 * base).abs() < 1e-12);
    }

    fn course_and_state() -> (Heightfield, WaypointCourse, RobotState) {
        let (hf, course) = arrange_course(&CourseSpec::new(vec![TerrainKind::Hurdle], 1)).unwrap();
        let w = course.waypoints[0];
        let s = standing_state(&hf, w[0], w[1], 0.0, &DynamicsConfig::default());
        (hf, course, s)
    }

    #[test]
    fn standing_still_scores_only_regularization() {
        let (hf, course, s) = course_and_state();
        let cfg = RewardConfig::default();
        let mut tracker = WaypointTracker::new(0, WAYPOINT_RADIUS);
        let a = Action::default();
        let t = total_reward(&s, &a, &a, &Command::new(1.0, 0.0, false), &course, &hf, &mut tracker, &cfg).unwrap();
        assert_eq!((t.tracking, t.clearance, t.stylized), (0.0, 0.0, 0.0));
        assert_eq!(t.total, t.regularization * cfg.weights.regularization);
    }

    #[test]
    fn zero_weights_zero_total() {
        let (hf, course, mut s) = course_and_state();
        s.base_vel = [0.9, 0.1, 0.3];
        let cfg = RewardConfig { weights: RewardWeights::zero(), ..Default::default() };
        let mut tracker = WaypointTracker::new(0, WAYPOINT_RADIUS);
        let a = Action([0.5; 12]);
        let t = total_reward(&s, &Action::default(), &a, &Command::new(1.0, 0.0, true), &course, &hf, &mut tracker, &cfg).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn hand_composed_scenario() {
        let (hf, course, mut s) = course_and_state();
        // moving straight at the next waypoint at exactly v_cmd, one foot on an edge cell
        let next = course.waypoints[1];
        s.base_pos[1] = next[1];
        s.base_vel = [0.8, 0.0, 0.0];
        let mut edge_cell = None;
        'outer: for ix in 0..hf.nx() {
            for iy in 0..hf.ny() {
                if hf.is_edge(ix, iy) {
                    edge_cell = Some(hf.cell_center(ix, iy));
                    break 'outer;
                }
            }
        }
        let (ex, ey) = edge_cell.unwrap();
        s.feet[0] = [ex, ey, hf.height_at(ex, ey)];
        s.contacts = [true, false, false, false];
        let cfg = RewardConfig::default();
        let mut tracker = WaypointTracker::new(0, WAYPOINT_RADIUS);
        let a = Action::default();
        let t = total_reward(&s, &a, &a, &Command::new(0.8, 0.0, false), &course, &hf, &mut tracker, &cfg).unwrap();
        let expected = 1.5 * 0.8 - 1.0 * 1.0;
        assert!((t.total - expected).abs() < 1e-12, "{t:?}");
    }

    #[test]
    fn tracker_advances_before_direction() {
        let (_, course, _) = course_and_state();
        let mut tracker = WaypointTracker::new(0, WAYPOINT_RADIUS);
        let w1 = course.waypoints[1];
        let pos = [w1[0] - 0.1, w1[1]];
        tracker.advance(&course, pos);
        assert_eq!((tracker.reached, tracker.target), (1, 2));
        let d = tracker.direction(&course, pos).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_examples() {
        let (_, course, _) = course_and_state();
        let last = course.waypoints.len() - 1;
        let done = vec![RobotTrace { max_waypoint: last, edge_contacts: vec![0; 5] }; 4];
        assert_eq!(compute_metrics(&done, &course).unwrap().mxd_mean, 1.0);
        let idle = vec![RobotTrace { max_waypoint: 0, edge_contacts: vec![0; 5] }; 3];
        let m = compute_metrics(&idle, &course).unwrap();
        assert_eq!((m.mxd_mean, m.mev_mean), (0.0, 0.0));
        let mut contacts = vec![0u8; 10];
        contacts[3] = 1;
        contacts[7] = 1;
        let one = [RobotTrace { max_waypoint: 0, edge_contacts: contacts }];
        assert!((compute_metrics(&one, &course).unwrap().mev_mean - 0.2).abs() < 1e-15);
        assert!(compute_metrics(&[], &course).is_err());
    }
}
