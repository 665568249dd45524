//! Batch evaluation: every robot starts at the beginning of the course and
//! runs until it falls, finishes or the time budget is spent.

use parkour_core::dynamics::{Action, EnvFactors, ACTION_DIM};
use parkour_core::rewards::{compute_metrics, Metrics, RobotTrace};
use parkour_core::sensing::DepthImage;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, ParkourEnv, Variant};
use crate::error::Result;
use crate::obs::TEACHER;
use crate::policy::TeacherNets;

/// Chooses deterministic actions for the listed robots.
pub trait Controller {
    /// Called once after the environment is reset.
    fn begin(&mut self, env: &ParkourEnv) -> Result<()>;
    fn act(&mut self, env: &mut ParkourEnv, robots: &[usize]) -> Result<Vec<Action>>;
}

/// Teacher acting on clean (or noisy, per variant) scandots with oracle headings.
pub struct TeacherController<'a> {
    pub nets: &'a TeacherNets,
}

impl Controller for TeacherController<'_> {
    fn begin(&mut self, _env: &ParkourEnv) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, env: &mut ParkourEnv, robots: &[usize]) -> Result<Vec<Action>> {
        let mut obs = Vec::with_capacity(robots.len() * TEACHER.total);
        let mut factors = Vec::with_capacity(robots.len() * EnvFactors::DIM);
        for &i in robots {
            obs.extend(env.teacher_obs(i)?);
            factors.extend(env.factors(i));
        }
        let mean = self.nets.act(&obs, &factors, robots.len());
        Ok(mean.chunks_exact(ACTION_DIM).map(Action::from_slice).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub robots: usize,
    /// Seconds per robot.
    pub duration: f64,
    pub seed: u64,
    pub record_trajectories: bool,
    /// Keep the depth frames robot 0 receives.
    pub record_depth: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { robots: 256, duration: 30.0, seed: 0, record_trajectories: false, record_depth: false }
    }
}

/// One robot at one step, for trajectory dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub robot: usize,
    pub t: f64,
    pub pos: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub feet: [[f64; 3]; 4],
    pub contacts: [bool; 4],
    /// Weighted reward of this step.
    pub reward: f64,
    pub level: usize,
    pub waypoint: usize,
    pub edge_contacts: u8,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub metrics: Metrics,
    pub traces: Vec<RobotTrace>,
    pub trajectory: Vec<TraceRecord>,
    pub depth_frames: Vec<DepthImage>,
}

pub fn evaluate(
    controller: &mut dyn Controller,
    hf: &parkour_core::terrain::Heightfield,
    course: &parkour_core::terrain::WaypointCourse,
    env_cfg: &EnvConfig,
    variant: Variant,
    depth: bool,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let mut cfg = env_cfg.clone();
    cfg.episode.length = settings.duration;
    let mut env = ParkourEnv::new(hf.clone(), course.clone(), cfg, variant, settings.robots, settings.seed, false, depth)?;
    env.auto_reset = false;
    controller.begin(&env)?;
    let steps = (settings.duration / env.cfg.dynamics.dt).round() as usize;
    let mut traces = vec![RobotTrace::default(); settings.robots];
    let mut active: Vec<usize> = (0..settings.robots).collect();
    let mut trajectory = Vec::new();
    let mut depth_frames = Vec::new();
    let mut last_seq = None;
    for _ in 0..steps {
        if active.is_empty() {
            break;
        }
        let actions = controller.act(&mut env, &active)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, a) in active.iter().zip(&actions) {
            let out = env.step(i, a)?;
            let r = &env.robots[i];
            traces[i].edge_contacts.push(out.edge_contacts);
            traces[i].max_waypoint = traces[i].max_waypoint.max(r.tracker.reached);
            if settings.record_trajectories {
                trajectory.push(TraceRecord {
                    robot: i,
                    t: r.elapsed,
                    pos: r.state.base_pos,
                    yaw: r.state.yaw,
                    pitch: r.state.pitch,
                    feet: r.state.feet,
                    contacts: r.state.contacts,
                    reward: out.reward.total,
                    level: r.level,
                    waypoint: r.tracker.reached,
                    edge_contacts: out.edge_contacts,
                });
            }
            if settings.record_depth && i == 0 {
                if let Some(f) = &r.frame {
                    if last_seq != Some(f.seq) {
                        last_seq = Some(f.seq);
                        depth_frames.push(f.image.clone());
                    }
                }
            }
            if out.end.is_none() {
                still.push(i);
            }
        }
        active = still;
    }
    let metrics = compute_metrics(&traces, course)?;
    Ok(EvalResult { metrics, traces, trajectory, depth_frames })
}
