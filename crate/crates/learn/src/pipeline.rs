//! End-to-end commands: train a teacher, distill a student, evaluate, ablate.
//! Every output is a deterministic function of the run configuration.

use std::path::Path;

use parkour_core::rng;
use parkour_core::terrain::{arrange_course, CourseSpec, Heightfield, WaypointCourse};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::distill::{DistillLog, Distiller, StudentController};
use crate::env::{ParkourEnv, Variant};
use crate::error::{LearnError, Result};
use crate::eval::{evaluate, EvalResult, EvalSettings, TeacherController};
use crate::policy::{StudentNets, TeacherNets};
use crate::report::{self, MetricsRow};
use crate::train::{IterationLog, TeacherTrainer};

const TEACHER_INIT_STREAM: u64 = 1 << 40;
const STUDENT_INIT_STREAM: u64 = (1 << 40) + 1;
/// Offset between training and evaluation seeds.
const EVAL_SEED_OFFSET: u64 = 7919;

pub fn build_course(spec: &CourseSpec) -> Result<(Heightfield, WaypointCourse)> {
    Ok(arrange_course(spec)?)
}

fn teacher_variant(v: Variant) -> Result<Variant> {
    if Variant::TEACHER.contains(&v) {
        Ok(v)
    } else {
        Err(LearnError::Config(format!("'{v}' is not a teacher variant")))
    }
}

fn student_variant(v: Variant) -> Result<Variant> {
    if Variant::STUDENT.contains(&v) {
        Ok(v)
    } else {
        Err(LearnError::Config(format!("'{v}' is not a student variant")))
    }
}

pub struct TrainOutput {
    pub nets: TeacherNets,
    pub logs: Vec<IterationLog>,
}

/// Phase-1 training under `cfg.variant`, optionally continuing from `init`.
pub fn train_teacher(
    cfg: &RunConfig,
    init: Option<TeacherNets>,
    progress: &mut dyn FnMut(&IterationLog),
) -> Result<TrainOutput> {
    let variant = teacher_variant(cfg.variant)?;
    let (hf, course) = build_course(&cfg.course)?;
    let mut env =
        ParkourEnv::new(hf, course, cfg.env.clone(), variant, cfg.ppo.workers, cfg.seed, cfg.curriculum, false)?;
    let mut nets = match init {
        Some(n) => {
            if n.config != cfg.nets {
                return Err(LearnError::Config("initial weights use a different network shape".into()));
            }
            n
        }
        None => TeacherNets::new(cfg.nets.clone(), &mut rng::stream(cfg.seed, TEACHER_INIT_STREAM)),
    };
    let mut trainer = TeacherTrainer::new(cfg.ppo.clone(), cfg.seed, cfg.iterations)?;
    let mut logs = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let log = trainer.iterate(&mut env, &mut nets)?;
        progress(&log);
        logs.push(log);
    }
    Ok(TrainOutput { nets, logs })
}

pub struct DistillOutput {
    pub student: StudentNets,
    pub logs: Vec<DistillLog>,
}

/// Phase-2 distillation on the run's course with the given heading variant.
pub fn distill_student(
    cfg: &RunConfig,
    teacher: &TeacherNets,
    variant: Variant,
    progress: &mut dyn FnMut(&DistillLog),
) -> Result<DistillOutput> {
    let variant = student_variant(variant)?;
    let (hf, course) = build_course(&cfg.course)?;
    let mut env =
        ParkourEnv::new(hf, course, cfg.env.clone(), variant, cfg.distill.robots, cfg.seed, cfg.curriculum, true)?;
    let mut student = StudentNets::from_teacher(teacher, &mut rng::stream(cfg.seed, STUDENT_INIT_STREAM));
    let mut distiller = Distiller::new(cfg.distill.clone(), variant, cfg.seed)?;
    let mut logs = Vec::with_capacity(cfg.distill.iterations);
    for _ in 0..cfg.distill.iterations {
        let log = distiller.iterate(&mut env, teacher, &mut student)?;
        progress(&log);
        logs.push(log);
    }
    Ok(DistillOutput { student, logs })
}

/// Settings for a batch evaluation under `cfg`.
pub fn eval_settings(cfg: &RunConfig, dumps: bool) -> EvalSettings {
    EvalSettings {
        robots: cfg.eval.robots,
        duration: cfg.eval.duration,
        seed: cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        record_trajectories: dumps,
        record_depth: dumps,
    }
}

pub fn eval_teacher(cfg: &RunConfig, nets: &TeacherNets, variant: Variant, settings: &EvalSettings) -> Result<EvalResult> {
    let (hf, course) = build_course(&cfg.course)?;
    evaluate(&mut TeacherController { nets }, &hf, &course, &cfg.env, teacher_variant(variant)?, settings.record_depth, settings)
}

pub fn eval_student(cfg: &RunConfig, nets: &StudentNets, variant: Variant, settings: &EvalSettings) -> Result<EvalResult> {
    let (hf, course) = build_course(&cfg.course)?;
    let mut ctl = StudentController::new(nets, student_variant(variant)?, cfg.distill.encode_every)?;
    evaluate(&mut ctl, &hf, &course, &cfg.env, variant, true, settings)
}

pub fn write_trajectory(path: &Path, res: &EvalResult) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in &res.trajectory {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_depth(path: &Path, res: &EvalResult) -> Result<()> {
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    parkour_core::sensing::depth::write_trace(w, &res.depth_frames)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub variant: String,
    pub iterations: usize,
    pub final_reward: f64,
    pub final_mean_level: f64,
    pub mxd_mean: f64,
    pub mev_mean: f64,
}

/// Files written by [`run_train`] under the output directory.
pub const TEACHER_FILE: &str = "teacher.pkpt";
pub const STUDENT_FILE: &str = "student.pkpt";
pub const TRAIN_CSV: &str = "train.csv";
pub const DISTILL_CSV: &str = "distill.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Trains, evaluates and writes checkpoint, per-iteration CSV and summary.
pub fn run_train(cfg: &RunConfig, init: Option<TeacherNets>, out: &Path, progress: &mut dyn FnMut(&IterationLog)) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let t = train_teacher(cfg, init, progress)?;
    checkpoint::save_teacher(&out.join(TEACHER_FILE), &t.nets, &hash, cfg.variant.name())?;
    std::fs::write(out.join(TRAIN_CSV), report::train_csv(&t.logs))?;
    let ev = eval_teacher(cfg, &t.nets, cfg.variant, &eval_settings(cfg, false))?;
    let last = t.logs.last();
    let summary = TrainSummary {
        config_hash: hash,
        variant: cfg.variant.name().into(),
        iterations: t.logs.len(),
        final_reward: last.map_or(0.0, |l| l.reward),
        final_mean_level: last.map_or(0.0, |l| l.mean_level),
        mxd_mean: ev.metrics.mxd_mean,
        mev_mean: ev.metrics.mev_mean,
    };
    std::fs::write(out.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Distils and writes the student checkpoint and per-iteration CSV.
pub fn run_distill(
    cfg: &RunConfig,
    teacher: &TeacherNets,
    variant: Variant,
    out: &Path,
    progress: &mut dyn FnMut(&DistillLog),
) -> Result<DistillOutput> {
    std::fs::create_dir_all(out)?;
    let d = distill_student(cfg, teacher, variant, progress)?;
    checkpoint::save_student(&out.join(STUDENT_FILE), &d.student, &cfg.hash(), variant.name())?;
    std::fs::write(out.join(DISTILL_CSV), report::distill_csv(&d.logs))?;
    Ok(d)
}

/// Trains (and for student variants, distils) every requested variant on each
/// terrain kind of the course separately and evaluates it. Teacher weights
/// for student variants come from an `ours` teacher shared per terrain.
pub fn run_ablation(cfg: &RunConfig, variants: &[Variant], log: &mut dyn FnMut(&str)) -> Result<Vec<MetricsRow>> {
    if variants.is_empty() {
        return Err(LearnError::Config("no variants requested".into()));
    }
    let mut rows = Vec::new();
    for &kind in &cfg.course.kinds {
        let mut c = cfg.clone();
        c.course.kinds = vec![kind];
        let mut ours: Option<TeacherNets> = None;
        for &v in variants {
            let settings = eval_settings(&c, false);
            let metrics = if Variant::TEACHER.contains(&v) {
                c.variant = v;
                log(&format!("{}: training {v}", kind.name()));
                let t = train_teacher(&c, None, &mut |_| {})?;
                let m = eval_teacher(&c, &t.nets, v, &settings)?.metrics;
                if v == Variant::Ours {
                    ours = Some(t.nets);
                }
                m
            } else {
                if ours.is_none() {
                    c.variant = Variant::Ours;
                    log(&format!("{}: training ours teacher for students", kind.name()));
                    ours = Some(train_teacher(&c, None, &mut |_| {})?.nets);
                }
                log(&format!("{}: distilling {v}", kind.name()));
                let d = distill_student(&c, ours.as_ref().unwrap(), v, &mut |_| {})?;
                eval_student(&c, &d.student, v, &settings)?.metrics
            };
            rows.push(MetricsRow { terrain: kind.name().into(), variant: v.name().into(), metrics });
        }
    }
    Ok(rows)
}
