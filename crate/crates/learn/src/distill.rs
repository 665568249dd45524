//! Phase-2 distillation of a scandot teacher into a depth student (DAgger:
//! the student's own actions drive the environment, the teacher labels them).

use std::collections::VecDeque;

use parkour_core::dynamics::{Action, EnvFactors, ACTION_DIM};
use parkour_core::rng::{self, SimRng};
use parkour_core::wrap_angle;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ParkourEnv, Variant};
use crate::error::{LearnError, Result};
use crate::eval::Controller;
use crate::nn::{Adam, AdamConfig, Module};
use crate::obs::{HeadingObs, ENV_LATENT_DIM, HISTORY_LEN, LATENT_DIM, PROPRIO_DIM, STUDENT, TEACHER};
use crate::policy::{StudentNets, TeacherNets};

/// Default acceptance threshold of the heading gate, radians.
pub const GATE_THRESHOLD: f64 = 0.6;

const DISTILL_STREAM: u64 = (1 << 40) + 2;

/// Passes the predicted heading through when it lies within `threshold` of the
/// oracle (wrapped), otherwise substitutes the oracle.
pub fn mts_gate(theta_pred: f64, oracle: f64, threshold: f64) -> f64 {
    if wrap_angle(theta_pred - oracle).abs() < threshold {
        theta_pred
    } else {
        oracle
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub iterations: usize,
    pub robots: usize,
    /// Policy steps collected per iteration; a multiple of `encode_every`.
    pub steps_per_iteration: usize,
    /// Policy steps per depth-encoder step.
    pub encode_every: usize,
    /// Aggregated dataset capacity in encoder samples (oldest dropped first).
    pub buffer_size: usize,
    /// Encoder samples per minibatch.
    pub batch_size: usize,
    pub updates_per_iteration: usize,
    pub encoder_lr: f64,
    pub actor_lr: f64,
    pub w_yaw: f64,
    pub gate_threshold: f64,
    pub max_grad_norm: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            robots: 32,
            steps_per_iteration: 50,
            encode_every: 5,
            buffer_size: 6000,
            batch_size: 64,
            updates_per_iteration: 48,
            encoder_lr: 1e-3,
            actor_lr: 1e-4,
            w_yaw: 1.0,
            gate_threshold: GATE_THRESHOLD,
            max_grad_norm: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LearnError::Config(format!("distill: {m}")));
        if self.robots == 0 || self.encode_every == 0 || self.steps_per_iteration == 0 {
            return bad("robots, encode_every and steps_per_iteration must be positive");
        }
        if self.steps_per_iteration % self.encode_every != 0 {
            return bad("steps_per_iteration must be a multiple of encode_every");
        }
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            return bad("batch_size must be positive and no larger than buffer_size");
        }
        if !(self.encoder_lr >= 0.0 && self.actor_lr >= 0.0 && self.w_yaw >= 0.0 && self.gate_threshold > 0.0) {
            return bad("learning rates and w_yaw must be non-negative, gate_threshold positive");
        }
        Ok(())
    }
}

/// Heading the student observes. `training` selects the gated form for the
/// gated variant; at deployment there is no oracle, so the prediction is used.
pub fn student_heading(variant: Variant, theta_pred: f64, oracle: f64, threshold: f64, training: bool) -> Result<HeadingObs> {
    Ok(match variant {
        Variant::Ours if training => HeadingObs::Yaw(mts_gate(theta_pred, oracle, threshold)),
        Variant::Ours | Variant::Both => HeadingObs::Yaw(theta_pred),
        Variant::Mask => HeadingObs::Masked,
        Variant::Oracle => HeadingObs::Yaw(oracle),
        v => return Err(LearnError::Config(format!("'{v}' is not a student variant"))),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub iteration: usize,
    /// Mean squared action error per dimension.
    pub action_mse: f64,
    /// Mean squared wrapped yaw error at encoder steps.
    pub yaw_loss: f64,
    /// Fraction of gated headings where the prediction was accepted.
    pub gate_accept: f64,
    pub episodes: usize,
}

/// Per-robot recurrent state of a depth student.
#[derive(Clone, Debug)]
struct StudentMemory {
    hidden: Vec<f64>,
    latent: Vec<f64>,
    theta: Vec<f64>,
    latent_time: Vec<f64>,
    gru: usize,
}

impl StudentMemory {
    fn new(n: usize, gru: usize) -> Self {
        Self { hidden: vec![0.0; n * gru], latent: vec![0.0; n * LATENT_DIM], theta: vec![0.0; n], latent_time: vec![0.0; n], gru }
    }

    fn forget(&mut self, i: usize) {
        self.hidden[i * self.gru..(i + 1) * self.gru].fill(0.0);
    }
}

fn encoder_inputs<'a>(env: &'a ParkourEnv, robots: &[usize]) -> Result<(Vec<&'a [f32]>, Vec<f64>, Vec<f64>)> {
    let mut images = Vec::with_capacity(robots.len());
    let mut proprio = Vec::with_capacity(robots.len() * PROPRIO_DIM);
    let mut times = Vec::with_capacity(robots.len());
    for &i in robots {
        let r = &env.robots[i];
        let f = r.frame.as_ref().ok_or_else(|| LearnError::Config("student needs an environment with depth".into()))?;
        images.push(f.values.as_slice());
        proprio.extend_from_slice(&r.proprio);
        times.push(f.capture_time);
    }
    Ok((images, proprio, times))
}

fn history_batch(env: &ParkourEnv, robots: &[usize]) -> Vec<f64> {
    let mut h = Vec::with_capacity(robots.len() * HISTORY_LEN * PROPRIO_DIM);
    for &i in robots {
        h.extend(env.history(i));
    }
    h
}

/// One encoder input with the policy steps that used its latent.
struct Sample {
    image: Vec<f32>,
    proprio: Vec<f64>,
    hidden: Vec<f64>,
    oracle: f64,
    /// `steps` student observations as collected (latent slots overwritten in training).
    obs: Vec<f64>,
    targets: Vec<f64>,
    steps: usize,
}

pub struct Distiller {
    pub cfg: DistillConfig,
    pub variant: Variant,
    enc_opt: Adam,
    actor_opt: Adam,
    mem: Option<StudentMemory>,
    buffer: VecDeque<Sample>,
    rng: SimRng,
    iteration: usize,
}

impl Distiller {
    pub fn new(cfg: DistillConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        student_heading(variant, 0.0, 0.0, 1.0, true)?;
        let adam = |lr| Adam::new(AdamConfig { lr, max_grad_norm: cfg.max_grad_norm, ..AdamConfig::default() });
        Ok(Self {
            enc_opt: adam(cfg.encoder_lr),
            actor_opt: adam(cfg.actor_lr),
            cfg,
            variant,
            mem: None,
            buffer: VecDeque::new(),
            rng: rng::stream(seed, DISTILL_STREAM),
            iteration: 0,
        })
    }

    /// Collects `steps_per_iteration` student-driven steps per robot into the
    /// aggregated dataset, then runs the minibatch updates.
    pub fn iterate(&mut self, env: &mut ParkourEnv, teacher: &TeacherNets, student: &mut StudentNets) -> Result<DistillLog> {
        let n = env.len();
        let c = self.cfg.clone();
        let all: Vec<usize> = (0..n).collect();
        let gru = student.depth.hidden();
        let mut mem = self.mem.take().filter(|m| m.theta.len() == n).unwrap_or_else(|| StudentMemory::new(n, gru));
        let (mut mse, mut yaw_loss, mut accepted, mut gated, mut episodes) = (0.0, 0.0, 0.0, 0.0, 0);
        let groups = c.steps_per_iteration / c.encode_every;
        let head = LATENT_DIM + 1;
        for _ in 0..groups {
            let (images, proprio, times) = encoder_inputs(env, &all)?;
            let mut samples: Vec<Sample> = Vec::with_capacity(n);
            let (out, cache) = student.depth.forward(&images, &proprio, &mem.hidden);
            for i in 0..n {
                let oracle = env.oracle_yaw(i);
                samples.push(Sample {
                    image: images[i].to_vec(),
                    proprio: proprio[i * PROPRIO_DIM..(i + 1) * PROPRIO_DIM].to_vec(),
                    hidden: mem.hidden[i * gru..(i + 1) * gru].to_vec(),
                    oracle,
                    obs: Vec::with_capacity(c.encode_every * STUDENT.total),
                    targets: Vec::with_capacity(c.encode_every * ACTION_DIM),
                    steps: 0,
                });
                mem.latent[i * LATENT_DIM..(i + 1) * LATENT_DIM].copy_from_slice(&out[i * head..i * head + LATENT_DIM]);
                mem.theta[i] = out[i * head + LATENT_DIM];
                mem.latent_time[i] = times[i];
                yaw_loss += wrap_angle(mem.theta[i] - oracle).powi(2);
            }
            drop(images);
            mem.hidden.copy_from_slice(crate::policy::DepthEncoder::new_hidden(&cache));
            for _ in 0..c.encode_every {
                let mut tobs = Vec::with_capacity(n * TEACHER.total);
                let mut factors = Vec::with_capacity(n * EnvFactors::DIM);
                for i in 0..n {
                    tobs.extend(env.teacher_obs(i)?);
                    factors.extend(env.factors(i));
                }
                let target = teacher.act(&tobs, &factors, n);
                let z_hat = student.adapt_encoder.forward(&history_batch(env, &all), n);
                let mut sobs = Vec::with_capacity(n * STUDENT.total);
                for i in 0..n {
                    let oracle = env.oracle_yaw(i);
                    if self.variant == Variant::Ours {
                        gated += 1.0;
                        if wrap_angle(mem.theta[i] - oracle).abs() < c.gate_threshold {
                            accepted += 1.0;
                        }
                    }
                    let heading = student_heading(self.variant, mem.theta[i], oracle, c.gate_threshold, true)?;
                    let z = &z_hat[i * ENV_LATENT_DIM..(i + 1) * ENV_LATENT_DIM];
                    sobs.extend(env.student_obs(i, &mem.latent[i * LATENT_DIM..(i + 1) * LATENT_DIM], mem.latent_time[i], heading, z)?);
                }
                let mu = student.actor.forward(&sobs, n);
                for i in 0..n {
                    let s = &mut samples[i];
                    s.obs.extend_from_slice(&sobs[i * STUDENT.total..(i + 1) * STUDENT.total]);
                    s.targets.extend_from_slice(&target[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
                    s.steps += 1;
                }
                mse += mu.iter().zip(&target).map(|(m, t)| (m - t) * (m - t)).sum::<f64>();
                for i in 0..n {
                    let out = env.step(i, &Action::from_slice(&mu[i * ACTION_DIM..(i + 1) * ACTION_DIM]))?;
                    if out.end.is_some() {
                        episodes += 1;
                        mem.forget(i);
                        mem.latent_time[i] = 0.0;
                    }
                }
            }
            for s in samples {
                if self.buffer.len() == c.buffer_size {
                    self.buffer.pop_front();
                }
                self.buffer.push_back(s);
            }
        }
        self.mem = Some(mem);
        for _ in 0..c.updates_per_iteration {
            self.update(student)?;
        }
        let log = DistillLog {
            iteration: self.iteration,
            action_mse: mse / (groups * c.encode_every * n * ACTION_DIM) as f64,
            yaw_loss: yaw_loss / (groups * n) as f64,
            gate_accept: if gated > 0.0 { accepted / gated } else { 0.0 },
            episodes,
        };
        self.iteration += 1;
        Ok(log)
    }

    /// One gradient step on a minibatch drawn from the aggregated dataset.
    fn update(&mut self, student: &mut StudentNets) -> Result<()> {
        let c = &self.cfg;
        let b = c.batch_size.min(self.buffer.len());
        let picks: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.buffer.len())).collect();
        let gru = student.depth.hidden();
        let head = LATENT_DIM + 1;
        let batch: Vec<&Sample> = picks.iter().map(|&k| &self.buffer[k]).collect();
        let images: Vec<&[f32]> = batch.iter().map(|s| s.image.as_slice()).collect();
        let proprio: Vec<f64> = batch.iter().flat_map(|s| s.proprio.iter().copied()).collect();
        let hidden: Vec<f64> = batch.iter().flat_map(|s| s.hidden.iter().copied()).collect();
        debug_assert_eq!(hidden.len(), b * gru);
        student.zero_grad();
        let (out, cache) = student.depth.forward(&images, &proprio, &hidden);
        let mut dout = vec![0.0; b * head];
        let mut obs = Vec::new();
        let mut targets = Vec::new();
        let mut owner = Vec::new();
        for (j, s) in batch.iter().enumerate() {
            let e = wrap_angle(out[j * head + LATENT_DIM] - s.oracle);
            dout[j * head + LATENT_DIM] = 2.0 * c.w_yaw * e / b as f64;
            for k in 0..s.steps {
                let start = obs.len();
                obs.extend_from_slice(&s.obs[k * STUDENT.total..(k + 1) * STUDENT.total]);
                obs[start + STUDENT.extero..][..LATENT_DIM].copy_from_slice(&out[j * head..j * head + LATENT_DIM]);
                owner.push(j);
            }
            targets.extend_from_slice(&s.targets);
        }
        let rows = owner.len();
        let (mu, acache) = student.actor.forward_cached(&obs, rows);
        // squared action norm summed over dimensions, averaged over samples
        let scale = 2.0 / rows as f64;
        let dmu: Vec<f64> = mu.iter().zip(&targets).map(|(m, t)| scale * (m - t)).collect();
        let dobs = student.actor.backward(&acache, &dmu);
        for (r, &j) in owner.iter().enumerate() {
            let src = &dobs[r * STUDENT.total + STUDENT.extero..][..LATENT_DIM];
            for (d, s) in dout[j * head..j * head + LATENT_DIM].iter_mut().zip(src) {
                *d += s;
            }
        }
        student.depth.backward(&cache, &dout);
        if !student.tensors().iter().all(|t| t.grad.iter().all(|g| g.is_finite())) {
            return Err(LearnError::NonFinite("distillation gradients".into()));
        }
        self.enc_opt.step(student.depth.tensors_mut());
        self.actor_opt.step(student.actor.tensors_mut());
        Ok(())
    }
}

/// Deployed depth student: encodes every `encode_every` steps per robot and
/// reuses the latent in between.
pub struct StudentController<'a> {
    pub nets: &'a StudentNets,
    pub variant: Variant,
    pub encode_every: usize,
    mem: StudentMemory,
    steps: Vec<usize>,
}

impl<'a> StudentController<'a> {
    pub fn new(nets: &'a StudentNets, variant: Variant, encode_every: usize) -> Result<Self> {
        student_heading(variant, 0.0, 0.0, 1.0, false)?;
        if encode_every == 0 {
            return Err(LearnError::Config("encode_every must be positive".into()));
        }
        Ok(Self { nets, variant, encode_every, mem: StudentMemory::new(0, nets.depth.hidden()), steps: Vec::new() })
    }
}

impl Controller for StudentController<'_> {
    fn begin(&mut self, env: &ParkourEnv) -> Result<()> {
        self.mem = StudentMemory::new(env.len(), self.nets.depth.hidden());
        self.steps = vec![0; env.len()];
        Ok(())
    }

    fn act(&mut self, env: &mut ParkourEnv, robots: &[usize]) -> Result<Vec<Action>> {
        let gru = self.mem.gru;
        let due: Vec<usize> = robots.iter().copied().filter(|&i| self.steps[i] % self.encode_every == 0).collect();
        if !due.is_empty() {
            let (images, proprio, times) = encoder_inputs(env, &due)?;
            let h: Vec<f64> = due.iter().flat_map(|&i| self.mem.hidden[i * gru..(i + 1) * gru].iter().copied()).collect();
            let (out, cache) = self.nets.depth.forward(&images, &proprio, &h);
            let h_new = crate::policy::DepthEncoder::new_hidden(&cache);
            let head = LATENT_DIM + 1;
            for (j, &i) in due.iter().enumerate() {
                self.mem.hidden[i * gru..(i + 1) * gru].copy_from_slice(&h_new[j * gru..(j + 1) * gru]);
                self.mem.latent[i * LATENT_DIM..(i + 1) * LATENT_DIM].copy_from_slice(&out[j * head..j * head + LATENT_DIM]);
                self.mem.theta[i] = out[j * head + LATENT_DIM];
                self.mem.latent_time[i] = times[j];
            }
        }
        let z_hat = self.nets.adapt_encoder.forward(&history_batch(env, robots), robots.len());
        let mut obs = Vec::with_capacity(robots.len() * STUDENT.total);
        for (j, &i) in robots.iter().enumerate() {
            let heading = student_heading(self.variant, self.mem.theta[i], env.oracle_yaw(i), GATE_THRESHOLD, false)?;
            let z = &z_hat[j * ENV_LATENT_DIM..(j + 1) * ENV_LATENT_DIM];
            obs.extend(env.student_obs(i, &self.mem.latent[i * LATENT_DIM..(i + 1) * LATENT_DIM], self.mem.latent_time[i], heading, z)?);
            self.steps[i] += 1;
        }
        let mean = self.nets.act(&obs, robots.len());
        Ok(mean.chunks_exact(ACTION_DIM).map(Action::from_slice).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::NetConfig;
    use parkour_core::rng;
    use std::f64::consts::PI;

    #[test]
    fn gate_examples() {
        assert_eq!(mts_gate(0.3, 0.0, 0.6), 0.3);
        assert_eq!(mts_gate(1.0, 0.0, 0.6), 0.0);
        assert_eq!(mts_gate(-2.5, -2.5, 0.6), -2.5);
        // close across the wrap point
        assert_eq!(mts_gate(PI - 0.1, -PI + 0.1, 0.6), PI - 0.1);
    }

    #[test]
    fn student_variants_choose_headings() {
        let h = |v, training| student_heading(v, 1.0, 0.0, 0.6, training).unwrap();
        assert_eq!(h(Variant::Ours, true), HeadingObs::Yaw(0.0));
        assert_eq!(h(Variant::Ours, false), HeadingObs::Yaw(1.0));
        assert_eq!(h(Variant::Both, true), HeadingObs::Yaw(1.0));
        assert_eq!(h(Variant::Mask, true), HeadingObs::Masked);
        assert_eq!(h(Variant::Oracle, false), HeadingObs::Yaw(0.0));
        assert!(student_heading(Variant::NoClear, 0.0, 0.0, 0.6, true).unwrap_err().is_config());
    }

    #[test]
    fn copied_student_matches_teacher_bitwise() {
        let teacher = TeacherNets::new(NetConfig::default(), &mut rng::stream(2, 0));
        let student = StudentNets::from_teacher(&teacher, &mut rng::stream(2, 1));
        let mut r = rng::stream(2, 2);
        let n = 5;
        let raw: Vec<f64> = (0..n * TEACHER.total).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let factors: Vec<f64> = (0..n * EnvFactors::DIM).map(|_| rand::Rng::random_range(&mut r, 0.5..1.5)).collect();
        let expected = teacher.act(&raw, &factors, n);
        let scan = teacher.scan_encoder.forward(&crate::policy::columns(&raw, TEACHER.total, TEACHER.extero, crate::obs::SCANDOT_DIM), n);
        let z = teacher.encode_env(&factors, n);
        let obs = crate::policy::backbone_input(&raw, &TEACHER, &scan, &z, n);
        assert_eq!(student.act(&obs, n), expected);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let c = DistillConfig { steps_per_iteration: 7, ..Default::default() };
        assert!(c.validate().unwrap_err().is_config());
    }
}
