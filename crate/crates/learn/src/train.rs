//! Phase-1 training loop.

use parkour_core::dynamics::{Action, EnvFactors, ACTION_DIM};
use parkour_core::rng::{self, SimRng};
use serde::{Deserialize, Serialize};

use crate::env::ParkourEnv;
use crate::error::{LearnError, Result};
use crate::obs::TEACHER;
use crate::policy::{gaussian_log_prob, sample_action, TeacherNets};
use crate::ppo::{PpoLearner, RolloutBuffer, UpdateStats};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Mean per-step weighted reward (unscaled).
    pub reward: f64,
    pub tracking: f64,
    pub clearance: f64,
    pub stylized: f64,
    pub regularization: f64,
    pub episodes: usize,
    pub mean_level: f64,
    pub level_histogram: Vec<usize>,
    pub stats: UpdateStats,
}

/// Rollout collection plus updates for a teacher on one environment.
pub struct TeacherTrainer {
    pub learner: PpoLearner,
    workers: Vec<SimRng>,
    buf: RolloutBuffer,
    iteration: usize,
    total: usize,
}

impl TeacherTrainer {
    /// `total` iterations are planned; it sets the learning-rate schedule.
    pub fn new(cfg: crate::ppo::PpoConfig, seed: u64, total: usize) -> Result<Self> {
        cfg.validate()?;
        let workers = (0..cfg.workers).map(|i| rng::stream(seed ^ 0xac7, i as u64)).collect();
        let buf = RolloutBuffer::new(cfg.horizon, cfg.workers);
        Ok(Self { learner: PpoLearner::new(cfg, rng::stream(seed, u64::MAX)), workers, buf, iteration: 0, total })
    }

    fn batch_inputs(env: &mut ParkourEnv) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = env.len();
        let mut obs = Vec::with_capacity(n * TEACHER.total);
        let mut factors = Vec::with_capacity(n * EnvFactors::DIM);
        for i in 0..n {
            obs.extend(env.teacher_obs(i)?);
            factors.extend(env.factors(i));
        }
        Ok((obs, factors))
    }

    /// Collects one horizon of experience and applies one update.
    pub fn iterate(&mut self, env: &mut ParkourEnv, nets: &mut TeacherNets) -> Result<IterationLog> {
        let cfg = self.learner.cfg.clone();
        let n = env.len();
        if n != cfg.workers {
            return Err(LearnError::Config(format!("environment has {n} robots but {} workers are configured", cfg.workers)));
        }
        self.buf.clear();
        let mut sums = [0.0; 5];
        let mut episodes = 0;
        for _ in 0..cfg.horizon {
            let (obs, factors) = Self::batch_inputs(env)?;
            let (mean, values) = nets.forward(&obs, &factors, n);
            for i in 0..n {
                self.buf.history.extend(env.history(i));
            }
            for i in 0..n {
                let mu = &mean[i * ACTION_DIM..(i + 1) * ACTION_DIM];
                let a = sample_action(mu, &nets.log_std.data, &mut self.workers[i]);
                let lp = gaussian_log_prob(&a, mu, &nets.log_std.data);
                let out = env.step(i, &Action::from_slice(&a))?;
                let t = &out.reward;
                sums[0] += t.total;
                sums[1] += t.tracking;
                sums[2] += t.clearance;
                sums[3] += t.stylized;
                sums[4] += t.regularization;
                let mut r = cfg.reward_scale * t.total;
                if let Some(end) = out.end {
                    episodes += 1;
                    if end.truncated() {
                        r += cfg.gamma * values[i];
                    }
                }
                self.buf.actions.extend_from_slice(&a);
                self.buf.log_probs.push(lp);
                self.buf.rewards.push(r);
                self.buf.dones.push(out.end.is_some());
            }
            self.buf.obs.extend(obs);
            self.buf.factors.extend(factors);
            self.buf.values.extend(values);
        }
        let (obs, factors) = Self::batch_inputs(env)?;
        let (_, last) = nets.forward(&obs, &factors, n);
        self.buf.compute_gae(&last, cfg.gamma, cfg.lambda);
        self.learner.anneal(self.iteration as f64 / self.total.saturating_sub(1).max(1) as f64);
        let stats = self.learner.update(nets, &mut self.buf)?;
        let steps = (cfg.horizon * n) as f64;
        let (mean_level, level_histogram) = match &env.curriculum {
            Some(c) => (c.mean_level(), c.histogram()),
            None => (0.0, vec![n]),
        };
        let log = IterationLog {
            iteration: self.iteration,
            reward: sums[0] / steps,
            tracking: sums[1] / steps,
            clearance: sums[2] / steps,
            stylized: sums[3] / steps,
            regularization: sums[4] / steps,
            episodes,
            mean_level,
            level_histogram,
            stats,
        };
        self.iteration += 1;
        Ok(log)
    }
}
