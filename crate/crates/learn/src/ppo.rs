//! Clipped-surrogate policy optimisation with GAE, plus the latent
//! consistency loss that trains the history encoder.

use parkour_core::dynamics::{EnvFactors, ACTION_DIM};
use parkour_core::rng::SimRng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LearnError, Result};
use crate::nn::{Adam, AdamConfig, Module};
use crate::obs::{ENV_LATENT_DIM, HISTORY_LEN, PROPRIO_DIM, TEACHER};
use crate::policy::{gaussian_entropy, gaussian_log_prob, TeacherNets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub horizon: usize,
    pub workers: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Multiplies every reward before it enters the returns.
    pub reward_scale: f64,
    /// Weight of the history-encoder regression.
    pub roa_coef: f64,
    /// Weight of the pull of `z` toward the history estimate.
    pub roa_lambda: f64,
    /// Learning rate at the last iteration as a fraction of `lr`; the rate
    /// falls linearly in between.
    pub final_lr_fraction: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            horizon: 64,
            workers: 64,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            lr: 3e-4,
            entropy_coef: 0.003,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            reward_scale: 0.1,
            roa_coef: 1.0,
            roa_lambda: 0.1,
            final_lr_fraction: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LearnError::Config(m.into()));
        if self.horizon == 0 || self.workers == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("horizon, workers, epochs and minibatches must be positive");
        }
        if self.minibatches > self.horizon * self.workers {
            return bad("more minibatches than samples");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0 && self.lr >= 0.0) {
            return bad("clip must be positive and lr non-negative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, max_grad_norm: self.max_grad_norm, ..AdamConfig::default() }
    }
}

/// `horizon x workers` transitions, indexed `t * workers + i`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub workers: usize,
    pub obs: Vec<f64>,
    pub factors: Vec<f64>,
    pub history: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(horizon: usize, workers: usize) -> Self {
        let n = horizon * workers;
        Self {
            horizon,
            workers,
            obs: Vec::with_capacity(n * TEACHER.total),
            factors: Vec::with_capacity(n * EnvFactors::DIM),
            history: Vec::with_capacity(n * HISTORY_LEN * PROPRIO_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.horizon * self.workers
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.factors.clear();
        self.history.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.rewards.clear();
        self.values.clear();
        self.dones.clear();
        self.advantages.clear();
        self.returns.clear();
    }

    /// Generalised advantage estimation; `last_values` bootstraps the step after the horizon.
    pub fn compute_gae(&mut self, last_values: &[f64], gamma: f64, lambda: f64) {
        let (h, w) = (self.horizon, self.workers);
        self.advantages = vec![0.0; h * w];
        for i in 0..w {
            let mut next_adv = 0.0;
            let mut next_value = last_values[i];
            for t in (0..h).rev() {
                let k = t * w + i;
                let live = if self.dones[k] { 0.0 } else { 1.0 };
                let delta = self.rewards[k] + gamma * next_value * live - self.values[k];
                next_adv = delta + gamma * lambda * live * next_adv;
                self.advantages[k] = next_adv;
                next_value = self.values[k];
            }
        }
        self.returns = self.advantages.iter().zip(&self.values).map(|(a, v)| a + v).collect();
    }
}

/// Rescales to zero mean, unit standard deviation; returns the result's `(mean, std)`.
pub fn normalize_advantages(adv: &mut [f64]) -> (f64, f64) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) * scale;
    }
    let m2 = adv.iter().sum::<f64>() / n;
    let s2 = (adv.iter().map(|a| (a - m2).powi(2)).sum::<f64>() / n).sqrt();
    (m2, s2)
}

/// `|sg(z) - z_hat|^2 + lambda * |z - sg(z_hat)|^2`, with gradients
/// `(d/dz, d/dz_hat)`.
pub fn roa_consistency_loss(z: &[f64], z_hat: &[f64], lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let sq: f64 = z.iter().zip(z_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let dz = z.iter().zip(z_hat).map(|(a, b)| 2.0 * lambda * (a - b)).collect();
    let dzh = z.iter().zip(z_hat).map(|(a, b)| 2.0 * (b - a)).collect();
    (sq * (1.0 + lambda), dz, dzh)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub roa_loss: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
}

/// Optimiser state that persists across updates.
pub struct PpoLearner {
    pub cfg: PpoConfig,
    pub opt: Adam,
    pub rng: SimRng,
}

impl PpoLearner {
    pub fn new(cfg: PpoConfig, rng: SimRng) -> Self {
        Self { opt: Adam::new(cfg.adam()), cfg, rng }
    }

    /// Sets the learning rate for training progress `p` in `[0, 1]`.
    pub fn anneal(&mut self, p: f64) {
        let f = 1.0 - p.clamp(0.0, 1.0) * (1.0 - self.cfg.final_lr_fraction);
        self.opt.cfg.lr = self.cfg.lr * f;
    }

    /// Runs the configured epochs over a full buffer with advantages computed.
    pub fn update(&mut self, nets: &mut TeacherNets, buf: &mut RolloutBuffer) -> Result<UpdateStats> {
        let n = buf.len();
        if !buf.is_full() || buf.advantages.len() != n {
            return Err(LearnError::Config("update needs a full buffer with advantages".into()));
        }
        let (adv_mean, adv_std) = normalize_advantages(&mut buf.advantages);
        let c = self.cfg.clone();
        let mut stats = UpdateStats { adv_mean, adv_std, ..Default::default() };
        let mut count = 0.0;
        let mut idx: Vec<usize> = (0..n).collect();
        let mb = n / c.minibatches;
        let hist = HISTORY_LEN * PROPRIO_DIM;
        let fd = EnvFactors::DIM;
        for _ in 0..c.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(mb).take(c.minibatches) {
                let b = chunk.len();
                let gather = |src: &[f64], w: usize| -> Vec<f64> {
                    chunk.iter().flat_map(|&k| src[k * w..(k + 1) * w].iter().copied()).collect()
                };
                let obs = gather(&buf.obs, TEACHER.total);
                let factors = gather(&buf.factors, fd);
                let actions = gather(&buf.actions, ACTION_DIM);
                let history = gather(&buf.history, hist);

                nets.zero_grad();
                let (mean, value, cache) = nets.forward_cached(&obs, &factors, b);
                let log_std = nets.log_std.data.clone();
                let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
                let mut dmean = vec![0.0; b * ACTION_DIM];
                let mut dlog_std = vec![0.0; ACTION_DIM];
                let mut dvalue = vec![0.0; b];
                let (mut kl, mut clipped, mut vloss) = (0.0, 0.0, 0.0);
                for (j, &k) in chunk.iter().enumerate() {
                    let a = &actions[j * ACTION_DIM..(j + 1) * ACTION_DIM];
                    let mu = &mean[j * ACTION_DIM..(j + 1) * ACTION_DIM];
                    let lp = gaussian_log_prob(a, mu, &log_std);
                    let ratio = (lp - buf.log_probs[k]).exp();
                    let adv = buf.advantages[k];
                    kl += buf.log_probs[k] - lp;
                    let unclipped = ratio * adv;
                    let clip_r = ratio.clamp(1.0 - c.clip, 1.0 + c.clip);
                    // gradient flows only through the branch selected by min()
                    let g = if unclipped <= clip_r * adv { -ratio * adv / b as f64 } else { 0.0 };
                    if (ratio - 1.0).abs() > c.clip {
                        clipped += 1.0;
                    }
                    for d in 0..ACTION_DIM {
                        let diff = a[d] - mu[d];
                        dmean[j * ACTION_DIM + d] = g * diff * inv_var[d];
                        dlog_std[d] += g * (diff * diff * inv_var[d] - 1.0);
                    }
                    let err = value[j] - buf.returns[k];
                    vloss += err * err;
                    dvalue[j] = 2.0 * c.value_coef * err / b as f64;
                }
                for d in dlog_std.iter_mut() {
                    *d -= c.entropy_coef;
                }
                // history encoder regresses onto z; z is pulled gently toward it
                let (z_hat, acache) = nets.adapt_encoder.forward_cached(&history, b);
                let mut dz_extra = vec![0.0; b * ENV_LATENT_DIM];
                let mut dz_hat = vec![0.0; b * ENV_LATENT_DIM];
                let mut roa = 0.0;
                for j in 0..b {
                    let r = j * ENV_LATENT_DIM..(j + 1) * ENV_LATENT_DIM;
                    let (l, dz, dzh) = roa_consistency_loss(&cache.z[r.clone()], &z_hat[r.clone()], c.roa_lambda);
                    roa += l;
                    for (o, v) in dz_extra[r.clone()].iter_mut().zip(dz) {
                        *o = c.roa_coef * v / b as f64;
                    }
                    for (o, v) in dz_hat[r].iter_mut().zip(dzh) {
                        *o = c.roa_coef * v / b as f64;
                    }
                }
                let total = kl + vloss + roa;
                if !total.is_finite() || !mean.iter().all(|m| m.is_finite()) {
                    return Err(LearnError::NonFinite(format!(
                        "loss terms kl={kl} value={vloss} roa={roa}; log_std={:?}",
                        nets.log_std.data
                    )));
                }
                nets.backward(&cache, &dmean, &dvalue, Some(&dz_extra));
                nets.adapt_encoder.backward(&acache, &dz_hat);
                nets.log_std.grad.copy_from_slice(&dlog_std);
                self.opt.step(nets.tensors_mut());
                if !nets.all_finite() {
                    return Err(LearnError::NonFinite("parameters after optimiser step".into()));
                }
                stats.approx_kl += kl / b as f64;
                stats.clip_fraction += clipped / b as f64;
                stats.value_loss += vloss / b as f64;
                stats.roa_loss += roa / b as f64;
                count += 1.0;
            }
        }
        stats.approx_kl /= count;
        stats.clip_fraction /= count;
        stats.value_loss /= count;
        stats.roa_loss /= count;
        stats.entropy = gaussian_entropy(&nets.log_std.data);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_action, NetConfig};
    use parkour_core::rng;

    fn tiny() -> TeacherNets {
        let cfg = NetConfig {
            scan_hidden: vec![4],
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            env_hidden: vec![4],
            adapt_hidden: vec![4],
            ..Default::default()
        };
        TeacherNets::new(cfg, &mut rng::stream(0, 0))
    }

    fn fill(buf: &mut RolloutBuffer, nets: &TeacherNets, r: &mut SimRng, reward: impl Fn(&[f64]) -> f64) {
        buf.clear();
        let obs = vec![0.0; TEACHER.total];
        let f = [1.0, 1.0, 0.0];
        let (mu, v) = nets.forward(&obs, &f, 1);
        for _ in 0..buf.horizon * buf.workers {
            let a = sample_action(&mu, &nets.log_std.data, r);
            buf.obs.extend_from_slice(&obs);
            buf.factors.extend_from_slice(&f);
            buf.history.extend(std::iter::repeat(0.0).take(HISTORY_LEN * PROPRIO_DIM));
            buf.log_probs.push(gaussian_log_prob(&a, &mu, &nets.log_std.data));
            buf.rewards.push(reward(&a));
            buf.actions.extend_from_slice(&a);
            buf.values.push(v[0]);
            buf.dones.push(true);
        }
    }

    #[test]
    fn gae_matches_hand_computation() {
        let mut b = RolloutBuffer::new(3, 1);
        b.rewards = vec![1.0, 0.0, 2.0];
        b.values = vec![0.5, 0.4, 0.3];
        b.dones = vec![false, true, false];
        b.compute_gae(&[1.0], 0.9, 0.8);
        let d2 = 2.0 + 0.9 * 1.0 - 0.3;
        let d1 = 0.0 - 0.4;
        let d0 = 1.0 + 0.9 * 0.4 - 0.5;
        let a1 = d1;
        let a0 = d0 + 0.9 * 0.8 * a1;
        for (x, y) in b.advantages.iter().zip([a0, a1, d2]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((b.returns[0] - (a0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn normalization_hits_unit_moments() {
        let mut r = rng::stream(4, 0);
        let mut a: Vec<f64> = (0..4096).map(|_| rand::Rng::random_range(&mut r, -3.0..10.0)).collect();
        let (m, s) = normalize_advantages(&mut a);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-4);
    }

    #[test]
    fn roa_examples_and_gradient() {
        assert_eq!(roa_consistency_loss(&[0.3, -0.2], &[0.3, -0.2], 0.1).0, 0.0);
        let mut z = vec![0.0; 8];
        z[0] = 1.0;
        let (l, _, _) = roa_consistency_loss(&z, &[0.0; 8], 0.0);
        assert_eq!(l, 1.0);
        // d/dz_hat of the regression term by central differences
        let zs = [0.4, -0.7, 0.1];
        let zh = [0.2, 0.5, -0.3];
        let (_, _, g) = roa_consistency_loss(&zs, &zh, 0.1);
        for k in 0..3 {
            let f = |d: f64| {
                let mut h = zh;
                h[k] += d;
                zs.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn positive_advantage_raises_log_prob() {
        let mut nets = tiny();
        let mut r = rng::stream(1, 1);
        let mut buf = RolloutBuffer::new(8, 1);
        fill(&mut buf, &nets, &mut r, |_| 0.0);
        buf.advantages = vec![0.0; 8];
        buf.advantages[3] = 1.0;
        buf.returns = buf.values.clone();
        let a3 = buf.actions[3 * ACTION_DIM..4 * ACTION_DIM].to_vec();
        let obs = vec![0.0; TEACHER.total];
        let f = [1.0, 1.0, 0.0];
        let before = gaussian_log_prob(&a3, &nets.forward(&obs, &f, 1).0, &nets.log_std.data);
        let cfg = PpoConfig { horizon: 8, workers: 1, epochs: 1, minibatches: 1, entropy_coef: 0.0, ..Default::default() };
        PpoLearner::new(cfg, rng::stream(2, 2)).update(&mut nets, &mut buf).unwrap();
        let after = gaussian_log_prob(&a3, &nets.forward(&obs, &f, 1).0, &nets.log_std.data);
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut nets = tiny();
        let before = nets.clone();
        let mut r = rng::stream(3, 3);
        let mut buf = RolloutBuffer::new(16, 2);
        fill(&mut buf, &nets, &mut r, |a| a[0]);
        buf.compute_gae(&[0.0, 0.0], 0.99, 0.95);
        let cfg = PpoConfig { horizon: 16, workers: 2, lr: 0.0, ..Default::default() };
        PpoLearner::new(cfg, rng::stream(4, 4)).update(&mut nets, &mut buf).unwrap();
        for (a, b) in nets.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn two_armed_bandit_converges() {
        // arm = sign of the first action component; arm 1 pays 1, arm 0 pays 0
        let mut nets = tiny();
        let mut r = rng::stream(5, 5);
        let cfg = PpoConfig { horizon: 64, workers: 1, lr: 3e-3, entropy_coef: 0.0, reward_scale: 1.0, ..Default::default() };
        let mut learner = PpoLearner::new(cfg, rng::stream(6, 6));
        let obs = vec![0.0; TEACHER.total];
        let f = [1.0, 1.0, 0.0];
        let greedy = |n: &TeacherNets| {
            let mu = n.forward(&obs, &f, 1).0[0];
            let sigma = n.log_std.data[0].exp();
            // P(a0 > 0) = Phi(mu / sigma)
            0.5 * (1.0 + erf(mu / sigma / std::f64::consts::SQRT_2))
        };
        let mut updates = 0;
        while greedy(&nets) <= 0.95 {
            assert!(updates < 200, "greedy probability {} after 200 updates", greedy(&nets));
            let mut buf = RolloutBuffer::new(64, 1);
            fill(&mut buf, &nets, &mut r, |a| if a[0] > 0.0 { 1.0 } else { 0.0 });
            buf.compute_gae(&[0.0], 0.99, 0.95);
            learner.update(&mut nets, &mut buf).unwrap();
            updates += 1;
        }
    }

    /// Abramowitz-Stegun 7.1.26, |error| < 1.5e-7.
    fn erf(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
        let y = 1.0
            - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t + 0.254_829_592)
                * t
                * (-x * x).exp();
        y.copysign(x)
    }
}
