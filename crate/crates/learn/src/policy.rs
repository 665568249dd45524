//! Teacher and student networks.

use parkour_core::dynamics::{EnvFactors, ACTION_DIM};
use parkour_core::rng::SimRng;
use parkour_core::sensing::{DEPTH_COLS, DEPTH_ROWS};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{avg_pool, Activation, Conv2d, Gru, GruCache, Linear, Mlp, MlpCache, Module, Tensor};
use crate::obs::{Layout, ENV_LATENT_DIM, HISTORY_LEN, LATENT_DIM, PROPRIO_DIM, SCANDOT_DIM, STUDENT, TEACHER};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Network widths. Stored in checkpoints so they can be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub scan_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub env_hidden: Vec<usize>,
    pub adapt_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub depth_pool: usize,
    pub conv_channels: (usize, usize),
    pub depth_fc: usize,
    pub gru_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            scan_hidden: vec![64],
            actor_hidden: vec![128, 64],
            critic_hidden: vec![128, 64],
            env_hidden: vec![16],
            adapt_hidden: vec![64],
            init_log_std: -0.5,
            depth_pool: 2,
            conv_channels: (8, 16),
            depth_fc: 64,
            gru_hidden: 64,
        }
    }
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Copies rows of `src` (width `stride`) from `offset..offset+len` into a dense matrix.
pub fn columns(src: &[f64], stride: usize, offset: usize, len: usize) -> Vec<f64> {
    src.chunks_exact(stride).flat_map(|r| r[offset..offset + len].iter().copied()).collect()
}

/// Diagonal Gaussian log density of `a` under mean `mu`.
pub fn gaussian_log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (1.0 + LN_2PI)).sum()
}

pub fn sample_action(mu: &[f64], log_std: &[f64], rng: &mut SimRng) -> Vec<f64> {
    mu.iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let e: f64 = StandardNormal.sample(rng);
            m + ls.exp() * e
        })
        .collect()
}

/// Assembles the backbone input `proprio | latent | heading, W, v_cmd | z`
/// from a raw observation in `layout`, substituting `latent` and `z`.
pub fn backbone_input(raw: &[f64], layout: &Layout, latent: &[f64], z: &[f64], batch: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(batch * STUDENT.total);
    for b in 0..batch {
        let r = &raw[b * layout.total..(b + 1) * layout.total];
        u.extend_from_slice(&r[..PROPRIO_DIM]);
        u.extend_from_slice(&latent[b * LATENT_DIM..(b + 1) * LATENT_DIM]);
        u.extend_from_slice(&r[layout.heading..layout.latent]);
        u.extend_from_slice(&z[b * ENV_LATENT_DIM..(b + 1) * ENV_LATENT_DIM]);
    }
    u
}

/// Phase-1 networks. Raw observations carry zeros in the `z` slot; the
/// environment encoder fills it from the privileged factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherNets {
    pub config: NetConfig,
    pub scan_encoder: Mlp,
    pub env_encoder: Mlp,
    pub adapt_encoder: Mlp,
    pub actor: Mlp,
    pub log_std: Tensor,
    pub critic: Mlp,
}

/// Activations kept for the backward pass of [`TeacherNets::forward_cached`].
pub struct TeacherCache {
    pub batch: usize,
    scan: MlpCache,
    env: MlpCache,
    actor: MlpCache,
    critic: MlpCache,
    pub z: Vec<f64>,
}

impl TeacherNets {
    pub fn new(config: NetConfig, rng: &mut SimRng) -> Self {
        let c = &config;
        let scan_encoder = Mlp::new(&sizes(SCANDOT_DIM, &c.scan_hidden, LATENT_DIM), Activation::Elu, 1.0, rng);
        let env_encoder = Mlp::new(&sizes(EnvFactors::DIM, &c.env_hidden, ENV_LATENT_DIM), Activation::Elu, 1.0, rng);
        let adapt_encoder =
            Mlp::new(&sizes(HISTORY_LEN * PROPRIO_DIM, &c.adapt_hidden, ENV_LATENT_DIM), Activation::Elu, 1.0, rng);
        let actor = Mlp::new(&sizes(STUDENT.total, &c.actor_hidden, ACTION_DIM), Activation::Elu, 0.01, rng);
        let critic = Mlp::new(&sizes(TEACHER.total, &c.critic_hidden, 1), Activation::Elu, 1.0, rng);
        let mut log_std = Tensor::zeros(&[ACTION_DIM]);
        log_std.data.fill(c.init_log_std as f32 as f64);
        Self { config, scan_encoder, env_encoder, adapt_encoder, actor, log_std, critic }
    }

    /// Fills the `z` slot of teacher observations in place.
    pub fn insert_z(obs: &mut [f64], z: &[f64]) {
        for (row, zr) in obs.chunks_exact_mut(TEACHER.total).zip(z.chunks_exact(ENV_LATENT_DIM)) {
            row[TEACHER.latent..].copy_from_slice(zr);
        }
    }

    pub fn encode_env(&self, factors: &[f64], batch: usize) -> Vec<f64> {
        self.env_encoder.forward(factors, batch)
    }

    /// Action means and values for a batch of raw teacher observations.
    pub fn forward(&self, raw: &[f64], factors: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let z = self.env_encoder.forward(factors, batch);
        let latent = self.scan_encoder.forward(&columns(raw, TEACHER.total, TEACHER.extero, SCANDOT_DIM), batch);
        let u = backbone_input(raw, &TEACHER, &latent, &z, batch);
        let mean = self.actor.forward(&u, batch);
        let mut full = raw.to_vec();
        Self::insert_z(&mut full, &z);
        let value = self.critic.forward(&full, batch);
        (mean, value)
    }

    /// Action means only.
    pub fn act(&self, raw: &[f64], factors: &[f64], batch: usize) -> Vec<f64> {
        let z = self.env_encoder.forward(factors, batch);
        let latent = self.scan_encoder.forward(&columns(raw, TEACHER.total, TEACHER.extero, SCANDOT_DIM), batch);
        self.actor.forward(&backbone_input(raw, &TEACHER, &latent, &z, batch), batch)
    }

    pub fn forward_cached(&self, raw: &[f64], factors: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>, TeacherCache) {
        let (z, env) = self.env_encoder.forward_cached(factors, batch);
        let (latent, scan) =
            self.scan_encoder.forward_cached(&columns(raw, TEACHER.total, TEACHER.extero, SCANDOT_DIM), batch);
        let (mean, actor) = self.actor.forward_cached(&backbone_input(raw, &TEACHER, &latent, &z, batch), batch);
        let mut full = raw.to_vec();
        Self::insert_z(&mut full, &z);
        let (value, critic) = self.critic.forward_cached(&full, batch);
        (mean, value, TeacherCache { batch, scan, env, actor, critic, z })
    }

    /// Backpropagates `d mean` and `d value`; `dz_extra` adds gradient on `z`
    /// from other losses. The critic does not push gradient into `z`.
    pub fn backward(&mut self, cache: &TeacherCache, dmean: &[f64], dvalue: &[f64], dz_extra: Option<&[f64]>) {
        let b = cache.batch;
        self.critic.backward(&cache.critic, dvalue);
        let du = self.actor.backward(&cache.actor, dmean);
        let w = STUDENT.total;
        let dlatent = columns(&du, w, STUDENT.extero, LATENT_DIM);
        let mut dz = columns(&du, w, STUDENT.latent, ENV_LATENT_DIM);
        if let Some(extra) = dz_extra {
            for (a, e) in dz.iter_mut().zip(extra) {
                *a += e;
            }
        }
        self.scan_encoder.backward(&cache.scan, &dlatent);
        self.env_encoder.backward(&cache.env, &dz);
        debug_assert_eq!(dz.len(), b * ENV_LATENT_DIM);
    }

    /// Every trainable tensor with a stable name, in optimiser order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        let groups: [(&str, Vec<&Tensor>); 5] = [
            ("scan_encoder", self.scan_encoder.tensors()),
            ("env_encoder", self.env_encoder.tensors()),
            ("adapt_encoder", self.adapt_encoder.tensors()),
            ("actor", self.actor.tensors()),
            ("critic", self.critic.tensors()),
        ];
        for (name, ts) in groups {
            for (i, t) in ts.into_iter().enumerate() {
                v.push((format!("{name}.{i}"), t));
            }
        }
        v.push(("log_std".into(), &self.log_std));
        v
    }
}

impl Module for TeacherNets {
    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.scan_encoder.tensors_mut();
        v.extend(self.env_encoder.tensors_mut());
        v.extend(self.adapt_encoder.tensors_mut());
        v.extend(self.actor.tensors_mut());
        v.extend(self.critic.tensors_mut());
        v.push(&mut self.log_std);
        v
    }
}

/// Convolutional + recurrent depth encoder producing the latent and a yaw estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEncoder {
    pub pool: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
    pub gru: Gru,
    /// Hidden state to `LATENT_DIM` latent values plus one yaw prediction.
    pub head: Linear,
}

pub struct DepthCache {
    batch: usize,
    pooled: Vec<f64>,
    c1_pre: Vec<f64>,
    c1: Vec<f64>,
    c2_pre: Vec<f64>,
    c2: Vec<f64>,
    fc_pre: Vec<f64>,
    gru_in: Vec<f64>,
    gru: GruCache,
    h_new: Vec<f64>,
}

fn elu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { x.exp_m1() }).collect()
}

fn elu_back(g: &mut [f64], pre: &[f64], post: &[f64]) {
    for ((g, &x), &y) in g.iter_mut().zip(pre).zip(post) {
        if x <= 0.0 {
            *g *= y + 1.0;
        }
    }
}

impl DepthEncoder {
    pub fn new(c: &NetConfig, rng: &mut SimRng) -> Self {
        let (ph, pw) = (DEPTH_ROWS / c.depth_pool, DEPTH_COLS / c.depth_pool);
        let conv1 = Conv2d::new(1, c.conv_channels.0, 5, 2, rng);
        let (h1, w1) = conv1.out_shape(ph, pw);
        let conv2 = Conv2d::new(c.conv_channels.0, c.conv_channels.1, 3, 2, rng);
        let (h2, w2) = conv2.out_shape(h1, w1);
        let fc = Linear::new(c.conv_channels.1 * h2 * w2, c.depth_fc, std::f64::consts::SQRT_2, rng);
        let gru = Gru::new(c.depth_fc + PROPRIO_DIM, c.gru_hidden, rng);
        let mut head = Linear::new(c.gru_hidden, LATENT_DIM + 1, 1.0, rng);
        // the yaw estimate starts at "aligned" so early gated headings are unbiased
        head.w.data[LATENT_DIM * c.gru_hidden..].fill(0.0);
        Self { pool: c.depth_pool, conv1, conv2, fc, gru, head }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden()
    }

    fn pooled_shape(&self) -> (usize, usize) {
        (DEPTH_ROWS / self.pool, DEPTH_COLS / self.pool)
    }

    /// `images`: `batch` normalised 58x87 frames; returns `(head output, cache)`
    /// where each head row is `LATENT_DIM` latent values then the yaw estimate.
    pub fn forward(&self, images: &[&[f32]], proprio: &[f64], h: &[f64]) -> (Vec<f64>, DepthCache) {
        let batch = images.len();
        let (ph, pw) = self.pooled_shape();
        let mut pooled = Vec::with_capacity(batch * ph * pw);
        for img in images {
            pooled.extend(avg_pool(img, DEPTH_ROWS, DEPTH_COLS, self.pool).0);
        }
        let c1_pre = self.conv1.forward(&pooled, batch, ph, pw);
        let c1 = elu(&c1_pre);
        let (h1, w1) = self.conv1.out_shape(ph, pw);
        let c2_pre = self.conv2.forward(&c1, batch, h1, w1);
        let c2 = elu(&c2_pre);
        let fc_pre = self.fc.forward(&c2, batch);
        let fc = elu(&fc_pre);
        let fd = self.fc.out_dim();
        let mut gru_in = Vec::with_capacity(batch * (fd + PROPRIO_DIM));
        for b in 0..batch {
            gru_in.extend_from_slice(&fc[b * fd..(b + 1) * fd]);
            gru_in.extend_from_slice(&proprio[b * PROPRIO_DIM..(b + 1) * PROPRIO_DIM]);
        }
        let (h_new, gru) = self.gru.forward(&gru_in, h, batch);
        let out = self.head.forward(&h_new, batch);
        (out, DepthCache { batch, pooled, c1_pre, c1, c2_pre, c2, fc_pre, gru_in, gru, h_new })
    }

    pub fn new_hidden(cache: &DepthCache) -> &[f64] {
        &cache.h_new
    }

    /// Backpropagates through one recurrent step; the incoming hidden state is
    /// treated as a constant.
    pub fn backward(&mut self, cache: &DepthCache, dout: &[f64]) {
        let batch = cache.batch;
        let (ph, pw) = self.pooled_shape();
        let (h1, w1) = self.conv1.out_shape(ph, pw);
        let dh = self.head.backward(&cache.h_new, dout, batch);
        let (dgin, _) = self.gru.backward(&cache.gru, &dh);
        let fd = self.fc.out_dim();
        let stride = fd + PROPRIO_DIM;
        let mut dfc = columns(&dgin, stride, 0, fd);
        let fc_post = elu(&cache.fc_pre);
        elu_back(&mut dfc, &cache.fc_pre, &fc_post);
        let mut dc2 = self.fc.backward(&cache.c2, &dfc, batch);
        elu_back(&mut dc2, &cache.c2_pre, &cache.c2);
        let mut dc1 = self.conv2.backward(&cache.c1, &dc2, batch, h1, w1);
        elu_back(&mut dc1, &cache.c1_pre, &cache.c1);
        self.conv1.backward(&cache.pooled, &dc1, batch, ph, pw);
        debug_assert_eq!(cache.gru_in.len(), batch * stride);
    }
}

impl Module for DepthEncoder {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.conv1.tensors();
        v.extend(self.conv2.tensors());
        v.extend(self.fc.tensors());
        v.extend(self.gru.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv1.tensors_mut();
        v.extend(self.conv2.tensors_mut());
        v.extend(self.fc.tensors_mut());
        v.extend(self.gru.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Phase-2 networks: a fresh depth encoder, the teacher's backbone and its
/// (frozen) history encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentNets {
    pub config: NetConfig,
    pub depth: DepthEncoder,
    pub actor: Mlp,
    pub adapt_encoder: Mlp,
}

impl StudentNets {
    pub fn from_teacher(teacher: &TeacherNets, rng: &mut SimRng) -> Self {
        Self {
            config: teacher.config.clone(),
            depth: DepthEncoder::new(&teacher.config, rng),
            actor: teacher.actor.clone(),
            adapt_encoder: teacher.adapt_encoder.clone(),
        }
    }

    /// Action means for raw student observations whose `z` slot is already filled.
    pub fn act(&self, obs: &[f64], batch: usize) -> Vec<f64> {
        self.actor.forward(obs, batch)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        let groups: [(&str, Vec<&Tensor>); 3] = [
            ("depth", self.depth.tensors()),
            ("actor", self.actor.tensors()),
            ("adapt_encoder", self.adapt_encoder.tensors()),
        ];
        for (name, ts) in groups {
            for (i, t) in ts.into_iter().enumerate() {
                v.push((format!("{name}.{i}"), t));
            }
        }
        v
    }
}

impl Module for StudentNets {
    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.depth.tensors_mut();
        v.extend(self.actor.tensors_mut());
        v.extend(self.adapt_encoder.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use parkour_core::rng;
    use rand::Rng;

    #[test]
    fn log_prob_matches_closed_form() {
        let ls = [0.1, -0.3];
        let lp = gaussian_log_prob(&[0.5, -0.2], &[0.2, 0.1], &ls);
        let expect: f64 = [(0.3, 0.1f64), (-0.3, -0.3f64)]
            .iter()
            .map(|&(d, l)| -0.5 * (d / l.exp()).powi(2) - l - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        assert!((lp - expect).abs() < 1e-12);
        assert!((gaussian_entropy(&[0.0]) - 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn teacher_shapes_and_cached_forward_agree() {
        let mut r = rng::stream(0, 0);
        let t = TeacherNets::new(NetConfig::default(), &mut r);
        let raw: Vec<f64> = (0..2 * TEACHER.total).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = [1.0, 1.0, 0.2, 0.8, 1.1, 0.0];
        let (m, v) = t.forward(&raw, &f, 2);
        let (m2, v2, _) = t.forward_cached(&raw, &f, 2);
        assert_eq!((m.len(), v.len()), (2 * ACTION_DIM, 2));
        assert_eq!((m, v), (m2, v2));
    }

    #[test]
    fn teacher_gradient_matches_finite_difference() {
        let mut r = rng::stream(1, 0);
        let cfg = NetConfig { scan_hidden: vec![4], actor_hidden: vec![4], critic_hidden: vec![4], env_hidden: vec![3], ..Default::default() };
        let t = TeacherNets::new(cfg, &mut r);
        let raw: Vec<f64> = (0..TEACHER.total).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = [0.9, 1.1, 0.3];
        // the critic reads z but must not train it, so check the two heads separately
        for value_head in [false, true] {
            let loss = |t: &TeacherNets| {
                let (m, v) = t.forward(&raw, &f, 1);
                if value_head {
                    v[0] * v[0]
                } else {
                    m.iter().enumerate().map(|(i, x)| x * (i as f64 - 5.0)).sum::<f64>()
                }
            };
            let mut g = t.clone();
            g.zero_grad();
            let (_, v, c) = g.forward_cached(&raw, &f, 1);
            let dm: Vec<f64> = (0..ACTION_DIM).map(|i| if value_head { 0.0 } else { i as f64 - 5.0 }).collect();
            let dv = if value_head { 2.0 * v[0] } else { 0.0 };
            g.backward(&c, &dm, &[dv], None);
            let names: Vec<String> = t.named_tensors().iter().map(|(n, _)| n.clone()).collect();
            for (ti, name) in names.iter().enumerate() {
                if name.starts_with("adapt") || name == "log_std" || name.starts_with("critic") != value_head {
                    continue;
                }
                for k in [0, t.tensors()[ti].len() - 1] {
                    let mut p = t.clone();
                    p.tensors_mut()[ti].data[k] += 1e-6;
                    let mut q = t.clone();
                    q.tensors_mut()[ti].data[k] -= 1e-6;
                    let fd = (loss(&p) - loss(&q)) / 2e-6;
                    let an = g.tensors()[ti].grad[k];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-2), "{name}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn depth_encoder_gradient_matches_finite_difference() {
        let mut r = rng::stream(2, 0);
        let cfg = NetConfig { conv_channels: (2, 2), depth_fc: 4, gru_hidden: 3, depth_pool: 3, ..Default::default() };
        let enc = DepthEncoder::new(&cfg, &mut r);
        let img: Vec<f32> = (0..DEPTH_ROWS * DEPTH_COLS).map(|_| r.random_range(-0.5f32..0.5)).collect();
        let prop: Vec<f64> = (0..PROPRIO_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = vec![0.1, -0.2, 0.3];
        let w: Vec<f64> = (0..LATENT_DIM + 1).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |e: &DepthEncoder| e.forward(&[&img], &prop, &h).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let mut g = enc.clone();
        g.zero_grad();
        let (_, c) = g.forward(&[&img], &prop, &h);
        g.backward(&c, &w);
        let n = enc.tensors().len();
        for ti in 0..n {
            for k in [0, enc.tensors()[ti].len() / 2] {
                let mut p = enc.clone();
                p.tensors_mut()[ti].data[k] += 1e-6;
                let mut q = enc.clone();
                q.tensors_mut()[ti].data[k] -= 1e-6;
                let fd = (loss(&p) - loss(&q)) / 2e-6;
                let an = g.tensors()[ti].grad[k];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "tensor {ti}[{k}]: {fd} vs {an}");
            }
        }
    }
}
