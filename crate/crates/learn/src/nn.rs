//! Small batched networks with hand-written backward passes.
//!
//! Tensors are row-major `f64`. Parameters are rounded to `f32` after every
//! optimiser step so checkpoints (stored as `f32`) round-trip exactly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Eight-lane dot product; fixed summation order keeps results reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A parameter tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = (z * std) as f32 as f64;
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn zero_grad_if_empty(&mut self) {
        if self.grad.len() != self.data.len() {
            self.grad = vec![0.0; self.data.len()];
        }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.data.len() {
            self.grad = vec![0.0; self.data.len()];
        } else {
            self.grad.fill(0.0);
        }
    }
}

/// Anything holding named parameter tensors.
pub trait Module {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Gaussian init scaled by `gain / sqrt(fan_in)`, zero bias.
    pub fn new(inp: usize, out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self { w: Tensor::randn(&[out, inp], gain / (inp as f64).sqrt(), rng), b: Tensor::zeros(&[out]) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (inp, out) = (self.in_dim(), self.out_dim());
        debug_assert_eq!(x.len(), batch * inp);
        let mut y = vec![0.0; batch * out];
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime
            unsafe { forward_avx2(&self.w.data, &self.b.data, x, &mut y, inp, out) };
            return y;
        }
        forward_kernel(&self.w.data, &self.b.data, x, &mut y, inp, out);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], batch: usize) -> Vec<f64> {
        let (inp, out) = (self.in_dim(), self.out_dim());
        self.w.zero_grad_if_empty();
        self.b.zero_grad_if_empty();
        let mut dx = vec![0.0; batch * inp];
        let (w, gw, gb) = (&self.w.data, &mut self.w.grad, &mut self.b.grad);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime
            unsafe { backward_avx2(w, gw, gb, x, dy, &mut dx, inp, out) };
            return dx;
        }
        backward_kernel(w, gw, gb, x, dy, &mut dx, inp, out);
        dx
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`; `a` is addressed as `a[r * rs + p * cs]`,
/// `b` and `c` are row-major.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64]) {
    let wide = n - n % 8;
    let tall = m - m % 4;
    for r in (0..tall).step_by(4) {
        for j in (0..wide).step_by(8) {
            let mut acc = [[0.0f64; 8]; 4];
            for p in 0..k {
                let bv: &[f64; 8] = b[p * n + j..p * n + j + 8].try_into().unwrap();
                for q in 0..4 {
                    let v = a[(r + q) * rs + p * cs];
                    for l in 0..8 {
                        acc[q][l] += v * bv[l];
                    }
                }
            }
            for q in 0..4 {
                for l in 0..8 {
                    c[(r + q) * n + j + l] += acc[q][l];
                }
            }
        }
    }
    for r in 0..m {
        let lo = if r < tall { wide } else { 0 };
        if lo == n {
            continue;
        }
        let mut acc = vec![0.0; n - lo];
        for p in 0..k {
            axpy(a[r * rs + p * cs], &b[p * n + lo..(p + 1) * n], &mut acc);
        }
        for (co, v) in c[r * n + lo..(r + 1) * n].iter_mut().zip(&acc) {
            *co += v;
        }
    }
}

#[inline(always)]
fn forward_kernel(w: &[f64], bias: &[f64], x: &[f64], y: &mut [f64], inp: usize, out: usize) {
    let mut wt = vec![0.0; inp * out];
    for o in 0..out {
        for i in 0..inp {
            wt[i * out + o] = w[o * inp + i];
        }
    }
    for yr in y.chunks_exact_mut(out) {
        yr.copy_from_slice(bias);
    }
    gemm_acc(y.len() / out, out, inp, x, inp, 1, &wt, y);
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_kernel(
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    inp: usize,
    out: usize,
) {
    let batch = dy.len() / out;
    gemm_acc(out, inp, batch, dy, 1, out, x, gw);
    for dyr in dy.chunks_exact(out) {
        for (g, d) in gb.iter_mut().zip(dyr) {
            *g += d;
        }
    }
    gemm_acc(batch, inp, out, dy, out, 1, w, dx);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_avx2(w: &[f64], bias: &[f64], x: &[f64], y: &mut [f64], inp: usize, out: usize) {
    forward_kernel(w, bias, x, y, inp, out)
}

#[allow(clippy::too_many_arguments)]
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn backward_avx2(
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    inp: usize,
    out: usize,
) {
    backward_kernel(w, gw, gb, x, dy, dx, inp, out)
}

impl Module for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Hidden layers share one activation; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Per-layer inputs and pre-activations saved by [`Mlp::forward_cached`].
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    batch: usize,
}

impl Mlp {
    /// `sizes` lists every width including input and output; the last layer
    /// is initialised with `out_gain`.
    pub fn new(sizes: &[usize], activation: Activation, out_gain: f64, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { std::f64::consts::SQRT_2 };
                Linear::new(sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h, batch);
            if i < last {
                for v in &mut h {
                    *v = self.activation.apply(*v);
                }
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache { batch, ..Default::default() };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(&h, batch);
            cache.inputs.push(h);
            if i < last {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        (h, cache)
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let pre = &cache.pre[i];
                let post = &cache.inputs[i + 1];
                for ((gv, &x), &y) in g.iter_mut().zip(pre).zip(post) {
                    *gv *= self.activation.grad(x, y);
                }
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, cache.batch);
        }
        g
    }
}

impl Module for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Valid (unpadded) strided 2-D convolution over `(batch, channels, h, w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        Self {
            w: Tensor::randn(&[out_c, in_c, k, k], std::f64::consts::SQRT_2 / fan_in.sqrt(), rng),
            b: Tensor::zeros(&[out_c]),
            stride,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape[2];
        ((h - k) / self.stride + 1, (w - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
        let (oc, ic, k) = (self.w.shape[0], self.w.shape[1], self.w.shape[2]);
        let (oh, ow) = self.out_shape(h, w);
        let s = self.stride;
        let mut y = vec![0.0; batch * oc * oh * ow];
        for n in 0..batch {
            let xn = &x[n * ic * h * w..(n + 1) * ic * h * w];
            for o in 0..oc {
                let yo = &mut y[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow];
                yo.fill(self.b.data[o]);
                for c in 0..ic {
                    let xc = &xn[c * h * w..(c + 1) * h * w];
                    for ki in 0..k {
                        for kj in 0..k {
                            let wv = self.w.data[((o * ic + c) * k + ki) * k + kj];
                            for i in 0..oh {
                                let row = &xc[(i * s + ki) * w + kj..];
                                let yr = &mut yo[i * ow..(i + 1) * ow];
                                for (j, yv) in yr.iter_mut().enumerate() {
                                    *yv += wv * row[j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], batch: usize, h: usize, w: usize) -> Vec<f64> {
        let (oc, ic, k) = (self.w.shape[0], self.w.shape[1], self.w.shape[2]);
        let (oh, ow) = self.out_shape(h, w);
        let s = self.stride;
        self.w.zero_grad_if_empty();
        self.b.zero_grad_if_empty();
        let mut dx = vec![0.0; x.len()];
        for n in 0..batch {
            let base = n * ic * h * w;
            for o in 0..oc {
                let go = &dy[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow];
                self.b.grad[o] += go.iter().sum::<f64>();
                for c in 0..ic {
                    for ki in 0..k {
                        for kj in 0..k {
                            let widx = ((o * ic + c) * k + ki) * k + kj;
                            let wv = self.w.data[widx];
                            let mut gw = 0.0;
                            for i in 0..oh {
                                let off = base + c * h * w + (i * s + ki) * w + kj;
                                for j in 0..ow {
                                    let g = go[i * ow + j];
                                    gw += g * x[off + j * s];
                                    dx[off + j * s] += g * wv;
                                }
                            }
                            self.w.grad[widx] += gw;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Non-overlapping `k x k` average pooling of a single-channel image; trailing
/// rows and columns that do not fill a window are dropped.
pub fn avg_pool(x: &[f32], h: usize, w: usize, k: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / k, w / k);
    let mut y = vec![0.0; oh * ow];
    let scale = 1.0 / (k * k) as f64;
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for a in 0..k {
                for b in 0..k {
                    s += x[(i * k + a) * w + j * k + b] as f64;
                }
            }
            y[i * ow + j] = s * scale;
        }
    }
    (y, oh, ow)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated recurrent unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    /// Input projection to `[r, z, n]`.
    pub wx: Linear,
    /// Hidden projection to `[r, z, n]`.
    pub wh: Linear,
}

#[derive(Clone, Debug, Default)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
    batch: usize,
}

impl Gru {
    pub fn new(inp: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self { wx: Linear::new(inp, 3 * hidden, 1.0, rng), wh: Linear::new(hidden, 3 * hidden, 1.0, rng) }
    }

    pub fn hidden(&self) -> usize {
        self.wh.in_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.wx.in_dim()
    }

    pub fn forward(&self, x: &[f64], h: &[f64], batch: usize) -> (Vec<f64>, GruCache) {
        let hd = self.hidden();
        let gx = self.wx.forward(x, batch);
        let gh = self.wh.forward(h, batch);
        let mut out = vec![0.0; batch * hd];
        let mut c = GruCache {
            x: x.to_vec(),
            h: h.to_vec(),
            r: vec![0.0; batch * hd],
            z: vec![0.0; batch * hd],
            n: vec![0.0; batch * hd],
            hn: vec![0.0; batch * hd],
            batch,
        };
        for b in 0..batch {
            for j in 0..hd {
                let (gxb, ghb) = (&gx[b * 3 * hd..], &gh[b * 3 * hd..]);
                let r = sigmoid(gxb[j] + ghb[j]);
                let z = sigmoid(gxb[hd + j] + ghb[hd + j]);
                let hn = ghb[2 * hd + j];
                let n = (gxb[2 * hd + j] + r * hn).tanh();
                let i = b * hd + j;
                out[i] = (1.0 - z) * n + z * h[i];
                c.r[i] = r;
                c.z[i] = z;
                c.n[i] = n;
                c.hn[i] = hn;
            }
        }
        (out, c)
    }

    /// Returns `(dL/dx, dL/dh)`.
    pub fn backward(&mut self, c: &GruCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden();
        let batch = c.batch;
        let mut dgx = vec![0.0; batch * 3 * hd];
        let mut dgh = vec![0.0; batch * 3 * hd];
        let mut dh = vec![0.0; batch * hd];
        for b in 0..batch {
            for j in 0..hd {
                let i = b * hd + j;
                let g = dout[i];
                let (r, z, n, hn) = (c.r[i], c.z[i], c.n[i], c.hn[i]);
                dh[i] += g * z;
                let dn = g * (1.0 - z) * (1.0 - n * n);
                let dz = g * (c.h[i] - n) * z * (1.0 - z);
                let dr = dn * hn * r * (1.0 - r);
                let o = b * 3 * hd;
                dgx[o + j] = dr;
                dgh[o + j] = dr;
                dgx[o + hd + j] = dz;
                dgh[o + hd + j] = dz;
                dgx[o + 2 * hd + j] = dn;
                dgh[o + 2 * hd + j] = dn * r;
            }
        }
        let dx = self.wx.backward(&c.x, &dgx, batch);
        let dh2 = self.wh.backward(&c.h, &dgh, batch);
        for (a, b) in dh.iter_mut().zip(&dh2) {
            *a += b;
        }
        (dx, dh)
    }
}

impl Module for Gru {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.wx.tensors();
        v.extend(self.wh.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.wx.tensors_mut();
        v.extend(self.wh.tensors_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: 1.0 }
    }
}

/// Adam over a fixed, ordered list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, tensors: Vec<&mut Tensor>) -> f64 {
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), tensors.len(), "optimiser reused with a different parameter list");
        let norm = tensors.iter().flat_map(|t| t.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / norm
        } else {
            1.0
        };
        if self.cfg.lr == 0.0 {
            return norm;
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((t, m), v) in tensors.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if t.grad.len() != t.data.len() {
                continue;
            }
            for i in 0..t.data.len() {
                let g = t.grad[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let upd = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                t.data[i] = (t.data[i] - upd) as f32 as f64;
            }
        }
        norm
    }
}
