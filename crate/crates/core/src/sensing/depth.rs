//! Depth rendering by ray marching the heightfield, plus the on-robot
//! preprocessing chain (crop, area downsample, normalise).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terrain::Heightfield;

pub const DEPTH_ROWS: usize = 58;
pub const DEPTH_COLS: usize = 87;

/// Pinhole camera with ray-marching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Camera {
    /// Full horizontal / vertical field of view, radians.
    pub hfov: f64,
    pub vfov: f64,
    pub near: f64,
    pub far: f64,
    pub march_step: f64,
    pub refinements: u32,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            hfov: 87f64.to_radians(),
            vfov: 58f64.to_radians(),
            near: 0.05,
            far: 2.0,
            march_step: 0.01,
            refinements: 8,
        }
    }
}

/// Camera placement. `pitch > 0` tilts the optical axis down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl CameraPose {
    /// Rotates a camera-frame vector (x forward, y left, z up) into the world frame.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let (sr, cr) = self.roll.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        let [x, y, z] = v;
        // roll about x
        let (y, z) = (cr * y - sr * z, sr * y + cr * z);
        // nose-down pitch about y
        let (x, z) = (cp * x + sp * z, -sp * x + cp * z);
        // yaw about z
        [cy * x - sy * y, sy * x + cy * y, z]
    }

    /// Unit optical axis in the world frame.
    pub fn forward(&self) -> [f64; 3] {
        self.rotate([1.0, 0.0, 0.0])
    }
}

impl Camera {
    /// World-frame unit ray through the centre of pixel `(row, col)` of a `rows x cols` image.
    pub fn pixel_ray(&self, pose: &CameraPose, row: usize, col: usize, rows: usize, cols: usize) -> [f64; 3] {
        let u = ((col as f64 + 0.5) / cols as f64 * 2.0 - 1.0) * (self.hfov / 2.0).tan();
        let v = ((row as f64 + 0.5) / rows as f64 * 2.0 - 1.0) * (self.vfov / 2.0).tan();
        let n = (1.0 + u * u + v * v).sqrt();
        pose.rotate([1.0 / n, -u / n, -v / n])
    }

    /// Range along `dir` to the first terrain hit, or `far` on a miss; clipped to `[near, far]`.
    ///
    /// Cells are treated as flat-topped columns, so vertical faces sit exactly on
    /// cell boundaries. Fixed steps find a bracketing interval, which is then
    /// bisected `refinements` times.
    pub fn cast_ray(&self, hf: &Heightfield, origin: [f64; 3], dir: [f64; 3]) -> f64 {
        let below = |t: f64| {
            let z = origin[2] + t * dir[2];
            z <= hf.height_nearest(origin[0] + t * dir[0], origin[1] + t * dir[1])
        };
        let top = hf.max_height();
        let mut t0 = self.near;
        let z0 = origin[2] + t0 * dir[2];
        if z0 > top {
            // nothing can be hit above the tallest cell
            if dir[2] >= 0.0 {
                return self.far;
            }
            t0 = t0.max((origin[2] - top) / -dir[2]);
            if t0 >= self.far {
                return self.far;
            }
        }
        if below(t0) {
            return t0.clamp(self.near, self.far);
        }
        let mut lo = t0;
        loop {
            let hi = (lo + self.march_step).min(self.far);
            if below(hi) {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..self.refinements {
                    let m = 0.5 * (a + b);
                    if below(m) {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                return (0.5 * (a + b)).clamp(self.near, self.far);
            }
            if hi >= self.far {
                return self.far;
            }
            if dir[2] >= 0.0 && origin[2] + hi * dir[2] > top {
                return self.far;
            }
            lo = hi;
        }
    }
}

/// A depth image of arbitrary size, metres.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDepth {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub capture_time: f64,
}

/// A 58 x 87 range image in metres, every value inside the camera's clip range.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    values: Vec<f32>,
    capture_time: f64,
}

impl DepthImage {
    pub fn new(values: Vec<f32>, capture_time: f64, camera: &Camera) -> Result<Self> {
        if values.len() != DEPTH_ROWS * DEPTH_COLS {
            return Err(Error::contract(format!(
                "depth image must be {DEPTH_ROWS}x{DEPTH_COLS}, got {} values",
                values.len()
            )));
        }
        let (near, far) = (camera.near as f32, camera.far as f32);
        if let Some(v) = values.iter().find(|v| !(near..=far).contains(*v)) {
            return Err(Error::contract(format!("depth value {v} outside [{near}, {far}]")));
        }
        Ok(Self { values, capture_time })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn capture_time(&self) -> f64 {
        self.capture_time
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * DEPTH_COLS + col]
    }
}

/// A 58 x 87 image normalised to `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedDepth {
    pub values: Vec<f32>,
    pub capture_time: f64,
}

/// Renders an image of any size.
pub fn render_raw(hf: &Heightfield, pose: &CameraPose, camera: &Camera, rows: usize, cols: usize) -> RawDepth {
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dir = camera.pixel_ray(pose, r, c, rows, cols);
            values.push(camera.cast_ray(hf, pose.position, dir) as f32);
        }
    }
    RawDepth { rows, cols, values, capture_time: 0.0 }
}

/// Renders the policy-resolution range image.
pub fn render_depth(hf: &Heightfield, pose: &CameraPose, camera: &Camera, capture_time: f64) -> DepthImage {
    let raw = render_raw(hf, pose, camera, DEPTH_ROWS, DEPTH_COLS);
    DepthImage::new(raw.values, capture_time, camera).expect("raycaster output violates depth image contract")
}

fn normalize(v: f32, near: f64, far: f64) -> f32 {
    let v = (v as f64).clamp(near, far);
    ((v - near) / (far - near) - 0.5) as f32
}

/// Maps a rendered image into the policy's `[-0.5, 0.5]` range.
pub fn normalize_depth(img: &DepthImage, camera: &Camera) -> ProcessedDepth {
    ProcessedDepth {
        values: img.values.iter().map(|&v| normalize(v, camera.near, camera.far)).collect(),
        capture_time: img.capture_time,
    }
}

/// Box-filter weights mapping `n_in` samples onto `n_out` equal-area bins.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n_in {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Crops `crop_left` dead columns, area-averages down to 58 x 87 and normalises.
pub fn preprocess_depth(raw: &RawDepth, crop_left: usize, camera: &Camera) -> Result<ProcessedDepth> {
    if raw.values.len() != raw.rows * raw.cols {
        return Err(Error::config("raw depth buffer does not match its dimensions"));
    }
    if raw.rows < DEPTH_ROWS || raw.cols < crop_left + DEPTH_COLS {
        return Err(Error::config(format!(
            "native image {}x{} with crop {crop_left} is smaller than {DEPTH_ROWS}x{DEPTH_COLS}",
            raw.rows, raw.cols
        )));
    }
    let cols_in = raw.cols - crop_left;
    let wr = area_weights(raw.rows, DEPTH_ROWS);
    let wc = area_weights(cols_in, DEPTH_COLS);
    // rows first, then columns
    let mut tmp = vec![0.0f64; DEPTH_ROWS * cols_in];
    for (o, weights) in wr.iter().enumerate() {
        for &(r, w) in weights {
            let src = &raw.values[r * raw.cols + crop_left..(r + 1) * raw.cols];
            for (t, &v) in tmp[o * cols_in..(o + 1) * cols_in].iter_mut().zip(src) {
                *t += w * v as f64;
            }
        }
    }
    let mut values = Vec::with_capacity(DEPTH_ROWS * DEPTH_COLS);
    for r in 0..DEPTH_ROWS {
        for weights in &wc {
            let v: f64 = weights.iter().map(|&(c, w)| w * tmp[r * cols_in + c]).sum();
            values.push(normalize(v as f32, camera.near, camera.far));
        }
    }
    Ok(ProcessedDepth { values, capture_time: raw.capture_time })
}

pub const TRACE_MAGIC: &[u8; 4] = b"PKDP";
pub const TRACE_VERSION: u16 = 1;

/// Writes a `PKDP` depth trace: magic, version `u16`, frame count `u32`, then
/// per frame the capture time `f64` and 58 x 87 `f32` ranges (little-endian).
pub fn write_trace<W: Write>(mut w: W, frames: &[DepthImage]) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    for f in frames {
        w.write_all(&f.capture_time.to_le_bytes())?;
        for v in &f.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a `PKDP` trace back as `(capture_time, values)` pairs.
pub fn read_trace<R: Read>(mut r: R) -> Result<Vec<(f64, Vec<f32>)>> {
    let bad = |reason: &str| Error::Format { kind: "PKDP", reason: reason.into() };
    let mut head = [0u8; 10];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != TRACE_MAGIC {
        return Err(bad("bad magic"));
    }
    if u16::from_le_bytes([head[4], head[5]]) != TRACE_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let mut frames = Vec::new();
    let mut buf = vec![0u8; 8 + DEPTH_ROWS * DEPTH_COLS * 4];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| bad("truncated frame"))?;
        let t = f64::from_le_bytes(buf[..8].try_into().unwrap());
        let values = buf[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        frames.push((t, values));
    }
    Ok(frames)
}
