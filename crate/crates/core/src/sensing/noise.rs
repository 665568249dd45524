//! Elevation-map noise for the modular-perception baseline: per-point height
//! noise plus a slowly drifting planar offset of the whole sample pattern.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scandots::{BasePose, ScandotPattern};
use crate::rng::{self, SimRng};
use crate::terrain::Heightfield;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Std-dev of independent per-point height noise, metres.
    pub sigma_z: f64,
    /// Stationary std-dev of the world-frame pattern drift, metres.
    pub drift_sigma: f64,
    /// Step-to-step correlation of the drift, in `[0, 1)`.
    pub drift_rho: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma_z: 0.05, drift_sigma: 0.1, drift_rho: 0.95 }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self { sigma_z: 0.0, drift_sigma: 0.0, drift_rho: 0.0 }
    }
}

/// Samples the pattern displaced by `drift` (world frame) and adds height noise.
pub fn noisy_elevation(
    hf: &Heightfield,
    pose: &BasePose,
    pattern: &ScandotPattern,
    drift: [f64; 2],
    sigma_z: f64,
    rng: &mut SimRng,
) -> Vec<f64> {
    pattern
        .world_points(pose)
        .map(|(x, y)| {
            let mut h = hf.height_at(x + drift[0], y + drift[1]) - pose.z;
            if sigma_z > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                h += sigma_z * n;
            }
            h
        })
        .collect()
}

/// Stateful noise source; the drift follows an AR(1) process across steps.
#[derive(Clone, Debug)]
pub struct ElevationNoise {
    cfg: NoiseConfig,
    rng: SimRng,
    drift: [f64; 2],
}

impl ElevationNoise {
    pub fn new(cfg: NoiseConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0x0015e);
        let mut drift = [0.0; 2];
        if cfg.drift_sigma > 0.0 {
            for d in &mut drift {
                let n: f64 = rng.sample(StandardNormal);
                *d = cfg.drift_sigma * n;
            }
        }
        Self { cfg, rng, drift }
    }

    pub fn drift(&self) -> [f64; 2] {
        self.drift
    }

    /// Noisy scandots for this step, then advances the drift.
    pub fn sample(&mut self, hf: &Heightfield, pose: &BasePose, pattern: &ScandotPattern) -> Vec<f64> {
        let out = noisy_elevation(hf, pose, pattern, self.drift, self.cfg.sigma_z, &mut self.rng);
        if self.cfg.drift_sigma > 0.0 {
            let rho = self.cfg.drift_rho;
            let innovation = self.cfg.drift_sigma * (1.0 - rho * rho).sqrt();
            for d in &mut self.drift {
                let n: f64 = self.rng.sample(StandardNormal);
                *d = rho * *d + innovation * n;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::sample_scandots;
    use crate::terrain::CELL_SIZE;

    fn slope(grade: f64) -> Heightfield {
        let (nx, ny) = (201, 81);
        let mut h = Vec::new();
        for ix in 0..nx {
            for _ in 0..ny {
                h.push((grade * ix as f64 * CELL_SIZE) as f32);
            }
        }
        Heightfield::new(CELL_SIZE, nx, ny, [-2.0, -1.0], h).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let hf = slope(0.2);
        let pattern = ScandotPattern::default();
        let pose = BasePose { x: 0.3, y: 0.1, z: 0.26, yaw: 0.4 };
        let mut noise = ElevationNoise::new(NoiseConfig::zero(), 5);
        for _ in 0..3 {
            assert_eq!(noise.sample(&hf, &pose, &pattern), sample_scandots(&hf, &pose, &pattern));
        }
    }

    #[test]
    fn height_noise_variance() {
        let hf = Heightfield::flat(0.0, 2.0, 2.0, [-1.0, -1.0]).unwrap();
        let pattern = ScandotPattern::default();
        let pose = BasePose::default();
        let mut rng = rng::stream(3, 0);
        let mut samples = Vec::new();
        while samples.len() < 100_000 {
            samples.extend(noisy_elevation(&hf, &pose, &pattern, [0.0; 2], 0.05, &mut rng));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.0025).abs() < 0.05 * 0.0025, "variance {var}");
    }

    #[test]
    fn drift_shifts_by_grade_times_offset() {
        let grade = 0.3;
        let hf = slope(grade);
        let pattern = ScandotPattern::default();
        let pose = BasePose { x: 0.0, y: 0.0, z: 0.0, yaw: 0.0 };
        let clean = sample_scandots(&hf, &pose, &pattern);
        let mut rng = rng::stream(0, 0);
        let shifted = noisy_elevation(&hf, &pose, &pattern, [0.1, 0.0], 0.0, &mut rng);
        let offset = shifted.iter().zip(&clean).map(|(a, b)| a - b).sum::<f64>() / clean.len() as f64;
        assert!((offset - 0.1 * grade).abs() < 1e-6, "{offset}");
    }
}
