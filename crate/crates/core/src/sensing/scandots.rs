use serde::{Deserialize, Serialize};

use crate::terrain::Heightfield;

/// Planar base pose plus base height, as used for terrain sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

/// Body-frame sample points for terrain heights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScandotPattern {
    pub offsets: Vec<[f64; 2]>,
}

impl ScandotPattern {
    /// A regular `nx x ny` grid over `x_range x y_range` (body frame, metres).
    pub fn grid(nx: usize, ny: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let lerp = |(a, b): (f64, f64), i: usize, n: usize| {
            if n <= 1 {
                (a + b) / 2.0
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        let mut offsets = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                offsets.push([lerp(x_range, i, nx), lerp(y_range, j, ny)]);
            }
        }
        Self { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// World-frame `(x, y)` of every sample point for a base at `pose`.
    pub fn world_points(&self, pose: &BasePose) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (s, c) = pose.yaw.sin_cos();
        let (x, y) = (pose.x, pose.y);
        self.offsets.iter().map(move |&[dx, dy]| (x + c * dx - s * dy, y + s * dx + c * dy))
    }
}

impl Default for ScandotPattern {
    /// 12 x 11 = 132 points, biased forward since every obstacle lies ahead.
    fn default() -> Self {
        Self::grid(12, 11, (-0.3, 1.2), (-0.5, 0.5))
    }
}

/// Terrain height under each pattern point, relative to the base height.
pub fn sample_scandots(hf: &Heightfield, pose: &BasePose, pattern: &ScandotPattern) -> Vec<f64> {
    pattern.world_points(pose).map(|(x, y)| hf.height_at(x, y) - pose.z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{Heightfield, CELL_SIZE, GAP_DEPTH};
    use std::f64::consts::FRAC_PI_2;

    fn field(nx: usize, ny: usize, origin: [f64; 2], f: impl Fn(f64, f64) -> f64) -> Heightfield {
        let mut h = Vec::new();
        for ix in 0..nx {
            for iy in 0..ny {
                h.push(f(origin[0] + ix as f64 * CELL_SIZE, origin[1] + iy as f64 * CELL_SIZE) as f32);
            }
        }
        Heightfield::new(CELL_SIZE, nx, ny, origin, h).unwrap()
    }

    #[test]
    fn default_pattern_has_132_points() {
        assert_eq!(ScandotPattern::default().len(), 132);
    }

    #[test]
    fn flat_relative_heights() {
        let hf = Heightfield::flat(0.0, 4.0, 2.0, [-2.0, -1.0]).unwrap();
        let pose = BasePose { z: 0.26, ..Default::default() };
        let dots = sample_scandots(&hf, &pose, &ScandotPattern::default());
        assert!(dots.iter().all(|&d| (d + 0.26).abs() < 1e-12));
    }

    #[test]
    fn yaw_quarter_turn_maps_pattern_y_to_world_x() {
        // height = world x; grid-aligned so bilinear interpolation is exact
        let hf = field(161, 161, [-2.0, -2.0], |x, _| x * 0.1);
        let pattern = ScandotPattern { offsets: vec![[0.5, 0.0], [0.5, 0.25], [0.5, -0.25], [-0.25, 0.0]] };
        let pose = BasePose { x: 0.0, y: 0.0, z: 0.0, yaw: FRAC_PI_2 };
        let dots = sample_scandots(&hf, &pose, &pattern);
        // rotating (dx, dy) by +90 deg gives world (-dy, dx)
        let expected: Vec<f64> = pattern.offsets.iter().map(|&[_, dy]| -dy * 0.1).collect();
        for (d, e) in dots.iter().zip(&expected) {
            assert!((d - e).abs() < 1e-9, "{dots:?} vs {expected:?}");
        }
        // varying only along the pattern's dy axis
        assert!((dots[0] - dots[3]).abs() < 1e-9);
        assert!(dots[1] != dots[2]);
    }

    #[test]
    fn trench_depth_is_relative() {
        let hf = field(81, 41, [0.0, -0.5], |x, _| if (1.0..1.5).contains(&x) { GAP_DEPTH } else { 0.0 });
        let pose = BasePose { x: 0.0, y: 0.0, z: 0.26, yaw: 0.0 };
        let dots = sample_scandots(&hf, &pose, &ScandotPattern { offsets: vec![[1.25, 0.0]] });
        assert!((dots[0] - (GAP_DEPTH - 0.26)).abs() < 1e-9);
    }
}
