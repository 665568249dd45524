use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::heightfield::{Heightfield, CELL_SIZE};
use crate::error::{Error, Result};
use crate::rng;

/// Depth of a gap trench.
pub const GAP_DEPTH: f64 = -1.0;
/// Hurdle bar thickness along x.
pub const HURDLE_THICKNESS: f64 = 0.1;
/// Length of a step box along x.
pub const STEP_LENGTH: f64 = 1.2;
/// Length of one tilted ramp block along x, and the spacing between the two blocks.
pub const RAMP_BLOCK_LENGTH: f64 = 0.8;
pub const RAMP_BLOCK_SPACING: f64 = 0.2;
/// Ramp surfaces are capped at this height.
pub const RAMP_MAX_HEIGHT: f64 = 0.5;
/// Waypoints sit this far before/after each obstacle.
pub const WAYPOINT_STANDOFF: f64 = 0.5;
/// Segment start/end waypoints sit this far inside the segment.
pub const SEGMENT_MARGIN: f64 = 0.3;
/// Lateral offset of ramp waypoints toward the raised side.
pub const RAMP_WAYPOINT_OFFSET: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainKind {
    Hurdle,
    Gap,
    Step,
    Ramp,
    Flat,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 5] =
        [TerrainKind::Hurdle, TerrainKind::Gap, TerrainKind::Step, TerrainKind::Ramp, TerrainKind::Flat];

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::Hurdle => "hurdle",
            TerrainKind::Gap => "gap",
            TerrainKind::Step => "step",
            TerrainKind::Ramp => "ramp",
            TerrainKind::Flat => "flat",
        }
    }

    /// Obstacle severity at `difficulty` in `[0, 1]`: metres for gap width and
    /// step/hurdle height, radians for ramp tilt. Zero for flat ground.
    pub fn severity(self, difficulty: f64) -> f64 {
        let d = difficulty.clamp(0.0, 1.0);
        let lerp = |lo: f64, hi: f64| lo + (hi - lo) * d;
        match self {
            TerrainKind::Gap => lerp(0.1, 0.8),
            TerrainKind::Step | TerrainKind::Hurdle => lerp(0.1, 0.5),
            TerrainKind::Ramp => lerp(10f64.to_radians(), 37f64.to_radians()),
            TerrainKind::Flat => 0.0,
        }
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TerrainKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown terrain kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    pub difficulty: f64,
    pub seed: u64,
    /// `(length, width)` in metres.
    pub extent: (f64, f64),
}

impl TerrainSpec {
    pub fn new(kind: TerrainKind, difficulty: f64, seed: u64) -> Self {
        Self { kind, difficulty, seed, extent: DEFAULT_EXTENT }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        let (length, width) = self.extent;
        if !(length.is_finite() && width.is_finite()) || width < 1.0 {
            return Err(Error::config(format!("terrain extent {:?} too small (width >= 1 m)", self.extent)));
        }
        Ok(())
    }
}

/// Default segment size in metres.
pub const DEFAULT_EXTENT: (f64, f64) = (4.0, 2.0);
pub const DEFAULT_BORDER: f64 = 0.2;

/// Ordered waypoints over a course plus the per-level bookkeeping the curriculum needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointCourse {
    pub waypoints: Vec<[f64; 3]>,
    /// Terrain kind of the stretch between waypoint `i` and `i + 1`.
    pub segment_kind: Vec<TerrainKind>,
    pub total_length: f64,
    pub difficulty_levels: usize,
    /// Index of the first waypoint of each level.
    pub level_starts: Vec<usize>,
    /// `[x_start, x_end)` of each level's stretch of terrain.
    pub level_spans: Vec<(f64, f64)>,
}

impl WaypointCourse {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn level_length(&self, level: usize) -> f64 {
        let (a, b) = self.level_spans[level];
        b - a
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::config("a course needs at least two waypoints"));
        }
        if self.waypoints.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::config("waypoints must be strictly increasing in x"));
        }
        if self.segment_kind.len() != self.waypoints.len() - 1 {
            return Err(Error::config("segment_kind must have one entry per waypoint pair"));
        }
        if self.level_starts.len() != self.difficulty_levels || self.level_spans.len() != self.difficulty_levels {
            return Err(Error::config("per-level tables must match difficulty_levels"));
        }
        Ok(())
    }
}

/// Obstacle geometry for one terrain segment in segment-local coordinates
/// (x from 0 to `length`, y centred on 0).
#[derive(Clone, Debug)]
struct Segment {
    kind: TerrainKind,
    length: f64,
    severity: f64,
    /// Obstacle extent along x, `[x0, x1)`.
    x0: f64,
    x1: f64,
    /// Which side the first ramp block rises toward (+1 = +y).
    ramp_side: f64,
}

impl Segment {
    fn new(spec: &TerrainSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.seed, 0x7e77_a1);
        let length = spec.extent.0;
        let severity = spec.kind.severity(spec.difficulty);
        let half = match spec.kind {
            TerrainKind::Hurdle => HURDLE_THICKNESS / 2.0,
            TerrainKind::Gap => severity / 2.0,
            TerrainKind::Step => STEP_LENGTH / 2.0,
            TerrainKind::Ramp => RAMP_BLOCK_LENGTH + RAMP_BLOCK_SPACING / 2.0,
            TerrainKind::Flat => 0.0,
        };
        // centre jitter snapped to the grid so the obstacle width is exact in cells
        let jitter_cells = rng.random_range(-6i32..=6);
        let ramp_side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let centre = snap(length / 2.0) + jitter_cells as f64 * CELL_SIZE;
        let (x0, x1) = if spec.kind == TerrainKind::Flat {
            (centre, centre)
        } else {
            (snap(centre - half), snap(centre - half) + snap(2.0 * half))
        };
        let room_before = x0 - WAYPOINT_STANDOFF - SEGMENT_MARGIN;
        let room_after = length - SEGMENT_MARGIN - (x1 + WAYPOINT_STANDOFF);
        if length < 2.0 * SEGMENT_MARGIN + CELL_SIZE || room_before <= 0.0 || room_after <= 0.0 {
            return Err(Error::config(format!(
                "extent length {length} m cannot fit a {} of severity {severity:.3}",
                spec.kind
            )));
        }
        Ok(Self { kind: spec.kind, length, severity, x0, x1, ramp_side })
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let inside = |a: f64, b: f64| x >= a - 1e-9 && x < b - 1e-9;
        match self.kind {
            TerrainKind::Flat => 0.0,
            TerrainKind::Hurdle | TerrainKind::Step if inside(self.x0, self.x1) => self.severity,
            TerrainKind::Gap if inside(self.x0, self.x1) => GAP_DEPTH,
            TerrainKind::Ramp => {
                let mid = self.x0 + RAMP_BLOCK_LENGTH;
                let side = if inside(self.x0, mid) {
                    self.ramp_side
                } else if inside(mid + RAMP_BLOCK_SPACING, self.x1) {
                    -self.ramp_side
                } else {
                    return 0.0;
                };
                (self.severity.tan() * (side * y + 0.3)).clamp(0.0, RAMP_MAX_HEIGHT)
            }
            _ => 0.0,
        }
    }

    /// Local `(x, y)` waypoints in order.
    fn waypoints(&self) -> Vec<(f64, f64)> {
        let start = (SEGMENT_MARGIN, 0.0);
        let end = (self.length - SEGMENT_MARGIN, 0.0);
        match self.kind {
            TerrainKind::Flat => vec![start, (self.length / 2.0, 0.0), end],
            TerrainKind::Ramp => {
                let mid = self.x0 + RAMP_BLOCK_LENGTH;
                vec![
                    start,
                    (self.x0 - WAYPOINT_STANDOFF, 0.0),
                    (self.x0 + RAMP_BLOCK_LENGTH / 2.0, self.ramp_side * RAMP_WAYPOINT_OFFSET),
                    (mid + RAMP_BLOCK_SPACING + RAMP_BLOCK_LENGTH / 2.0, -self.ramp_side * RAMP_WAYPOINT_OFFSET),
                    (self.x1 + WAYPOINT_STANDOFF, 0.0),
                    end,
                ]
            }
            _ => vec![start, (self.x0 - WAYPOINT_STANDOFF, 0.0), (self.x1 + WAYPOINT_STANDOFF, 0.0), end],
        }
    }
}

fn snap(x: f64) -> f64 {
    (x / CELL_SIZE).round() * CELL_SIZE
}

/// One placed piece of a course: a segment (or a flat spacer when `segment` is `None`).
struct Placement {
    offset: f64,
    length: f64,
    segment: Option<Segment>,
}

/// `border`: width of the trench strip along each lateral side of the course.
fn rasterize(placements: &[Placement], width: f64, border: f64) -> Result<Heightfield> {
    let total: f64 = placements.iter().map(|p| p.length).sum();
    let nx = (total / CELL_SIZE).round() as usize;
    let ny = (width / CELL_SIZE).round() as usize + 1;
    let y0 = -width / 2.0;
    let mut heights = vec![0.0f32; nx * ny];
    let mut k = 0;
    for ix in 0..nx {
        let x = ix as f64 * CELL_SIZE;
        while k + 1 < placements.len() && x >= placements[k + 1].offset - 1e-9 {
            k += 1;
        }
        let p = &placements[k];
        if let Some(seg) = &p.segment {
            for iy in 0..ny {
                let y = y0 + iy as f64 * CELL_SIZE;
                heights[ix * ny + iy] = seg.height(x - p.offset, y) as f32;
            }
        }
        for iy in 0..ny {
            let y = y0 + iy as f64 * CELL_SIZE;
            if y.abs() > width / 2.0 - border + 1e-9 {
                heights[ix * ny + iy] = GAP_DEPTH as f32;
            }
        }
    }
    Heightfield::new(CELL_SIZE, nx, ny, [0.0, y0], heights)
}

fn build(
    placements: Vec<Placement>,
    width: f64,
    border: f64,
    levels: usize,
    level_of: &[usize],
) -> Result<(Heightfield, WaypointCourse)> {
    let hf = rasterize(&placements, width, border)?;
    let mut waypoints = Vec::new();
    let mut segment_kind = Vec::new();
    let mut level_starts = vec![usize::MAX; levels];
    let mut level_spans = vec![(f64::INFINITY, f64::NEG_INFINITY); levels];
    let mut seg_idx = 0;
    for p in &placements {
        let Some(seg) = &p.segment else { continue };
        let level = level_of[seg_idx];
        seg_idx += 1;
        if level_starts[level] == usize::MAX {
            level_starts[level] = waypoints.len();
        }
        let span = &mut level_spans[level];
        span.0 = span.0.min(p.offset);
        span.1 = span.1.max(p.offset + p.length);
        if !waypoints.is_empty() {
            segment_kind.push(TerrainKind::Flat);
        }
        let local = seg.waypoints();
        for (i, &(x, y)) in local.iter().enumerate() {
            let wx = p.offset + x;
            waypoints.push([wx, y, hf.height_at(wx, y)]);
            if i + 1 < local.len() {
                segment_kind.push(seg.kind);
            }
        }
    }
    let total_length = waypoints.last().unwrap()[0] - waypoints[0][0];
    let course = WaypointCourse {
        waypoints,
        segment_kind,
        total_length,
        difficulty_levels: levels,
        level_starts,
        level_spans,
    };
    course.validate()?;
    Ok((hf, course))
}

/// Generates one terrain segment with its waypoints.
pub fn generate_terrain(spec: &TerrainSpec) -> Result<(Heightfield, WaypointCourse)> {
    let segment = Segment::new(spec)?;
    let length = segment.length;
    build(vec![Placement { offset: 0.0, length, segment: Some(segment) }], spec.extent.1, 0.0, 1, &[0])
}

/// Layout of a multi-level obstacle course.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CourseSpec {
    pub kinds: Vec<TerrainKind>,
    pub levels: usize,
    pub seed: u64,
    pub extent: (f64, f64),
    /// Flat run inserted between consecutive segments.
    pub spacer: f64,
    /// Difficulty assigned to the last level; level `k` gets `k / (levels - 1)` of it.
    pub max_difficulty: f64,
    /// Trench strip along both lateral sides, so the lane edges are visible.
    pub border: f64,
}

impl Default for CourseSpec {
    fn default() -> Self {
        Self {
            kinds: vec![TerrainKind::Flat],
            levels: 1,
            seed: 0,
            extent: DEFAULT_EXTENT,
            spacer: 1.0,
            max_difficulty: 1.0,
            border: DEFAULT_BORDER,
        }
    }
}

impl CourseSpec {
    pub fn new(kinds: Vec<TerrainKind>, levels: usize) -> Self {
        Self { kinds, levels, ..Self::default() }
    }

    pub fn level_difficulty(&self, level: usize) -> f64 {
        if self.levels <= 1 {
            0.0
        } else {
            self.max_difficulty * level as f64 / (self.levels - 1) as f64
        }
    }
}

/// Concatenates segments along +x in order of increasing difficulty.
///
/// Levels are laid out one after another; within a level every kind in
/// `kinds` appears once, in the given order.
pub fn arrange_course(spec: &CourseSpec) -> Result<(Heightfield, WaypointCourse)> {
    if spec.kinds.is_empty() {
        return Err(Error::config("course needs at least one terrain kind"));
    }
    if spec.levels == 0 {
        return Err(Error::config("course needs at least one level"));
    }
    if !(0.0..=1.0).contains(&spec.max_difficulty) {
        return Err(Error::config("max_difficulty must lie in [0, 1]"));
    }
    if !(spec.spacer >= 0.0) {
        return Err(Error::config("spacer must be non-negative"));
    }
    if !(spec.border >= 0.0 && spec.extent.1 / 2.0 - spec.border >= 0.5) {
        return Err(Error::config("border must be non-negative and leave a lane at least 1 m wide"));
    }
    let spacer = snap(spec.spacer);
    let mut placements = Vec::new();
    let mut level_of = Vec::new();
    let mut offset = 0.0;
    let mut n = 0u64;
    for level in 0..spec.levels {
        for &kind in &spec.kinds {
            let seg_spec = TerrainSpec {
                kind,
                difficulty: spec.level_difficulty(level),
                seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(n),
                extent: (snap(spec.extent.0), spec.extent.1),
            };
            n += 1;
            if offset > 0.0 && spacer > 0.0 {
                placements.push(Placement { offset, length: spacer, segment: None });
                offset += spacer;
            }
            let segment = Segment::new(&seg_spec)?;
            let length = segment.length;
            placements.push(Placement { offset, length, segment: Some(segment) });
            level_of.push(level);
            offset += length;
        }
    }
    build(placements, spec.extent.1, spec.border, spec.levels, &level_of)
}
