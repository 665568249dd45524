use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid spacing used by every generated terrain. Two cells span the 5 cm edge band.
pub const CELL_SIZE: f64 = 0.025;
/// Minimum height jump between 8-connected neighbours that counts as an edge.
pub const EDGE_HEIGHT_DELTA: f64 = 0.05;
/// Distance from an edge within which foot contacts are penalised.
pub const EDGE_BAND: f64 = 0.05;

/// A regular grid of terrain heights.
///
/// Cell `(ix, iy)` is centred at `origin + (ix, iy) * cell_size` and stored
/// row-major at `ix * ny + iy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    cell_size: f64,
    nx: usize,
    ny: usize,
    origin: [f64; 2],
    heights: Vec<f32>,
    edge_mask: Vec<bool>,
    #[serde(skip)]
    max_height: f64,
}

impl Heightfield {
    /// Builds a heightfield and derives its edge mask with the default band and threshold.
    pub fn new(cell_size: f64, nx: usize, ny: usize, origin: [f64; 2], heights: Vec<f32>) -> Result<Self> {
        let mut hf = Self::from_parts(cell_size, nx, ny, origin, heights, vec![false; nx * ny])?;
        hf.edge_mask = compute_edge_mask(&hf, EDGE_BAND, EDGE_HEIGHT_DELTA);
        Ok(hf)
    }

    /// Assembles a heightfield with an explicit mask (used when loading files).
    pub fn from_parts(
        cell_size: f64,
        nx: usize,
        ny: usize,
        origin: [f64; 2],
        heights: Vec<f32>,
        edge_mask: Vec<bool>,
    ) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::config(format!("cell_size must be positive, got {cell_size}")));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::config("heightfield must have at least one cell"));
        }
        if heights.len() != nx * ny || edge_mask.len() != nx * ny {
            return Err(Error::config(format!(
                "heightfield dims {nx}x{ny} do not match {} heights / {} mask cells",
                heights.len(),
                edge_mask.len()
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::config("heightfield origin must be finite"));
        }
        if let Some(bad) = heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::config(format!("non-finite height at cell {bad}")));
        }
        let max_height = heights.iter().fold(f64::NEG_INFINITY, |m, &h| m.max(h as f64));
        Ok(Self { cell_size, nx, ny, origin, heights, edge_mask, max_height })
    }

    /// A constant-height field covering `[x0, x0 + length] x [y0, y0 + width]`.
    pub fn flat(height: f32, length: f64, width: f64, origin: [f64; 2]) -> Result<Self> {
        let nx = (length / CELL_SIZE).round() as usize + 1;
        let ny = (width / CELL_SIZE).round() as usize + 1;
        Self::new(CELL_SIZE, nx, ny, origin, vec![height; nx * ny])
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn edge_mask(&self) -> &[bool] {
        &self.edge_mask
    }

    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    #[inline]
    pub fn height(&self, ix: usize, iy: usize) -> f64 {
        self.heights[self.index(ix, iy)] as f64
    }

    #[inline]
    pub fn is_edge(&self, ix: usize, iy: usize) -> bool {
        self.edge_mask[self.index(ix, iy)]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin[0] + ix as f64 * self.cell_size,
            self.origin[1] + iy as f64 * self.cell_size,
        )
    }

    /// World extent covered by cell centres: `(x_min, x_max, y_min, y_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x1, y1) = self.cell_center(self.nx - 1, self.ny - 1);
        (self.origin[0], x1, self.origin[1], y1)
    }

    /// Cell whose centre is nearest to `(x, y)`, clamped to the grid.
    #[inline]
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let u = ((x - self.origin[0]) / self.cell_size).round();
        let v = ((y - self.origin[1]) / self.cell_size).round();
        (
            u.clamp(0.0, (self.nx - 1) as f64) as usize,
            v.clamp(0.0, (self.ny - 1) as f64) as usize,
        )
    }

    /// Bilinear height; queries outside the grid clamp to the border cells.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let u = ((x - self.origin[0]) / self.cell_size).clamp(0.0, (self.nx - 1) as f64);
        let v = ((y - self.origin[1]) / self.cell_size).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (u.floor() as usize).min(self.nx.saturating_sub(2));
        let j0 = (v.floor() as usize).min(self.ny.saturating_sub(2));
        let i1 = (i0 + 1).min(self.nx - 1);
        let j1 = (j0 + 1).min(self.ny - 1);
        let fu = u - i0 as f64;
        let fv = v - j0 as f64;
        let h00 = self.height(i0, j0);
        let h10 = self.height(i1, j0);
        let h01 = self.height(i0, j1);
        let h11 = self.height(i1, j1);
        let a = h00 + (h10 - h00) * fu;
        let b = h01 + (h11 - h01) * fu;
        a + (b - a) * fv
    }

    /// Piecewise-constant height (cells as flat-topped columns).
    #[inline]
    pub fn height_nearest(&self, x: f64, y: f64) -> f64 {
        let (ix, iy) = self.nearest_cell(x, y);
        self.height(ix, iy)
    }

    /// Edge-mask lookup at the nearest cell.
    #[inline]
    pub fn edge_at(&self, x: f64, y: f64) -> bool {
        let (ix, iy) = self.nearest_cell(x, y);
        self.is_edge(ix, iy)
    }

    /// The same terrain reflected across the course centreline (`iy -> ny - 1 - iy`).
    pub fn mirrored_y(&self) -> Self {
        let mut heights = vec![0.0; self.heights.len()];
        let mut mask = vec![false; self.heights.len()];
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                let src = self.index(ix, iy);
                let dst = self.index(ix, self.ny - 1 - iy);
                heights[dst] = self.heights[src];
                mask[dst] = self.edge_mask[src];
            }
        }
        Self { heights, edge_mask: mask, ..self.clone() }
    }
}

/// Marks every cell within `band` metres (centre to centre) of an edge cell.
///
/// An edge cell is the upper side of a drop: it has an 8-connected neighbour
/// lower by more than `delta`. Using the upper side puts the band on the lip
/// a foot would actually stand on.
pub fn compute_edge_mask(hf: &Heightfield, band: f64, delta: f64) -> Vec<bool> {
    let (nx, ny) = (hf.nx, hf.ny);
    let mut mask = vec![false; nx * ny];
    let reach = (band / hf.cell_size).floor() as isize;
    let band2 = band * band * (1.0 + 1e-9);
    let mut stamp = Vec::new();
    for di in -reach..=reach {
        for dj in -reach..=reach {
            let d2 = ((di * di + dj * dj) as f64) * hf.cell_size * hf.cell_size;
            if d2 <= band2 {
                stamp.push((di, dj));
            }
        }
    }
    for ix in 0..nx {
        for iy in 0..ny {
            if !is_edge_source(hf, ix, iy, delta) {
                continue;
            }
            for &(di, dj) in &stamp {
                let (x, y) = (ix as isize + di, iy as isize + dj);
                if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
                    mask[x as usize * ny + y as usize] = true;
                }
            }
        }
    }
    mask
}

/// True when cell `(ix, iy)` sits above a neighbour by more than `delta`.
pub fn is_edge_source(hf: &Heightfield, ix: usize, iy: usize, delta: f64) -> bool {
    let h = hf.height(ix, iy);
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let (x, y) = (ix as isize + di, iy as isize + dj);
            if x < 0 || y < 0 || x as usize >= hf.nx || y as usize >= hf.ny {
                continue;
            }
            if h - hf.height(x as usize, y as usize) > delta {
                return true;
            }
        }
    }
    false
}
