//! `PKHF` binary terrain files and the matching JSON debug dump.
//!
//! Layout (little-endian): magic `PKHF`, version `u16`, cell size `f64`,
//! dims `u32 x 2` (nx, ny), origin `f64 x 2`, `nx * ny` heights as `f32`
//! (row-major), the edge mask packed 8 cells per byte (LSB first), then the
//! waypoint count `u32` followed by `f64` triples.

use serde::{Deserialize, Serialize};

use super::heightfield::Heightfield;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PKHF";
pub const VERSION: u16 = 1;

pub fn encode(hf: &Heightfield, waypoints: &[[f64; 3]]) -> Vec<u8> {
    let cells = hf.nx() * hf.ny();
    let mut out = Vec::with_capacity(48 + cells * 4 + cells / 8 + waypoints.len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&hf.cell_size().to_le_bytes());
    out.extend_from_slice(&(hf.nx() as u32).to_le_bytes());
    out.extend_from_slice(&(hf.ny() as u32).to_le_bytes());
    for o in hf.origin() {
        out.extend_from_slice(&o.to_le_bytes());
    }
    for h in hf.heights() {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for chunk in hf.edge_mask().chunks(8) {
        let byte = chunk.iter().enumerate().fold(0u8, |b, (i, &m)| b | ((m as u8) << i));
        out.push(byte);
    }
    out.extend_from_slice(&(waypoints.len() as u32).to_le_bytes());
    for w in waypoints {
        for v in w {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            kind: "PKHF",
            reason: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Heightfield, Vec<[f64; 3]>)> {
    let bad = |reason: String| Error::Format { kind: "PKHF", reason };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cell_size = r.f64()?;
    let nx = r.u32()? as usize;
    let ny = r.u32()? as usize;
    let origin = [r.f64()?, r.f64()?];
    let cells = nx.checked_mul(ny).ok_or_else(|| bad("dims overflow".into()))?;
    if cells.saturating_mul(4) > bytes.len() {
        return Err(bad(format!("dims {nx}x{ny} exceed file size")));
    }
    let heights = (0..cells).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let packed = r.take(cells.div_ceil(8))?;
    let mask = (0..cells).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    let count = r.u32()? as usize;
    let mut waypoints = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        waypoints.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let hf = Heightfield::from_parts(cell_size, nx, ny, origin, heights, mask)?;
    Ok((hf, waypoints))
}

/// Human-readable mirror of the binary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainDump {
    pub cell_size: f64,
    pub dims: [usize; 2],
    pub origin: [f64; 2],
    pub heights: Vec<f32>,
    pub edge_mask: Vec<bool>,
    pub waypoints: Vec<[f64; 3]>,
}

impl TerrainDump {
    pub fn new(hf: &Heightfield, waypoints: &[[f64; 3]]) -> Self {
        Self {
            cell_size: hf.cell_size(),
            dims: [hf.nx(), hf.ny()],
            origin: hf.origin(),
            heights: hf.heights().to_vec(),
            edge_mask: hf.edge_mask().to_vec(),
            waypoints: waypoints.to_vec(),
        }
    }
}

pub fn to_json(hf: &Heightfield, waypoints: &[[f64; 3]]) -> Result<String> {
    Ok(serde_json::to_string(&TerrainDump::new(hf, waypoints))?)
}
