//! `PKPT` weight files: magic, `u16` version, `u32` header length, JSON header,
//! then one little-endian `f32` blob per tensor in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LearnError, Result};
use crate::nn::Tensor;
use crate::obs::Phase;
use crate::policy::{NetConfig, StudentNets, TeacherNets};

pub const MAGIC: &[u8; 4] = b"PKPT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    /// 1 for teachers, 2 for students.
    pub phase: u8,
    pub config_hash: String,
    /// Variant the weights were trained under.
    pub variant: String,
    pub nets: NetConfig,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> LearnError {
    LearnError::Checkpoint(msg.into())
}

fn write(path: &Path, phase: Phase, hash: &str, variant: &str, nets: &NetConfig, named: Vec<(String, &Tensor)>) -> Result<()> {
    let header = Header {
        phase: phase.tag(),
        config_hash: hash.to_string(),
        variant: variant.to_string(),
        nets: nets.clone(),
        tensors: named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &named {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads and validates the framing; returns the header and one blob per tensor.
pub fn read(path: &Path) -> Result<(Header, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("not a PKPT file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json = bytes.get(10..10 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
    let mut off = 10 + len;
    let mut blobs = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes.get(off..off + 4 * n).ok_or_else(|| bad(format!("truncated tensor {}", t.name)))?;
        blobs.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((header, blobs))
}

fn fill(header: &Header, blobs: &[Vec<f32>], named: Vec<(String, &mut Tensor)>) -> Result<()> {
    if named.len() != header.tensors.len() {
        return Err(bad(format!("expected {} tensors, file has {}", named.len(), header.tensors.len())));
    }
    for ((name, t), (entry, blob)) in named.into_iter().zip(header.tensors.iter().zip(blobs)) {
        if name != entry.name || t.shape != entry.shape {
            return Err(bad(format!("tensor {} {:?} does not match {} {:?}", entry.name, entry.shape, name, t.shape)));
        }
        t.data = blob.iter().map(|&v| v as f64).collect();
        t.grad.clear();
    }
    Ok(())
}

fn expect_phase(header: &Header, phase: Phase) -> Result<()> {
    if header.phase != phase.tag() {
        return Err(bad(format!("phase tag {} where {} was expected", header.phase, phase.tag())));
    }
    Ok(())
}

pub fn save_teacher(path: &Path, nets: &TeacherNets, hash: &str, variant: &str) -> Result<()> {
    write(path, Phase::Teacher, hash, variant, &nets.config, nets.named_tensors())
}

pub fn save_student(path: &Path, nets: &StudentNets, hash: &str, variant: &str) -> Result<()> {
    write(path, Phase::Student, hash, variant, &nets.config, nets.named_tensors())
}

pub fn load_teacher(path: &Path) -> Result<(TeacherNets, Header)> {
    let (header, blobs) = read(path)?;
    expect_phase(&header, Phase::Teacher)?;
    let mut nets = TeacherNets::new(header.nets.clone(), &mut parkour_core::rng::stream(0, 0));
    let names: Vec<String> = nets.named_tensors().into_iter().map(|(n, _)| n).collect();
    fill(&header, &blobs, names.into_iter().zip(crate::nn::Module::tensors_mut(&mut nets)).collect())?;
    Ok((nets, header))
}

pub fn load_student(path: &Path) -> Result<(StudentNets, Header)> {
    let (header, blobs) = read(path)?;
    expect_phase(&header, Phase::Student)?;
    let teacher = TeacherNets::new(header.nets.clone(), &mut parkour_core::rng::stream(0, 0));
    let mut nets = StudentNets::from_teacher(&teacher, &mut parkour_core::rng::stream(0, 1));
    let names: Vec<String> = nets.named_tensors().into_iter().map(|(n, _)| n).collect();
    fill(&header, &blobs, names.into_iter().zip(crate::nn::Module::tensors_mut(&mut nets)).collect())?;
    Ok((nets, header))
}
