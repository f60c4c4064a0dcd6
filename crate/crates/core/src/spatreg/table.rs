//! The pairwise transform table and its `transforms.bin` container.
//!
//! Layout (little-endian): magic `XTTT`, version `u16`, provenance `u64`,
//! volume count `u32`, entry count `u32`, then per entry `i: u32`, `j: u32`
//! and a tagged payload. Tags: 0 affine (16 x f64 row-major), 1 field (base
//! affine, dims 3 x u32, spacing 3 x f64, 3 x f32 per voxel), 2 chain (u32
//! count + nested payloads), 3 inverse (nested payload).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spatreg::metric::mutual_information;
use crate::spatreg::register::{register_affine, RegistrationConfig};
use crate::spatreg::resample::resample_intensity;
use crate::spatreg::transform::{AffineTransform, DisplacementField, SpatialTransform};
use crate::volgrid::{Grid, Volume, VolumeId};

const MAGIC: &[u8; 4] = b"XTTT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransformTable {
    entries: BTreeMap<(VolumeId, VolumeId), SpatialTransform>,
    /// Hash of the configuration that produced the entries.
    pub provenance: u64,
}

/// Stable 64-bit digest of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let text = serde_json::to_vec(cfg).unwrap_or_default();
    let digest = Sha256::digest(&text);
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

impl TransformTable {
    pub fn new(provenance: u64) -> Self {
        TransformTable {
            entries: BTreeMap::new(),
            provenance,
        }
    }

    /// Inserts `T_ij`. Diagonal entries must be the identity.
    pub fn insert(&mut self, i: VolumeId, j: VolumeId, t: SpatialTransform) -> Result<()> {
        if i == j && !t.is_identity() {
            return Err(Error::Config(format!("diagonal entry ({i}, {i}) must be identity")));
        }
        self.entries.insert((i, j), t);
        Ok(())
    }

    pub fn get(&self, i: VolumeId, j: VolumeId) -> Result<&SpatialTransform> {
        self.entries
            .get(&(i, j))
            .ok_or_else(|| Error::Lookup(format!("no transform for pair ({i}, {j})")))
    }

    pub fn contains(&self, i: VolumeId, j: VolumeId) -> bool {
        self.entries.contains_key(&(i, j))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(VolumeId, VolumeId), &SpatialTransform)> {
        self.entries.iter()
    }

    pub fn volume_ids(&self) -> Vec<VolumeId> {
        let mut ids: Vec<VolumeId> = self.entries.keys().flat_map(|&(i, j)| [i, j]).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn off_diagonal_len(&self) -> usize {
        self.entries.keys().filter(|(i, j)| i != j).count()
    }

    /// Every stored pair has its reverse and every volume its identity.
    pub fn check_complete(&self) -> Result<()> {
        for &(i, j) in self.entries.keys() {
            if !self.contains(j, i) {
                return Err(Error::Lookup(format!("pair ({i}, {j}) lacks its reverse")));
            }
            if !self.contains(i, i) {
                return Err(Error::Lookup(format!("volume {i} lacks its identity entry")));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u16::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(self.provenance).map_err(io)?;
        w.write_u32::<LittleEndian>(self.volume_ids().len() as u32)
            .map_err(io)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)
            .map_err(io)?;
        for (&(i, j), t) in &self.entries {
            w.write_u32::<LittleEndian>(i.0).map_err(io)?;
            w.write_u32::<LittleEndian>(j.0).map_err(io)?;
            write_payload(&mut w, t).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = r.read_u16::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let provenance = r.read_u64::<LittleEndian>().map_err(io)?;
        let n = r.read_u32::<LittleEndian>().map_err(io)?;
        let count = r.read_u32::<LittleEndian>().map_err(io)?;
        let mut table = TransformTable::new(provenance);
        for _ in 0..count {
            let i = VolumeId(r.read_u32::<LittleEndian>().map_err(io)?);
            let j = VolumeId(r.read_u32::<LittleEndian>().map_err(io)?);
            let t = read_payload(&mut r, path, 0)?;
            table.entries.insert((i, j), t);
        }
        if table.volume_ids().len() != n as usize {
            return Err(Error::format(path, "volume count does not match entries"));
        }
        Ok(table)
    }
}

fn write_affine(w: &mut impl Write, a: &AffineTransform) -> std::io::Result<()> {
    for v in a.to_row_major() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_payload(w: &mut impl Write, t: &SpatialTransform) -> std::io::Result<()> {
    match t {
        SpatialTransform::Affine(a) => {
            w.write_u8(0)?;
            write_affine(w, a)
        }
        SpatialTransform::Field(f) => {
            w.write_u8(1)?;
            write_affine(w, &f.base)?;
            for &d in &f.grid.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &s in &f.grid.spacing {
                w.write_f64::<LittleEndian>(s)?;
            }
            for &v in &f.field {
                w.write_f32::<LittleEndian>(v)?;
            }
            Ok(())
        }
        SpatialTransform::Chain(parts) => {
            w.write_u8(2)?;
            w.write_u32::<LittleEndian>(parts.len() as u32)?;
            for p in parts {
                write_payload(w, p)?;
            }
            Ok(())
        }
        SpatialTransform::Inverse(inner) => {
            w.write_u8(3)?;
            write_payload(w, inner)
        }
    }
}

fn read_affine(r: &mut impl Read, path: &Path) -> Result<AffineTransform> {
    let mut v = [0f64; 16];
    r.read_f64_into::<LittleEndian>(&mut v)
        .map_err(|e| Error::io(path, e))?;
    AffineTransform::from_row_major(&v).map_err(|e| Error::format(path, e.to_string()))
}

fn read_payload(r: &mut impl Read, path: &Path, depth: usize) -> Result<SpatialTransform> {
    if depth > 16 {
        return Err(Error::format(path, "transform nesting too deep"));
    }
    let io = |e| Error::io(path, e);
    let kind = r.read_u8().map_err(io)?;
    match kind {
        0 => Ok(SpatialTransform::Affine(read_affine(r, path)?)),
        1 => {
            let base = read_affine(r, path)?;
            let mut dims = [0usize; 3];
            for d in &mut dims {
                *d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            }
            let mut spacing = [0f64; 3];
            for s in &mut spacing {
                *s = r.read_f64::<LittleEndian>().map_err(io)?;
            }
            let grid = Grid::new(dims, spacing).map_err(|e| Error::format(path, e.to_string()))?;
            let mut field = vec![0f32; 3 * grid.len()];
            r.read_f32_into::<LittleEndian>(&mut field).map_err(io)?;
            Ok(SpatialTransform::Field(
                DisplacementField::new(base, grid, field)
                    .map_err(|e| Error::format(path, e.to_string()))?,
            ))
        }
        2 => {
            let n = r.read_u32::<LittleEndian>().map_err(io)?;
            let parts = (0..n)
                .map(|_| read_payload(r, path, depth + 1))
                .collect::<Result<Vec<_>>>()?;
            Ok(SpatialTransform::Chain(parts))
        }
        3 => Ok(SpatialTransform::Inverse(Box::new(read_payload(
            r,
            path,
            depth + 1,
        )?))),
        other => Err(Error::format(path, format!("unknown transform kind {other}"))),
    }
}

/// Registers every ordered pair of `volumes`: entry `(i, j)` maps points of
/// volume `i` into volume `j`.
pub fn build_transform_table(volumes: &[&Volume], cfg: &RegistrationConfig) -> Result<TransformTable> {
    if volumes.len() < 2 {
        return Err(Error::Config("transform table needs at least two volumes".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..volumes.len())
        .flat_map(|a| (0..volumes.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let results: Vec<Result<((VolumeId, VolumeId), SpatialTransform)>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (vi, vj) = (volumes[a], volumes[b]);
            let pair_cfg = RegistrationConfig {
                seed: cfg
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((vi.id.0 as u64) << 32) | vj.id.0 as u64),
                ..cfg.clone()
            };
            let res = register_affine(vi, vj, &pair_cfg)?;
            Ok(((vi.id, vj.id), SpatialTransform::Affine(res.transform)))
        })
        .collect();
    let mut table = TransformTable::new(config_hash(cfg));
    for v in volumes {
        table.insert(v.id, v.id, SpatialTransform::identity())?;
    }
    for r in results {
        let ((i, j), t) = r?;
        table.insert(i, j, t)?;
    }
    Ok(table)
}

/// Fraction of off-diagonal entries whose warped source has higher MI with
/// the target than the unwarped source does.
pub fn improvement_rate(table: &TransformTable, volumes: &[&Volume], bins: usize) -> Result<f64> {
    let find = |id: VolumeId| {
        volumes
            .iter()
            .find(|v| v.id == id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("volume {id} missing")))
    };
    let mut better = 0usize;
    let mut total = 0usize;
    for (&(i, j), t) in table.iter() {
        if i == j {
            continue;
        }
        let (vi, vj) = (find(i)?, find(j)?);
        let warped = resample_intensity(vi, t, &vj.grid, vi.id);
        let before = mutual_information(&vi.voxels, &vj.voxels, bins)?;
        let after = mutual_information(&warped.voxels, &vj.voxels, bins)?;
        total += 1;
        if after > before {
            better += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { better as f64 / total as f64 })
}
