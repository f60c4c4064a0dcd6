//! Volumes, label maps, axial slices and the labeled/unlabeled split.
//!
//! Arrays are stored row-major in `(z, y, x)` order; the first axis is the
//! slicing axis. Physical coordinates use the same axis order, scaled by the
//! per-axis spacing, with voxel `(0, 0, 0)` at the origin.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VolumeId(pub u32);

impl std::fmt::Display for VolumeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A voxel lattice: counts per axis and physical spacing per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("grid dims must be nonzero, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        Ok(Grid { dims, spacing })
    }

    pub fn isotropic(n: usize) -> Self {
        Grid {
            dims: [n, n, n],
            spacing: [1.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn to_physical(&self, voxel: [f64; 3]) -> [f64; 3] {
        [
            voxel[0] * self.spacing[0],
            voxel[1] * self.spacing[1],
            voxel[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.spacing[0],
            p[1] / self.spacing[1],
            p[2] / self.spacing[2],
        ]
    }

    /// Physical center of the lattice.
    pub fn center(&self) -> [f64; 3] {
        self.to_physical([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: VolumeId,
    pub grid: Grid,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(id: VolumeId, grid: Grid, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume {id}: {} voxels for dims {:?}",
                voxels.len(),
                grid.dims
            )));
        }
        if let Some(pos) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("volume {id}: non-finite voxel at {pos}")));
        }
        Ok(Volume { id, grid, voxels })
    }

    /// Builds a volume and rescales intensities linearly onto `[0, 1]`.
    /// A constant volume maps to all zeros.
    pub fn normalized(id: VolumeId, grid: Grid, mut voxels: Vec<f32>) -> Result<Self> {
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("volume {id}: non-finite input")));
        }
        let (lo, hi) = voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        for v in &mut voxels {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
        Volume::new(id, grid, voxels)
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.grid.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.grid.index(z, y, x)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub id: VolumeId,
    pub grid: Grid,
    pub labels: Vec<u8>,
    pub num_classes: u8,
}

impl LabelMap {
    pub fn new(id: VolumeId, grid: Grid, labels: Vec<u8>, num_classes: u8) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Shape(format!(
                "label map {id}: {} labels for dims {:?}",
                labels.len(),
                grid.dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Range {
                what: "label",
                value: bad as usize,
                limit: num_classes as usize,
            });
        }
        Ok(LabelMap {
            id,
            grid,
            labels,
            num_classes,
        })
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.grid.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn one_hot(&self, num_classes: usize) -> Result<Vec<f32>> {
        one_hot(&self.labels, num_classes)
    }
}

/// Class-major indicator grid: `out[c * n + i] = (labels[i] == c)`.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Vec<f32>> {
    let n = labels.len();
    let mut out = vec![0.0f32; num_classes * n];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Range {
                what: "label",
                value: l,
                limit: num_classes,
            });
        }
        out[l * n + i] = 1.0;
    }
    Ok(out)
}

/// Per-position argmax over a class-major grid. Ties go to the lowest class.
pub fn argmax_classes(scores: &[f32], num_classes: usize) -> Vec<u8> {
    let n = scores.len() / num_classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..num_classes {
                if scores[c * n + i] > scores[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceRef {
    pub volume_id: VolumeId,
    pub slice_index: u32,
}

/// One axial slice, row-major `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn extract_slices(volume: &Volume) -> Vec<(SliceRef, Image2)> {
    let [d, h, w] = volume.grid.dims;
    (0..d)
        .map(|z| {
            (
                SliceRef {
                    volume_id: volume.id,
                    slice_index: z as u32,
                },
                Image2 {
                    height: h,
                    width: w,
                    data: volume.slice(z).to_vec(),
                },
            )
        })
        .collect()
}

/// Inverse of [`extract_slices`]; slices must be in axial order.
pub fn restack(id: VolumeId, grid: Grid, slices: &[Image2]) -> Result<Volume> {
    if slices.len() != grid.dims[0] {
        return Err(Error::Shape(format!(
            "{} slices for depth {}",
            slices.len(),
            grid.dims[0]
        )));
    }
    let mut voxels = Vec::with_capacity(grid.len());
    for s in slices {
        if s.height != grid.dims[1] || s.width != grid.dims[2] {
            return Err(Error::Shape(format!(
                "slice {}x{} on grid {:?}",
                s.height, s.width, grid.dims
            )));
        }
        voxels.extend_from_slice(&s.data);
    }
    Volume::new(id, grid, voxels)
}

#[derive(Debug, Clone)]
pub struct Case {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
}

/// Training cohort view. Only labeled volumes expose their label maps.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<Case>,
    pub labeled_ids: Vec<VolumeId>,
    pub unlabeled_ids: Vec<VolumeId>,
}

impl Dataset {
    pub fn new(
        cases: Vec<Case>,
        labeled_ids: Vec<VolumeId>,
        unlabeled_ids: Vec<VolumeId>,
    ) -> Result<Self> {
        if labeled_ids.iter().any(|id| unlabeled_ids.contains(id)) {
            return Err(Error::Config("labeled and unlabeled ids overlap".into()));
        }
        let ds = Dataset {
            cases,
            labeled_ids,
            unlabeled_ids,
        };
        for id in ds.labeled_ids.iter().chain(&ds.unlabeled_ids) {
            ds.case(*id)?;
        }
        for id in &ds.labeled_ids {
            if ds.case(*id)?.labels.is_none() {
                return Err(Error::Config(format!("labeled volume {id} has no label map")));
            }
        }
        Ok(ds)
    }

    pub fn case(&self, id: VolumeId) -> Result<&Case> {
        self.cases
            .iter()
            .find(|c| c.volume.id == id)
            .ok_or_else(|| Error::Lookup(format!("volume {id} not in dataset")))
    }

    pub fn volume(&self, id: VolumeId) -> Result<&Volume> {
        Ok(&self.case(id)?.volume)
    }

    pub fn labels(&self, id: VolumeId) -> Result<&LabelMap> {
        self.case(id)?
            .labels
            .as_ref()
            .ok_or_else(|| Error::Lookup(format!("volume {id} has no labels")))
    }

    pub fn volume_ids(&self) -> Vec<VolumeId> {
        self.cases.iter().map(|c| c.volume.id).collect()
    }

    /// Number of labeled slices (K).
    pub fn k_labeled(&self) -> usize {
        self.slice_count(&self.labeled_ids)
    }

    /// Number of unlabeled slices (M).
    pub fn m_unlabeled(&self) -> usize {
        self.slice_count(&self.unlabeled_ids)
    }

    fn slice_count(&self, ids: &[VolumeId]) -> usize {
        ids.iter()
            .filter_map(|id| self.case(*id).ok())
            .map(|c| c.volume.grid.dims[0])
            .sum()
    }

    pub fn slice_refs(&self, ids: &[VolumeId]) -> Vec<SliceRef> {
        let mut out = Vec::new();
        for id in ids {
            if let Ok(c) = self.case(*id) {
                for z in 0..c.volume.grid.dims[0] {
                    out.push(SliceRef {
                        volume_id: *id,
                        slice_index: z as u32,
                    });
                }
            }
        }
        out
    }
}

// Binary container: magic, version, dtype, dims (u32 x3), spacing (f64 x3),
// then row-major little-endian voxels.
const MAGIC: &[u8; 4] = b"XTVG";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub id: VolumeId,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u8>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn write_header(w: &mut impl Write, dtype: u8, grid: &Grid) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u8(dtype)?;
    for &d in &grid.dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &s in &grid.spacing {
        w.write_f64::<LittleEndian>(s)?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path, want: u8) -> Result<Grid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dtype = r.read_u8().map_err(|e| Error::io(path, e))?;
    if dtype != want {
        return Err(Error::format(path, format!("dtype {dtype}, expected {want}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = r.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    }
    Grid::new(dims, spacing).map_err(|e| Error::format(path, e.to_string()))
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let p = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    write_header(&mut w, DTYPE_F32, &vol.grid).map_err(io)?;
    for &v in &vol.voxels {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)?;
    write_sidecar(
        path,
        &Sidecar {
            id: vol.id,
            kind: "volume".into(),
            num_classes: None,
        },
    )
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let side = read_sidecar(path)?;
    if side.kind != "volume" {
        return Err(Error::format(path, format!("sidecar kind {}", side.kind)));
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let grid = read_header(&mut r, path, DTYPE_F32)?;
    let mut voxels = vec![0f32; grid.len()];
    r.read_f32_into::<LittleEndian>(&mut voxels)
        .map_err(|e| Error::io(path, e))?;
    Volume::new(side.id, grid, voxels)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    write_header(&mut w, DTYPE_U8, &labels.grid).map_err(io)?;
    w.write_all(&labels.labels).map_err(io)?;
    w.flush().map_err(io)?;
    write_sidecar(
        path,
        &Sidecar {
            id: labels.id,
            kind: "labels".into(),
            num_classes: Some(labels.num_classes),
        },
    )
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let side = read_sidecar(path)?;
    let num_classes = match (side.kind.as_str(), side.num_classes) {
        ("labels", Some(c)) => c,
        _ => return Err(Error::format(path, "sidecar is not a label map")),
    };
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let grid = read_header(&mut r, path, DTYPE_U8)?;
    let mut labels = vec![0u8; grid.len()];
    r.read_exact(&mut labels).map_err(|e| Error::io(path, e))?;
    LabelMap::new(side.id, grid, labels, num_classes)
}
