//! Pull-back resampling of intensities (trilinear) and labels (nearest).
//! Target voxels whose source point falls outside the source voxel extent get
//! background: intensity 0 or class 0.

use crate::error::{Error, Result};
use crate::spatreg::transform::{Point3, SpatialTransform};
use crate::volgrid::{Grid, LabelMap, Volume, VolumeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

pub enum GridData<'a> {
    Intensity(&'a Volume),
    Labels(&'a LabelMap),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resampled {
    Intensity(Volume),
    Labels(LabelMap),
}

/// Each voxel covers half a voxel either side of its center; points inside
/// that extent but beyond the outermost centers read the edge value.
pub(crate) const HALF_VOXEL: f64 = 0.5;

/// Trilinear interpolation at continuous voxel coordinates; `None` outside
/// the voxel extent.
#[inline]
pub fn trilinear(data: &[f32], grid: &Grid, v: Point3) -> Option<f64> {
    let [d, h, w] = grid.dims;
    let inside = |c: f64, n: usize| c >= -HALF_VOXEL && c < n as f64 - HALF_VOXEL;
    if !(inside(v[0], d) && inside(v[1], h) && inside(v[2], w)) {
        return None;
    }
    let z = v[0].clamp(0.0, (d - 1) as f64);
    let y = v[1].clamp(0.0, (h - 1) as f64);
    let x = v[2].clamp(0.0, (w - 1) as f64);
    let (z0, y0, x0) = (z as usize, y as usize, x as usize);
    let (z1, y1, x1) = ((z0 + 1).min(d - 1), (y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fz, fy, fx) = (z - z0 as f64, y - y0 as f64, x - x0 as f64);
    let at = |zz: usize, yy: usize, xx: usize| data[(zz * h + yy) * w + xx] as f64;
    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    Some(c0 * (1.0 - fz) + c1 * fz)
}

#[inline]
fn nearest_index(grid: &Grid, v: Point3) -> Option<usize> {
    let [d, h, w] = grid.dims;
    let r = |c: f64, n: usize| {
        let i = c.round();
        (i >= 0.0 && i < n as f64).then_some(i as usize)
    };
    Some(grid.index(r(v[0], d)?, r(v[1], h)?, r(v[2], w)?))
}

/// Source voxel coordinate for every target voxel, in target order.
fn source_coords<'a>(
    transform: &'a SpatialTransform,
    source: &'a Grid,
    target: &'a Grid,
) -> impl Iterator<Item = Point3> + 'a {
    let inv_affine = transform.as_affine().and_then(|a| a.invert().ok());
    let [d, h, w] = target.dims;
    (0..d).flat_map(move |z| {
        let inv_affine = inv_affine.clone();
        (0..h).flat_map(move |y| {
            let inv_affine = inv_affine.clone();
            (0..w).map(move |x| {
                let p = target.to_physical([z as f64, y as f64, x as f64]);
                let q = match &inv_affine {
                    Some(inv) => inv.apply(p),
                    None => transform.apply_inverse(p),
                };
                source.to_voxel(q)
            })
        })
    })
}

/// Moves `volume` (in the transform's source frame) onto `target`.
pub fn resample_intensity(
    volume: &Volume,
    transform: &SpatialTransform,
    target: &Grid,
    id: VolumeId,
) -> Volume {
    let voxels = source_coords(transform, &volume.grid, target)
        .map(|v| trilinear(&volume.voxels, &volume.grid, v).unwrap_or(0.0) as f32)
        .collect();
    Volume {
        id,
        grid: *target,
        voxels,
    }
}

pub fn resample_labels(
    labels: &LabelMap,
    transform: &SpatialTransform,
    target: &Grid,
    id: VolumeId,
) -> LabelMap {
    let out = source_coords(transform, &labels.grid, target)
        .map(|v| nearest_index(&labels.grid, v).map_or(0, |i| labels.labels[i]))
        .collect();
    LabelMap {
        id,
        grid: *target,
        labels: out,
        num_classes: labels.num_classes,
    }
}

/// Checked entry point: intensities must use trilinear, labels nearest.
pub fn resample(
    data: GridData<'_>,
    transform: &SpatialTransform,
    target: &Grid,
    interp: Interp,
) -> Result<Resampled> {
    match (data, interp) {
        (GridData::Intensity(v), Interp::Trilinear) => Ok(Resampled::Intensity(
            resample_intensity(v, transform, target, v.id),
        )),
        (GridData::Labels(l), Interp::Nearest) => Ok(Resampled::Labels(resample_labels(
            l, transform, target, l.id,
        ))),
        (GridData::Intensity(_), Interp::Nearest) => Err(Error::Usage(
            "nearest-neighbor resampling requested for an intensity grid".into(),
        )),
        (GridData::Labels(_), Interp::Trilinear) => Err(Error::Usage(
            "trilinear resampling requested for a label grid".into(),
        )),
    }
}

/// `passes` rounds of separable `[1, 2, 1] / 4` smoothing with replicated edges.
pub fn smooth(volume: &Volume, passes: usize) -> Volume {
    let [d, h, w] = volume.grid.dims;
    let strides = [h * w, w, 1];
    let mut data = volume.voxels.clone();
    let mut tmp = data.clone();
    for _ in 0..passes {
        for axis in 0..3 {
            let n = volume.grid.dims[axis];
            let st = strides[axis];
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let c = [z, y, x][axis];
                        let lo = if c > 0 { i - st } else { i };
                        let hi = if c + 1 < n { i + st } else { i };
                        tmp[i] = 0.25 * data[lo] + 0.5 * data[i] + 0.25 * data[hi];
                        i += 1;
                    }
                }
            }
            std::mem::swap(&mut data, &mut tmp);
        }
    }
    Volume {
        voxels: data,
        ..volume.clone()
    }
}

/// Smooths with a separable `[1, 2, 1] / 4` kernel and keeps even voxels, so
/// coarse voxel `k` sits exactly on fine voxel `2k` and the spacing doubles.
pub fn downsample2(volume: &Volume) -> Volume {
    let [d, h, w] = volume.grid.dims;
    let nd = [(d + 1) / 2, (h + 1) / 2, (w + 1) / 2];
    let taps = |i: usize, n: usize| -> [(usize, f32); 3] {
        let lo = if i > 0 { (i - 1, 0.25) } else { (i, 0.0) };
        let hi = if i + 1 < n { (i + 1, 0.25) } else { (i, 0.0) };
        [lo, (i, 0.5), hi]
    };
    let mut voxels = Vec::with_capacity(nd[0] * nd[1] * nd[2]);
    for z in 0..nd[0] {
        for y in 0..nd[1] {
            for x in 0..nd[2] {
                let (mut acc, mut norm) = (0.0f32, 0.0f32);
                for (zz, wz) in taps(2 * z, d) {
                    for (yy, wy) in taps(2 * y, h) {
                        for (xx, wx) in taps(2 * x, w) {
                            let wgt = wz * wy * wx;
                            acc += wgt * volume.at(zz, yy, xx);
                            norm += wgt;
                        }
                    }
                }
                voxels.push(acc / norm);
            }
        }
    }
    let s = volume.grid.spacing;
    Volume {
        id: volume.id,
        grid: Grid {
            dims: nd,
            spacing: [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]],
        },
        voxels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatreg::transform::AffineTransform;

    fn blob_labels(grid: Grid) -> LabelMap {
        let mut labels = vec![0u8; grid.len()];
        for z in 3..5 {
            for y in 4..7 {
                for x in 2..4 {
                    labels[grid.index(z, y, x)] = 2;
                }
            }
        }
        labels[grid.index(1, 1, 1)] = 1;
        LabelMap::new(VolumeId(0), grid, labels, 3).unwrap()
    }

    #[test]
    fn identity_leaves_grids_unchanged() {
        let grid = Grid::isotropic(8);
        let vol = Volume::new(
            VolumeId(0),
            grid,
            (0..grid.len()).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect(),
        )
        .unwrap();
        let id = SpatialTransform::identity();
        assert_eq!(resample_intensity(&vol, &id, &grid, vol.id), vol);
        let labels = blob_labels(grid);
        assert_eq!(resample_labels(&labels, &id, &grid, labels.id), labels);
    }

    #[test]
    fn integer_translation_shifts_blob() {
        let grid = Grid::isotropic(10);
        let labels = blob_labels(grid);
        let t: SpatialTransform = AffineTransform::translation([1.0, -2.0, 3.0]).into();
        let moved = resample_labels(&labels, &t, &grid, labels.id);
        for z in 0..10 {
            for y in 0..10 {
                for x in 0..10 {
                    let src = (z as i64 - 1, y as i64 + 2, x as i64 - 3);
                    let expected = if src.0 >= 0 && src.1 < 10 && src.2 >= 0 {
                        labels.labels[grid.index(src.0 as usize, src.1 as usize, src.2 as usize)]
                    } else {
                        0
                    };
                    assert_eq!(moved.labels[grid.index(z, y, x)], expected);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_is_background() {
        let grid = Grid::isotropic(4);
        let vol = Volume::new(VolumeId(0), grid, vec![1.0; 64]).unwrap();
        let t: SpatialTransform = AffineTransform::translation([0.0, 0.0, 10.0]).into();
        let out = resample_intensity(&vol, &t, &grid, vol.id);
        assert!(out.voxels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolation_mode_is_checked() {
        let grid = Grid::isotropic(2);
        let vol = Volume::new(VolumeId(0), grid, vec![0.5; 8]).unwrap();
        let id = SpatialTransform::identity();
        assert!(matches!(
            resample(GridData::Intensity(&vol), &id, &grid, Interp::Nearest),
            Err(Error::Usage(_))
        ));
        let labels = LabelMap::new(VolumeId(0), grid, vec![0; 8], 2).unwrap();
        assert!(resample(GridData::Labels(&labels), &id, &grid, Interp::Nearest).is_ok());
    }

    #[test]
    fn nearest_preserves_alphabet() {
        let grid = Grid::isotropic(10);
        let labels = blob_labels(grid);
        let t: SpatialTransform = crate::spatreg::transform::AffineParams {
            rotation: [0.3, -0.2, 0.1],
            translation: [0.4, 0.3, -0.7],
            ..Default::default()
        }
        .to_affine(grid.center())
        .unwrap()
        .into();
        let out = resample_labels(&labels, &t, &grid, labels.id);
        assert!(out.labels.iter().all(|l| [0u8, 1, 2].contains(l)));
    }
}
