//! Spatial transforms between volume coordinate frames.
//!
//! Every transform maps *source* physical points to *target* physical points.
//! Resampling needs the pull-back direction, which [`SpatialTransform::apply_inverse`]
//! provides (exactly for affine parts, by fixed-point iteration for fields).

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::Grid;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Numeric("affine last row must be (0, 0, 0, 1)".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("affine matrix has non-finite entries".into()));
        }
        let lin: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let sv = lin.singular_values();
        let (max, min) = (sv.max(), sv.min());
        if !(min > 1e-12 * max.max(1e-300)) {
            return Err(Error::Numeric("affine linear part is singular".into()));
        }
        Ok(AffineTransform { matrix })
    }

    pub fn from_row_major(values: &[f64; 16]) -> Result<Self> {
        AffineTransform::new(Matrix4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn translation(offset: Point3) -> Self {
        let mut m = Matrix4::identity();
        for (k, &o) in offset.iter().enumerate() {
            m[(k, 3)] = o;
        }
        AffineTransform { matrix: m }
    }

    pub fn scaling(factors: Point3) -> Result<Self> {
        let mut m = Matrix4::identity();
        for (k, &f) in factors.iter().enumerate() {
            m[(k, k)] = f;
        }
        AffineTransform::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        let v = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    /// Applies only the linear part (for direction vectors).
    pub fn apply_linear(&self, v: Point3) -> Point3 {
        let lin = self.matrix.fixed_view::<3, 3>(0, 0);
        let r = lin * Vector3::new(v[0], v[1], v[2]);
        [r[0], r[1], r[2]]
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular affine matrix".into()))?;
        let mut inv = inv;
        // Pin the homogeneous row so round-off cannot leak into it.
        inv[(3, 0)] = 0.0;
        inv[(3, 1)] = 0.0;
        inv[(3, 2)] = 0.0;
        inv[(3, 3)] = 1.0;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("affine inverse is not finite".into()));
        }
        Ok(AffineTransform { matrix: inv })
    }

    /// `self` first, then `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: next.matrix * self.matrix,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Matrix4::identity()
    }
}

/// Twelve-parameter affine about a fixed center:
/// `p -> R * Sh * S * (p - c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub translation: [f64; 3],
    /// Rotation angles (radians) about axes 0, 1, 2.
    pub rotation: [f64; 3],
    pub log_scale: [f64; 3],
    /// Upper-triangular shear terms (01, 02, 12).
    pub shear: [f64; 3],
}

impl AffineParams {
    pub const LEN: usize = 12;

    pub fn to_vec(&self) -> [f64; 12] {
        let mut v = [0.0; 12];
        v[0..3].copy_from_slice(&self.translation);
        v[3..6].copy_from_slice(&self.rotation);
        v[6..9].copy_from_slice(&self.log_scale);
        v[9..12].copy_from_slice(&self.shear);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        AffineParams {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
            log_scale: [v[6], v[7], v[8]],
            shear: [v[9], v[10], v[11]],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let v = self.to_vec().map(|x| x * s);
        AffineParams::from_slice(&v)
    }

    pub fn to_matrix(&self, center: Point3) -> Matrix4<f64> {
        let [a, b, c] = self.rotation;
        let r0 = Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, a.cos(), -a.sin(),
            0.0, a.sin(), a.cos(),
        );
        let r1 = Matrix3::new(
            b.cos(), 0.0, b.sin(), //
            0.0, 1.0, 0.0,
            -b.sin(), 0.0, b.cos(),
        );
        let r2 = Matrix3::new(
            c.cos(), -c.sin(), 0.0, //
            c.sin(), c.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        let sh = Matrix3::new(
            1.0, self.shear[0], self.shear[1], //
            0.0, 1.0, self.shear[2],
            0.0, 0.0, 1.0,
        );
        let s = Matrix3::from_diagonal(&Vector3::new(
            self.log_scale[0].exp(),
            self.log_scale[1].exp(),
            self.log_scale[2].exp(),
        ));
        let lin = r2 * r1 * r0 * sh * s;
        let c = Vector3::new(center[0], center[1], center[2]);
        let t = Vector3::new(self.translation[0], self.translation[1], self.translation[2]);
        let off = c + t - lin * c;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        m[(0, 3)] = off[0];
        m[(1, 3)] = off[1];
        m[(2, 3)] = off[2];
        m
    }

    pub fn to_affine(&self, center: Point3) -> Result<AffineTransform> {
        AffineTransform::new(self.to_matrix(center))
    }
}

/// Affine followed by a dense displacement sampled on the target grid:
/// `p -> q + u(q)` with `q = base(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub base: AffineTransform,
    pub grid: Grid,
    /// Physical displacement per target voxel, `(dz, dy, dx)` interleaved.
    pub field: Vec<f32>,
}

impl DisplacementField {
    pub fn new(base: AffineTransform, grid: Grid, field: Vec<f32>) -> Result<Self> {
        if field.len() != 3 * grid.len() {
            return Err(Error::Shape(format!(
                "displacement field has {} components for {} voxels",
                field.len(),
                grid.len()
            )));
        }
        if field.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("displacement field has non-finite entries".into()));
        }
        Ok(DisplacementField { base, grid, field })
    }

    /// Trilinear sample of the displacement at a physical target point, clamped to the grid.
    pub fn displacement(&self, q: Point3) -> Point3 {
        let v = self.grid.to_voxel(q);
        let [d, h, w] = self.grid.dims;
        let clampf = |x: f64, n: usize| x.clamp(0.0, (n - 1) as f64);
        let (z, y, x) = (clampf(v[0], d), clampf(v[1], h), clampf(v[2], w));
        let (z0, y0, x0) = (z.floor() as usize, y.floor() as usize, x.floor() as usize);
        let (z1, y1, x1) = ((z0 + 1).min(d - 1), (y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fz, fy, fx) = (z - z0 as f64, y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 3];
        let corners = [
            (z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx)),
            (z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx),
            (z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx)),
            (z0, y1, x1, (1.0 - fz) * fy * fx),
            (z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx)),
            (z1, y0, x1, fz * (1.0 - fy) * fx),
            (z1, y1, x0, fz * fy * (1.0 - fx)),
            (z1, y1, x1, fz * fy * fx),
        ];
        for (cz, cy, cx, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            let i = 3 * self.grid.index(cz, cy, cx);
            for k in 0..3 {
                out[k] += wgt * self.field[i + k] as f64;
            }
        }
        out
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let q = self.base.apply(p);
        let u = self.displacement(q);
        [q[0] + u[0], q[1] + u[1], q[2] + u[2]]
    }

    /// Solves `q + u(q) = y` by fixed-point iteration, then undoes the base.
    pub fn apply_inverse(&self, y: Point3) -> Point3 {
        let mut q = y;
        for _ in 0..64 {
            let u = self.displacement(q);
            let next = [y[0] - u[0], y[1] - u[1], y[2] - u[2]];
            let delta = (0..3).map(|k| (next[k] - q[k]).abs()).fold(0.0, f64::max);
            q = next;
            if delta < 1e-10 {
                break;
            }
        }
        match self.base.invert() {
            Ok(inv) => inv.apply(q),
            Err(_) => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialTransform {
    Affine(AffineTransform),
    Field(DisplacementField),
    /// Applied left to right.
    Chain(Vec<SpatialTransform>),
    Inverse(Box<SpatialTransform>),
}

impl From<AffineTransform> for SpatialTransform {
    fn from(a: AffineTransform) -> Self {
        SpatialTransform::Affine(a)
    }
}

impl From<DisplacementField> for SpatialTransform {
    fn from(f: DisplacementField) -> Self {
        SpatialTransform::Field(f)
    }
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform::Affine(AffineTransform::identity())
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, SpatialTransform::Affine(a) if a.is_identity())
    }

    pub fn as_affine(&self) -> Option<&AffineTransform> {
        match self {
            SpatialTransform::Affine(a) => Some(a),
            _ => None,
        }
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        match self {
            SpatialTransform::Affine(a) => a.apply(p),
            SpatialTransform::Field(f) => f.apply(p),
            SpatialTransform::Chain(parts) => parts.iter().fold(p, |q, t| t.apply_point(q)),
            SpatialTransform::Inverse(inner) => inner.apply_inverse(p),
        }
    }

    /// Maps a target point back to the source frame.
    pub fn apply_inverse(&self, p: Point3) -> Point3 {
        match self {
            SpatialTransform::Affine(a) => match a.invert() {
                Ok(inv) => inv.apply(p),
                Err(_) => p,
            },
            SpatialTransform::Field(f) => f.apply_inverse(p),
            SpatialTransform::Chain(parts) => {
                parts.iter().rev().fold(p, |q, t| t.apply_inverse(q))
            }
            SpatialTransform::Inverse(inner) => inner.apply_point(p),
        }
    }

    /// Transform equivalent to applying `self` first, then `next`.
    pub fn compose(&self, next: &SpatialTransform) -> SpatialTransform {
        if next.is_identity() {
            return self.clone();
        }
        if self.is_identity() {
            return next.clone();
        }
        match (self, next) {
            (SpatialTransform::Affine(a), SpatialTransform::Affine(b)) => {
                SpatialTransform::Affine(a.then(b))
            }
            _ => {
                let mut parts = Vec::new();
                for t in [self, next] {
                    match t {
                        SpatialTransform::Chain(inner) => parts.extend(inner.iter().cloned()),
                        other => parts.push(other.clone()),
                    }
                }
                SpatialTransform::Chain(parts)
            }
        }
    }

    /// Exact inverse for affines; lazy (pointwise) inverse otherwise.
    pub fn inverse(&self) -> Result<SpatialTransform> {
        match self {
            SpatialTransform::Affine(a) => Ok(SpatialTransform::Affine(a.invert()?)),
            SpatialTransform::Inverse(inner) => Ok((**inner).clone()),
            other => Ok(SpatialTransform::Inverse(Box::new(other.clone()))),
        }
    }
}

/// Mean distance, in voxel units of `grid`, between where `a` and `b` send
/// each voxel center of `grid`.
pub fn mean_displacement_error(a: &SpatialTransform, b: &SpatialTransform, grid: &Grid) -> f64 {
    mean_over_grid(grid, |p| {
        let (pa, pb) = (a.apply_point(p), b.apply_point(p));
        voxel_distance(grid, pa, pb)
    })
}

/// As [`mean_displacement_error`], restricted to voxels where `mask` is true.
pub fn mean_displacement_error_masked(
    a: &SpatialTransform,
    b: &SpatialTransform,
    grid: &Grid,
    mask: &[bool],
) -> f64 {
    let [d, h, w] = grid.dims;
    let (mut acc, mut n) = (0.0, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(grid.index(z, y, x)).copied().unwrap_or(false) {
                    continue;
                }
                let p = grid.to_physical([z as f64, y as f64, x as f64]);
                acc += voxel_distance(grid, a.apply_point(p), b.apply_point(p));
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Mean distance, in voxel units, that `t` moves each voxel center of `grid`.
pub fn mean_displacement(t: &SpatialTransform, grid: &Grid) -> f64 {
    mean_over_grid(grid, |p| voxel_distance(grid, p, t.apply_point(p)))
}

fn voxel_distance(grid: &Grid, a: Point3, b: Point3) -> f64 {
    (0..3)
        .map(|k| ((a[k] - b[k]) / grid.spacing[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_over_grid(grid: &Grid, mut f: impl FnMut(Point3) -> f64) -> f64 {
    let [d, h, w] = grid.dims;
    let mut acc = 0.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                acc += f(grid.to_physical([z as f64, y as f64, x as f64]));
            }
        }
    }
    acc / grid.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_affine(rng: &mut ChaCha8Rng) -> AffineTransform {
        let mut v = [0.0; 12];
        for (k, x) in v.iter_mut().enumerate() {
            let scale = match k {
                0..=2 => 5.0,
                3..=5 => 0.5,
                6..=8 => 0.2,
                _ => 0.2,
            };
            *x = rng.random_range(-scale..scale);
        }
        AffineParams::from_slice(&v)
            .to_affine([8.0, 9.0, 10.0])
            .unwrap()
    }

    fn dist(a: Point3, b: Point3) -> f64 {
        (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_and_translation() {
        let id = SpatialTransform::identity();
        assert_eq!(id.apply_point([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        let t = AffineTransform::translation([0.0, 0.0, 2.0]);
        assert_eq!(t.apply([1.0, 2.0, 3.0]), [1.0, 2.0, 5.0]);
    }

    #[test]
    fn invert_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_affine(&mut rng);
            let inv = a.invert().unwrap();
            let p = [rng.random_range(-20.0..20.0), 3.0, rng.random_range(-20.0..20.0)];
            assert!(dist(inv.apply(a.apply(p)), p) < 1e-9);
            let prod = a.then(&inv);
            assert!((prod.matrix() - Matrix4::identity()).abs().max() < 1e-9);
        }
        let s = AffineTransform::scaling([2.0; 3]).unwrap().invert().unwrap();
        assert_eq!(s.apply([1.0, 1.0, 1.0]), [0.5, 0.5, 0.5]);
        assert!(AffineTransform::identity().invert().unwrap().is_identity());
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let mut m = Matrix4::identity();
        m[(1, 1)] = 0.0;
        assert!(matches!(AffineTransform::new(m), Err(Error::Numeric(_))));
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b) = (random_affine(&mut rng), random_affine(&mut rng));
            let c = SpatialTransform::from(a.clone()).compose(&b.clone().into());
            let expected = b.matrix() * a.matrix();
            let got = c.as_affine().unwrap().matrix();
            assert!((got - expected).abs().max() < 1e-12);
        }
        let t1 = AffineTransform::translation([1.0, 0.0, 0.0]);
        let t2 = AffineTransform::translation([0.0, 2.0, -1.0]);
        let sum = SpatialTransform::from(t1).compose(&t2.into());
        assert_eq!(sum.apply_point([0.0; 3]), [1.0, 2.0, -1.0]);
    }

    #[test]
    fn compose_with_identity_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: SpatialTransform = random_affine(&mut rng).into();
        assert_eq!(t.compose(&SpatialTransform::identity()), t);
        assert_eq!(SpatialTransform::identity().compose(&t), t);
    }

    fn sine_field(grid: Grid, amp: f32) -> DisplacementField {
        let mut field = Vec::with_capacity(3 * grid.len());
        let [d, h, w] = grid.dims;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let zf = z as f32 / d as f32;
                    let yf = y as f32 / h as f32;
                    let xf = x as f32 / w as f32;
                    field.push(amp * (std::f32::consts::TAU * yf).sin());
                    field.push(amp * (std::f32::consts::TAU * xf).cos());
                    field.push(amp * (std::f32::consts::TAU * zf).sin());
                }
            }
        }
        let base = AffineTransform::translation([0.5, -0.3, 0.2]);
        DisplacementField::new(base, grid, field).unwrap()
    }

    #[test]
    fn field_inverse_round_trips() {
        let f: SpatialTransform = sine_field(Grid::isotropic(16), 1.0).into();
        for p in [[3.0, 4.0, 5.0], [8.2, 1.5, 12.9], [10.0, 10.0, 2.0]] {
            let q = f.apply_point(p);
            assert!(dist(f.apply_inverse(q), p) < 1e-6);
        }
    }

    #[test]
    fn chain_compose_applies_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f: SpatialTransform = sine_field(Grid::isotropic(16), 0.7).into();
        let a: SpatialTransform = random_affine(&mut rng).into();
        let b: SpatialTransform = random_affine(&mut rng).into();
        let ab = f.compose(&a).compose(&b);
        let p = [4.0, 5.0, 6.0];
        let expect = b.apply_point(a.apply_point(f.apply_point(p)));
        assert!(dist(ab.apply_point(p), expect) < 1e-12);
        // Associativity.
        let left = f.compose(&a).compose(&b);
        let right = f.compose(&a.compose(&b));
        assert!(dist(left.apply_point(p), right.apply_point(p)) < 1e-9);
        let inv = ab.inverse().unwrap();
        assert!(dist(inv.apply_point(ab.apply_point(p)), p) < 1e-6);
    }

    #[test]
    fn displacement_measures() {
        let grid = Grid::isotropic(4);
        let t: SpatialTransform = AffineTransform::translation([0.0, 3.0, 4.0]).into();
        assert!((mean_displacement(&t, &grid) - 5.0).abs() < 1e-12);
        assert_eq!(mean_displacement_error(&t, &t, &grid), 0.0);
    }
}
