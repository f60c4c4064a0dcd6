//! Intensity-based affine registration.
//!
//! The optimizer searches the pull-back map (fixed frame to moving frame) over
//! twelve affine parameters with derivative-free coordinate search: each sweep
//! runs a golden-section line search along one parameter at a time, the search
//! radius halves whenever a sweep stalls, and a two-level pyramid moves from a
//! smoothed half-resolution pair to the full-resolution pair. The result is
//! returned in table orientation, i.e. mapping moving points to fixed points.
//!
//! Poses are scored on a central box of the fixed image. Samples that leave
//! the moving image read the fill value instead of being dropped, so a pose
//! cannot gain by shrinking the overlap. MI uses linear bin splitting for both
//! images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatreg::metric::normalized_mi_from_joint;
use crate::spatreg::resample::{downsample2, smooth, HALF_VOXEL};
use crate::spatreg::transform::{AffineParams, AffineTransform, Point3};
use crate::volgrid::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Mi,
    NegRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub metric: SimilarityMetric,
    pub bins: usize,
    pub levels: usize,
    /// Coordinate sweeps per pyramid level.
    pub max_sweeps: usize,
    /// Function evaluations per golden-section line search.
    pub line_evals: usize,
    pub n_restarts: usize,
    pub tolerance: f64,
    /// Initial search radius: translation (voxels), rotation (rad), log-scale, shear.
    pub initial_radius: [f64; 4],
    /// Fraction of voxels that must overlap for a pose to be scored.
    pub min_overlap: f64,
    /// Passes of `[1, 2, 1] / 4` smoothing applied to both images before scoring.
    pub smoothing: usize,
    /// Fraction of each fixed-image axis left unscored at either end.
    pub margin: f64,
    /// In-plane voxel stride used when scoring the full-resolution level.
    pub fine_stride: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            metric: SimilarityMetric::Mi,
            bins: 32,
            levels: 2,
            max_sweeps: 8,
            line_evals: 10,
            n_restarts: 1,
            tolerance: 1e-4,
            initial_radius: [3.0, 0.15, 0.1, 0.08],
            min_overlap: 0.25,
            smoothing: 1,
            margin: 0.125,
            fine_stride: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps moving-frame points to fixed-frame points.
    pub transform: AffineTransform,
    pub params: AffineParams,
    pub similarity: f64,
    /// False when the sweep budget ran out before the search radius settled.
    pub converged: bool,
    pub evaluations: usize,
}

struct Objective<'a> {
    fixed: &'a Volume,
    moving: &'a Volume,
    /// Lower bin and weight of the upper bin for each fixed voxel.
    fixed_bins: Vec<(u16, f32)>,
    center: Point3,
    metric: SimilarityMetric,
    bins: usize,
    min_overlap: f64,
    stride: usize,
    /// Scored index range per axis of the fixed image.
    region: [(usize, usize); 3],
    evaluations: usize,
    joint: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(
        fixed: &'a Volume,
        moving: &'a Volume,
        center: Point3,
        stride: usize,
        cfg: &RegistrationConfig,
    ) -> Self {
        let fixed_bins = fixed
            .voxels
            .iter()
            .map(|&v| {
                let (b, f) = soft_bin(v as f64, cfg.bins);
                (b as u16, f as f32)
            })
            .collect();
        Objective {
            fixed,
            moving,
            fixed_bins,
            center,
            metric: cfg.metric,
            bins: cfg.bins,
            min_overlap: cfg.min_overlap,
            stride: stride.max(1),
            region: fixed.grid.dims.map(|n| {
                let m = ((n as f64 * cfg.margin).floor() as usize).min((n - 1) / 2);
                (m, n - m)
            }),
            evaluations: 0,
            joint: vec![0.0; cfg.bins * cfg.bins],
        }
    }

    /// Cost to minimize: negative similarity.
    fn cost(&mut self, params: &[f64]) -> f64 {
        self.evaluations += 1;
        let pull = AffineParams::from_slice(params).to_matrix(self.center);
        let fg = &self.fixed.grid;
        let mg = &self.moving.grid;
        // Fixed voxel index -> moving voxel coordinate.
        let mut m = [[0.0f64; 4]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = pull[(r, c)] * fg.spacing[c] / mg.spacing[r];
            }
            m[r][3] = pull[(r, 3)] / mg.spacing[r];
        }
        let [_, h, w] = fg.dims;
        let [(z_lo, z_hi), (y_lo, y_hi), (x_lo, x_hi)] = self.region;
        let [md, mh, mw] = mg.dims;
        let lim = [
            md as f64 - HALF_VOXEL,
            mh as f64 - HALF_VOXEL,
            mw as f64 - HALF_VOXEL,
        ];
        let data = &self.moving.voxels;
        let bins = self.bins;
        self.joint.iter_mut().for_each(|v| *v = 0.0);
        let mut overlap = 0usize;
        let mut scored = 0usize;
        let mut sq = 0.0f64;
        let st = self.stride;
        let step = [m[0][2] * st as f64, m[1][2] * st as f64, m[2][2] * st as f64];
        for z in z_lo..z_hi {
            for y in (y_lo..y_hi).step_by(st) {
                let mut idx = (z * h + y) * w + x_lo;
                let (zf, yf, xf) = (z as f64, y as f64, x_lo as f64);
                let mut v = [
                    m[0][0] * zf + m[0][1] * yf + m[0][2] * xf + m[0][3],
                    m[1][0] * zf + m[1][1] * yf + m[1][2] * xf + m[1][3],
                    m[2][0] * zf + m[2][1] * yf + m[2][2] * xf + m[2][3],
                ];
                for _ in (x_lo..x_hi).step_by(st) {
                    scored += 1;
                    let inside = v[0] >= -HALF_VOXEL
                        && v[1] >= -HALF_VOXEL
                        && v[2] >= -HALF_VOXEL
                        && v[0] < lim[0]
                        && v[1] < lim[1]
                        && v[2] < lim[2];
                    // Out-of-view samples read the resampling fill value, so
                    // every fixed voxel is scored whatever the overlap.
                    let val = if inside {
                        overlap += 1;
                        sample(data, [md, mh, mw], v)
                    } else {
                        0.0
                    };
                    match self.metric {
                        SimilarityMetric::Mi => {
                            let (fb, ff) = self.fixed_bins[idx];
                            let (fb, ff) = (fb as usize, ff as f64);
                            let (mb, mf) = soft_bin(val, bins);
                            let r0 = fb * bins + mb;
                            let r1 = (fb + 1).min(bins - 1) * bins + mb;
                            let m1 = usize::from(mb + 1 < bins);
                            self.joint[r0] += (1.0 - ff) * (1.0 - mf);
                            self.joint[r0 + m1] += (1.0 - ff) * mf;
                            self.joint[r1] += ff * (1.0 - mf);
                            self.joint[r1 + m1] += ff * mf;
                        }
                        SimilarityMetric::NegRmse => {
                            let diff = val - self.fixed.voxels[idx] as f64;
                            sq += diff * diff;
                        }
                    }
                    v[0] += step[0];
                    v[1] += step[1];
                    v[2] += step[2];
                    idx += st;
                }
            }
        }
        if (overlap as f64) < self.min_overlap * scored as f64 {
            return match self.metric {
                SimilarityMetric::Mi => 0.0,
                SimilarityMetric::NegRmse => 1.0,
            };
        }
        match self.metric {
            SimilarityMetric::Mi => -normalized_mi_from_joint(&self.joint, bins),
            SimilarityMetric::NegRmse => (sq / scored as f64).sqrt(),
        }
    }
}

/// Linear split of a `[0, 1]` value between bin centers: (lower bin, upper weight).
#[inline(always)]
fn soft_bin(v: f64, bins: usize) -> (usize, f64) {
    let pos = v * bins as f64 - 0.5;
    if pos <= 0.0 {
        (0, 0.0)
    } else if pos >= (bins - 1) as f64 {
        (bins - 1, 0.0)
    } else {
        let b = pos as usize;
        (b, pos - b as f64)
    }
}

/// Trilinear sample at a coordinate already known to lie inside the lattice.
#[inline(always)]
fn sample(data: &[f32], dims: [usize; 3], v: [f64; 3]) -> f64 {
    let [d, h, w] = dims;
    let split = |c: f64, n: usize| {
        let c = c.clamp(0.0, (n - 1) as f64);
        let i = (c as usize).min(n.saturating_sub(2));
        (i, c - i as f64, usize::from(n > 1))
    };
    let (z0, fz, sz) = split(v[0], d);
    let (y0, fy, sy) = split(v[1], h);
    let (x0, fx, sx) = split(v[2], w);
    let i000 = (z0 * h + y0) * w + x0;
    let (dz, dy, dx) = (sz * h * w, sy * w, sx);
    let cell = &data[i000..=i000 + dz + dy + dx];
    let at = |i: usize| cell[i - i000] as f64;
    let c00 = at(i000) + fx * (at(i000 + dx) - at(i000));
    let c01 = at(i000 + dy) + fx * (at(i000 + dy + dx) - at(i000 + dy));
    let c10 = at(i000 + dz) + fx * (at(i000 + dz + dx) - at(i000 + dz));
    let c11 = at(i000 + dz + dy) + fx * (at(i000 + dz + dy + dx) - at(i000 + dz + dy));
    let c0 = c00 + fy * (c01 - c00);
    let c1 = c10 + fy * (c11 - c10);
    c0 + fz * (c1 - c0)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search of `f` on `[lo, hi]`; returns the best `(x, f(x))` seen.
fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, evals: usize) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for _ in 2..evals.max(2) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

fn radius_vector(cfg: &RegistrationConfig, voxel: f64) -> [f64; 12] {
    let [t, r, s, h] = cfg.initial_radius;
    let mut out = [0.0; 12];
    for k in 0..12 {
        out[k] = match k / 3 {
            0 => t * voxel,
            1 => r,
            2 => s,
            _ => h,
        };
    }
    out
}

/// Coordinate search from `start`; returns (params, cost, settled).
fn coordinate_search(
    obj: &mut Objective<'_>,
    start: [f64; 12],
    mut radius: [f64; 12],
    cfg: &RegistrationConfig,
) -> ([f64; 12], f64, bool) {
    let mut x = start;
    let mut fx = obj.cost(&x);
    let mut shrinks = 0;
    for _ in 0..cfg.max_sweeps {
        let before = fx;
        for k in 0..12 {
            let center = x[k];
            let (xk, fk) = golden_section(
                |t| {
                    let mut trial = x;
                    trial[k] = t;
                    obj.cost(&trial)
                },
                center - radius[k],
                center + radius[k],
                cfg.line_evals,
            );
            if fk < fx {
                x[k] = xk;
                fx = fk;
            }
        }
        if before - fx < cfg.tolerance {
            shrinks += 1;
            radius.iter_mut().for_each(|r| *r *= 0.5);
            if shrinks >= 3 {
                return (x, fx, true);
            }
        }
    }
    (x, fx, false)
}

/// Registers `moving` onto `fixed`; the returned transform maps moving-frame
/// points to fixed-frame points.
pub fn register_affine(
    moving: &Volume,
    fixed: &Volume,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if cfg.levels == 0 || cfg.bins < 2 || cfg.line_evals < 2 {
        return Err(Error::Config(
            "registration needs levels >= 1, bins >= 2 and line_evals >= 2".into(),
        ));
    }
    let center = fixed.grid.center();
    let mut pyramid = vec![(
        smooth(fixed, cfg.smoothing),
        smooth(moving, cfg.smoothing),
    )];
    for _ in 1..cfg.levels {
        let (f, m) = pyramid.last().expect("non-empty pyramid");
        let next = (downsample2(f), downsample2(m));
        pyramid.push(next);
    }
    let voxel = fixed.grid.spacing.iter().sum::<f64>() / 3.0;
    let radius = radius_vector(cfg, voxel);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut evaluations = 0;

    // Coarsest level with restarts.
    let (cf, cm) = pyramid.last().expect("non-empty pyramid");
    let coarse_stride = if cfg.levels == 1 { cfg.fine_stride } else { 1 };
    let mut obj = Objective::new(cf, cm, center, coarse_stride, cfg);
    let mut best = coordinate_search(&mut obj, [0.0; 12], radius, cfg);
    for _ in 0..cfg.n_restarts {
        let mut start = [0.0; 12];
        for k in 0..12 {
            start[k] = rng.random_range(-0.5..=0.5) * radius[k];
        }
        let cand = coordinate_search(&mut obj, start, radius, cfg);
        if cand.1 < best.1 {
            best = cand;
        }
    }
    evaluations += obj.evaluations;

    // Finer levels refine with a shrinking radius.
    let mut level_radius = radius;
    for (level, (f, m)) in pyramid.iter().enumerate().rev().skip(1) {
        level_radius.iter_mut().for_each(|r| *r *= 0.5);
        let stride = if level == 0 { cfg.fine_stride } else { 1 };
        let mut obj = Objective::new(f, m, center, stride, cfg);
        best = coordinate_search(&mut obj, best.0, level_radius, cfg);
        log::debug!("level {:?}: {} evaluations", f.grid.dims, obj.evaluations);
        evaluations += obj.evaluations;
    }

    let (x, cost, settled) = best;
    if !settled {
        log::warn!(
            "registration {} -> {} stopped at the sweep budget (cost {cost:.4})",
            moving.id,
            fixed.id
        );
    }
    let params = AffineParams::from_slice(&x);
    let pull = params.to_affine(center)?;
    Ok(RegistrationResult {
        transform: pull.invert()?,
        params,
        similarity: -cost,
        converged: settled,
        evaluations,
    })
}
