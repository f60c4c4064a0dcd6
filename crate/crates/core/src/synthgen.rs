//! Procedural phantom cohorts.
//!
//! A template holds nested ellipsoids and a bent tube. Every case is the
//! template pushed through a known warp (affine, optionally followed by a
//! smooth sinusoidal displacement), re-rendered with case-specific class
//! intensities, a bias field and noise. The generating warps are kept in an
//! oracle for tests and evaluation; the trainer never reads it.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Matrix4;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::spatreg::resample::resample_labels;
use crate::spatreg::transform::{AffineParams, AffineTransform, DisplacementField, SpatialTransform};
use crate::volgrid::{self, Case, Dataset, Grid, LabelMap, Volume, VolumeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned ellipsoid in voxel coordinates.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    /// Tube of constant radius around a quadratic Bezier centerline.
    Tube {
        start: [f64; 3],
        control: [f64; 3],
        end: [f64; 3],
        radius: f64,
    },
}

const TUBE_SAMPLES: usize = 96;

impl Shape {
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Ellipsoid { center, radii } => (
                [center[0] - radii[0], center[1] - radii[1], center[2] - radii[2]],
                [center[0] + radii[0], center[1] + radii[1], center[2] + radii[2]],
            ),
            Shape::Tube {
                start,
                control,
                end,
                radius,
            } => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for p in [start, control, end] {
                    for k in 0..3 {
                        lo[k] = lo[k].min(p[k] - radius);
                        hi[k] = hi[k].max(p[k] + radius);
                    }
                }
                (lo, hi)
            }
        }
    }

    fn centerline(start: &[f64; 3], control: &[f64; 3], end: &[f64; 3]) -> Vec<[f64; 3]> {
        (0..=TUBE_SAMPLES)
            .map(|i| {
                let t = i as f64 / TUBE_SAMPLES as f64;
                let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * (1.0 - t) * t, t * t);
                [
                    a * start[0] + b * control[0] + c * end[0],
                    a * start[1] + b * control[1] + c * end[1],
                    a * start[2] + b * control[2] + c * end[2],
                ]
            })
            .collect()
    }

    /// Voxel indices covered by the shape.
    fn rasterize(&self, grid: &Grid) -> Vec<usize> {
        let (lo, hi) = self.bounds();
        let [d, h, w] = grid.dims;
        let range = |k: usize, n: usize| {
            let a = lo[k].floor().max(0.0) as usize;
            let b = (hi[k].ceil().max(0.0) as usize).min(n - 1);
            a..=b
        };
        let line = match self {
            Shape::Tube {
                start, control, end, ..
            } => Self::centerline(start, control, end),
            Shape::Ellipsoid { .. } => Vec::new(),
        };
        let mut out = Vec::new();
        for z in range(0, d) {
            for y in range(1, h) {
                for x in range(2, w) {
                    let p = [z as f64, y as f64, x as f64];
                    let inside = match self {
                        Shape::Ellipsoid { center, radii } => {
                            (0..3)
                                .map(|k| ((p[k] - center[k]) / radii[k]).powi(2))
                                .sum::<f64>()
                                <= 1.0
                        }
                        Shape::Tube { radius, .. } => line.iter().any(|c| {
                            (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() <= radius * radius
                        }),
                    };
                    if inside {
                        out.push(grid.index(z, y, x));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Structure {
    pub class: u8,
    pub shape: Shape,
    /// Class this structure may be painted over (0 for background).
    #[serde(default)]
    pub parent: u8,
    pub intensity_mean: f64,
    /// Case-to-case spread of the class mean intensity.
    pub intensity_std: f64,
}

/// Magnitudes of random generating warps at severity 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpSpec {
    /// Per-axis translation bound, voxels.
    pub translation: f64,
    /// Per-axis rotation bound, radians.
    pub rotation: f64,
    pub log_scale: f64,
    pub shear: f64,
    /// Peak sinusoidal displacement per axis, voxels; 0 disables the field.
    pub field_amplitude: f64,
    /// Sinusoid cycles across the field of view.
    pub field_waves: f64,
    /// Severities of cohort cases are drawn uniformly from this range.
    pub severity: [f64; 2],
}

impl Default for WarpSpec {
    fn default() -> Self {
        WarpSpec {
            translation: 2.0,
            rotation: 0.12,
            log_scale: 0.06,
            shear: 0.04,
            field_amplitude: 1.5,
            field_waves: 1.0,
            severity: [0.4, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub num_classes: u8,
    pub background_mean: f64,
    pub background_std: f64,
    /// Painted in order; a structure's parent must come earlier.
    pub structures: Vec<Structure>,
    pub noise_std: f64,
    /// Relative amplitude of the multiplicative linear bias field.
    pub bias_amplitude: f64,
    /// Largest fraction of a structure that may land on a non-parent class.
    #[serde(default = "default_overlap_tolerance")]
    pub overlap_tolerance: f64,
    #[serde(default)]
    pub warp: WarpSpec,
}

fn default_overlap_tolerance() -> f64 {
    0.02
}

impl PhantomSpec {
    /// Four classes (background, outer and inner ellipsoid, bent tube) laid
    /// out on an `n`-cube.
    pub fn standard(n: usize) -> Self {
        let s = n as f64 / 32.0;
        let p = |v: [f64; 3]| [v[0] * s, v[1] * s, v[2] * s];
        PhantomSpec {
            dims: [n; 3],
            num_classes: 4,
            background_mean: 0.15,
            background_std: 0.03,
            structures: vec![
                Structure {
                    class: 1,
                    shape: Shape::Ellipsoid {
                        center: p([15.5, 15.0, 13.0]),
                        radii: p([7.5, 8.0, 6.5]),
                    },
                    parent: 0,
                    intensity_mean: 0.45,
                    intensity_std: 0.07,
                },
                Structure {
                    class: 2,
                    shape: Shape::Ellipsoid {
                        center: p([15.0, 13.5, 14.0]),
                        radii: p([3.5, 3.5, 3.0]),
                    },
                    parent: 1,
                    intensity_mean: 0.75,
                    intensity_std: 0.07,
                },
                Structure {
                    class: 3,
                    shape: Shape::Tube {
                        start: p([8.0, 10.0, 22.0]),
                        control: p([16.0, 20.0, 27.0]),
                        end: p([24.0, 12.0, 22.5]),
                        radius: 1.6 * s,
                    },
                    parent: 0,
                    intensity_mean: 0.9,
                    intensity_std: 0.05,
                },
            ],
            noise_std: 0.01,
            bias_amplitude: 0.1,
            overlap_tolerance: default_overlap_tolerance(),
            warp: WarpSpec::default(),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("phantom needs at least 2 classes".into()));
        }
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Config(format!("phantom dims {:?} too small", self.dims)));
        }
        for (k, s) in self.structures.iter().enumerate() {
            if s.class == 0 || s.class >= self.num_classes {
                return Err(Error::Config(format!("structure {k} has class {}", s.class)));
            }
            if s.parent != 0 && !self.structures[..k].iter().any(|p| p.class == s.parent) {
                return Err(Error::Config(format!(
                    "structure {k} names parent {} that is not painted before it",
                    s.parent
                )));
            }
            let (lo, hi) = s.shape.bounds();
            for a in 0..3 {
                if lo[a] < 1.0 || hi[a] > (self.dims[a] - 2) as f64 {
                    return Err(Error::Config(format!(
                        "structure {k} does not fit within dims {:?}",
                        self.dims
                    )));
                }
            }
        }
        for v in [self.noise_std, self.bias_amplitude, self.background_std] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config("noise and bias parameters must be >= 0".into()));
            }
        }
        Ok(())
    }

    fn class_means(&self) -> Vec<f64> {
        let mut means = vec![self.background_mean; self.num_classes as usize];
        for s in &self.structures {
            means[s.class as usize] = s.intensity_mean;
        }
        means
    }

    fn class_stds(&self) -> Vec<f64> {
        let mut stds = vec![self.background_std; self.num_classes as usize];
        for s in &self.structures {
            stds[s.class as usize] = s.intensity_std;
        }
        stds
    }
}

/// Sinusoidal displacement: component `k` is
/// `amplitude[k] * sin(TAU * sum_a wave[k][a] * p[a] / extent[a] + phase[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineField {
    /// Physical units.
    pub amplitude: [f64; 3],
    pub wave: [[f64; 3]; 3],
    pub phase: [f64; 3],
}

impl SineField {
    fn at(&self, p: [f64; 3], extent: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for k in 0..3 {
            let arg: f64 = (0..3).map(|a| self.wave[k][a] * p[a] / extent[a]).sum();
            u[k] = self.amplitude[k] * (TAU * arg + self.phase[k]).sin();
        }
        u
    }
}

/// A generating warp from template coordinates to case coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    /// Row-major homogeneous matrix.
    pub affine: [f64; 16],
    pub field: Option<SineField>,
    pub severity: f64,
}

impl Warp {
    pub fn identity() -> Self {
        Warp {
            affine: AffineTransform::identity().to_row_major(),
            field: None,
            severity: 0.0,
        }
    }

    pub fn from_affine(a: &AffineTransform, severity: f64) -> Self {
        Warp {
            affine: a.to_row_major(),
            field: None,
            severity,
        }
    }

    /// Random warp whose displacement grows linearly with `severity`: the
    /// affine part is `I + severity * (M - I)` for a random `M`, the field is
    /// scaled by `severity`. The same `rng` state gives the same direction for
    /// every severity.
    pub fn random(spec: &WarpSpec, grid: &Grid, severity: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut u = |m: f64| rng.random_range(-1.0..=1.0) * m;
        let voxel = grid.spacing.iter().sum::<f64>() / 3.0;
        let params = AffineParams {
            translation: [
                u(spec.translation * voxel),
                u(spec.translation * voxel),
                u(spec.translation * voxel),
            ],
            rotation: [u(spec.rotation), u(spec.rotation), u(spec.rotation)],
            log_scale: [u(spec.log_scale), u(spec.log_scale), u(spec.log_scale)],
            shear: [u(spec.shear), u(spec.shear), u(spec.shear)],
        };
        let m = params.to_matrix(grid.center());
        let lin = Matrix4::identity() + (m - Matrix4::<f64>::identity()) * severity;
        let affine = AffineTransform::new(lin)?;
        let mut amplitude = [0.0; 3];
        let mut wave = [[0.0; 3]; 3];
        let mut phase = [0.0; 3];
        for k in 0..3 {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            amplitude[k] = sign * rng.random_range(0.5..=1.0) * spec.field_amplitude * grid.spacing[k] * severity;
            let axis = (k + 1 + rng.random_range(0..2usize)) % 3;
            wave[k][axis] = spec.field_waves * rng.random_range(0.75..=1.25);
            phase[k] = rng.random_range(0.0..TAU);
        }
        let field = (spec.field_amplitude > 0.0 && severity > 0.0).then_some(SineField {
            amplitude,
            wave,
            phase,
        });
        Ok(Warp {
            affine: affine.to_row_major(),
            field,
            severity,
        })
    }

    pub fn affine(&self) -> Result<AffineTransform> {
        AffineTransform::from_row_major(&self.affine)
    }

    /// The warp as a transform; a field part is sampled on `grid`, the case grid.
    pub fn transform(&self, grid: &Grid) -> Result<SpatialTransform> {
        let base = self.affine()?;
        let Some(f) = &self.field else {
            return Ok(SpatialTransform::Affine(base));
        };
        let extent = [
            grid.dims[0] as f64 * grid.spacing[0],
            grid.dims[1] as f64 * grid.spacing[1],
            grid.dims[2] as f64 * grid.spacing[2],
        ];
        let [d, h, w] = grid.dims;
        let mut field = Vec::with_capacity(3 * grid.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = grid.to_physical([z as f64, y as f64, x as f64]);
                    field.extend(f.at(p, extent).map(|v| v as f32));
                }
            }
        }
        Ok(SpatialTransform::Field(DisplacementField::new(base, *grid, field)?))
    }
}

#[derive(Debug, Clone)]
pub struct Template {
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct CohortCase {
    pub volume: Volume,
    pub labels: LabelMap,
    pub warp: Warp,
    /// Maps template points to case points.
    pub gt_transform: SpatialTransform,
    pub severity: f64,
}

/// Logistic edge scale, in voxels, used when rendering intensities.
const EDGE_WIDTH: f64 = 0.5;

impl Shape {
    /// Approximate signed distance in voxels, negative inside.
    fn signed_distance(&self, p: [f64; 3], line: &[[f64; 3]]) -> f64 {
        match self {
            Shape::Ellipsoid { center, radii } => {
                let r = (0..3)
                    .map(|k| ((p[k] - center[k]) / radii[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mean_r = (radii[0] + radii[1] + radii[2]) / 3.0;
                (r - 1.0) * mean_r
            }
            Shape::Tube { radius, .. } => {
                let d2 = line
                    .iter()
                    .map(|c| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                d2.sqrt() - radius
            }
        }
    }
}

/// Continuous template intensity: structures painted in order with soft
/// edges over a constant background.
struct Painter {
    shapes: Vec<(Shape, Vec<[f64; 3]>, usize)>,
}

impl Painter {
    fn new(spec: &PhantomSpec) -> Self {
        let shapes = spec
            .structures
            .iter()
            .map(|s| {
                let line = match &s.shape {
                    Shape::Tube {
                        start, control, end, ..
                    } => Shape::centerline(start, control, end),
                    Shape::Ellipsoid { .. } => Vec::new(),
                };
                (s.shape.clone(), line, s.class as usize)
            })
            .collect();
        Painter { shapes }
    }

    /// Intensity at template voxel coordinate `p` given per-class means.
    fn at(&self, p: [f64; 3], means: &[f64]) -> f64 {
        let mut v = means[0];
        for (shape, line, class) in &self.shapes {
            let sd = shape.signed_distance(p, line);
            if sd > 12.0 * EDGE_WIDTH {
                continue;
            }
            let occ = 1.0 / (1.0 + (sd / EDGE_WIDTH).exp());
            v = v * (1.0 - occ) + means[*class] * occ;
        }
        v
    }
}

/// Renders a case by pulling each voxel back through `gt` into template
/// coordinates, then applies a linear multiplicative bias and Gaussian noise,
/// clamped to `[0, 1]`.
fn render(
    id: VolumeId,
    grid: &Grid,
    gt: &SpatialTransform,
    means: &[f64],
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    let painter = Painter::new(spec);
    let mut dir = [0.0f64; 3];
    for v in &mut dir {
        *v = StandardNormal.sample(rng);
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let cv = grid.to_voxel(grid.center());
    let [d, h, w] = grid.dims;
    let half = [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0];
    let mut voxels = Vec::with_capacity(grid.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let src = grid.to_voxel(gt.apply_inverse(grid.to_physical(p)));
                let base = painter.at(src, means);
                let proj: f64 = (0..3).map(|k| dir[k] / norm * (p[k] - cv[k]) / half[k]).sum();
                let noise: f64 = StandardNormal.sample(rng);
                let v = base * (1.0 + spec.bias_amplitude * proj) + spec.noise_std * noise;
                voxels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(id, *grid, voxels)
}

pub fn generate_template(spec: &PhantomSpec, seed: u64) -> Result<Template> {
    spec.validate()?;
    let grid = spec.grid()?;
    let mut labels = vec![0u8; grid.len()];
    for s in &spec.structures {
        let cover = s.shape.rasterize(&grid);
        let conflicts = cover
            .iter()
            .filter(|&&i| labels[i] != 0 && labels[i] != s.parent && labels[i] != s.class)
            .count();
        if conflicts as f64 > spec.overlap_tolerance * cover.len().max(1) as f64 {
            return Err(Error::Generation(format!(
                "class {} overlaps other structures in {conflicts} of {} voxels",
                s.class,
                cover.len()
            )));
        }
        for i in cover {
            labels[i] = s.class;
        }
    }
    let labels = LabelMap::new(VolumeId(u32::MAX), grid, labels, spec.num_classes)?;
    if let Some(c) = labels.histogram().iter().position(|&n| n == 0) {
        return Err(Error::Generation(format!("class {c} occupies no voxel")));
    }
    let mut rng = seeding::rng(seed, &[0x7e3a]);
    let volume = render(
        labels.id,
        &grid,
        &SpatialTransform::identity(),
        &spec.class_means(),
        spec,
        &mut rng,
    )?;
    Ok(Template {
        spec: spec.clone(),
        volume,
        labels,
    })
}

fn touches_border(labels: &LabelMap) -> bool {
    let [d, h, w] = labels.grid.dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let edge = z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1;
                if edge && labels.labels[labels.grid.index(z, y, x)] != 0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Pushes the template through `warp` and renders a new case with its own
/// class intensities, bias and noise.
pub fn derive_case(template: &Template, warp: &Warp, id: VolumeId, seed: u64) -> Result<CohortCase> {
    let grid = template.labels.grid;
    let gt = warp.transform(&grid)?;
    let labels = resample_labels(&template.labels, &gt, &grid, id);
    if touches_border(&labels) {
        return Err(Error::Generation(format!(
            "warp of severity {} pushes structures out of the field of view",
            warp.severity
        )));
    }
    if let Some(c) = labels.histogram().iter().position(|&n| n == 0) {
        return Err(Error::Generation(format!("class {c} vanished under the warp")));
    }
    let spec = &template.spec;
    let mut rng = seeding::rng(seed, &[id.0 as u64, 0xca5e]);
    let means: Vec<f64> = spec
        .class_means()
        .iter()
        .zip(spec.class_stds())
        .map(|(&m, s)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (m + s * z).clamp(0.0, 1.0)
        })
        .collect();
    let volume = render(id, &grid, &gt, &means, spec, &mut rng)?;
    Ok(CohortCase {
        volume,
        labels,
        severity: warp.severity,
        warp: warp.clone(),
        gt_transform: gt,
    })
}

/// Random warp at random severity, retried until the case fits.
fn derive_random_case(template: &Template, id: VolumeId, seed: u64) -> Result<CohortCase> {
    let ws = &template.spec.warp;
    let mut last = None;
    for attempt in 0..64u64 {
        let mut rng = seeding::rng(seed, &[id.0 as u64, attempt, 0x3a4f]);
        let (lo, hi) = (ws.severity[0].min(ws.severity[1]), ws.severity[0].max(ws.severity[1]));
        let severity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let warp = Warp::random(ws, &template.labels.grid, severity, &mut rng)?;
        match derive_case(template, &warp, id, seeding::derive(seed, &[attempt])) {
            Ok(c) => return Ok(c),
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generation("no admissible warp".into())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub id: VolumeId,
    pub split: Split,
    pub severity: f64,
    pub warp: Warp,
}

/// Ground truth for every case: generating warps and complete label maps.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub grid: Grid,
    pub cases: Vec<OracleCase>,
    pub labels: BTreeMap<VolumeId, LabelMap>,
}

impl Oracle {
    fn case(&self, id: VolumeId) -> Result<&OracleCase> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Lookup(format!("oracle has no case {id}")))
    }

    /// Template-to-case transform.
    pub fn gt_transform(&self, id: VolumeId) -> Result<SpatialTransform> {
        self.case(id)?.warp.transform(&self.grid)
    }

    pub fn severity(&self, id: VolumeId) -> Result<f64> {
        Ok(self.case(id)?.severity)
    }

    /// True transform mapping case `i` points to case `j` points.
    pub fn pairwise(&self, i: VolumeId, j: VolumeId) -> Result<SpatialTransform> {
        if i == j {
            return Ok(SpatialTransform::identity());
        }
        let gi = self.gt_transform(i)?;
        let gj = self.gt_transform(j)?;
        Ok(gi.inverse()?.compose(&gj))
    }

    pub fn labels(&self, id: VolumeId) -> Result<&LabelMap> {
        self.labels
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("oracle has no labels for {id}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub n_labeled: usize,
    pub phantom: PhantomSpec,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_train: 20,
            n_test: 6,
            n_labeled: 1,
            phantom: PhantomSpec::standard(32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub template: Template,
    /// Training view: only labeled cases carry labels.
    pub dataset: Dataset,
    /// Held-out cases with labels, for evaluation only.
    pub test: Vec<Case>,
    pub oracle: Oracle,
}

pub fn build_cohort(spec: &CohortSpec, seed: u64) -> Result<Cohort> {
    if spec.n_labeled < 1 || spec.n_labeled >= spec.n_train {
        return Err(Error::Config(format!(
            "need 1 <= n_labeled < n_train, got {} of {}",
            spec.n_labeled, spec.n_train
        )));
    }
    let template = generate_template(&spec.phantom, seed)?;
    let total = spec.n_train + spec.n_test;
    let cases = (0..total)
        .map(|k| derive_random_case(&template, VolumeId(k as u32), seed))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = seeding::rng(seed, &[0x5911]);
    let mut labeled: Vec<VolumeId> = sample(&mut rng, spec.n_train, spec.n_labeled)
        .into_iter()
        .map(|k| VolumeId(k as u32))
        .collect();
    labeled.sort();
    let unlabeled: Vec<VolumeId> = (0..spec.n_train as u32)
        .map(VolumeId)
        .filter(|id| !labeled.contains(id))
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut oracle_cases = Vec::new();
    let mut oracle_labels = BTreeMap::new();
    for (k, c) in cases.into_iter().enumerate() {
        let id = c.volume.id;
        let split = if k >= spec.n_train {
            Split::Test
        } else if labeled.contains(&id) {
            Split::Labeled
        } else {
            Split::Unlabeled
        };
        oracle_cases.push(OracleCase {
            id,
            split,
            severity: c.severity,
            warp: c.warp.clone(),
        });
        oracle_labels.insert(id, c.labels.clone());
        let case = Case {
            labels: (split != Split::Unlabeled).then_some(c.labels),
            volume: c.volume,
        };
        if split == Split::Test {
            test.push(case);
        } else {
            train.push(case);
        }
    }
    let dataset = Dataset::new(train, labeled, unlabeled)?;
    Ok(Cohort {
        spec: spec.clone(),
        oracle: Oracle {
            grid: template.labels.grid,
            cases: oracle_cases,
            labels: oracle_labels,
        },
        template,
        dataset,
        test,
    })
}

/// Cohort of `n_cases` training volumes with `n_labeled` of them labeled, and
/// its oracle.
pub fn build_dataset(
    n_cases: usize,
    n_labeled: usize,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<(Dataset, Oracle)> {
    let cohort = build_cohort(
        &CohortSpec {
            n_train: n_cases,
            n_test: 0,
            n_labeled,
            phantom: spec.clone(),
        },
        seed,
    )?;
    Ok((cohort.dataset, cohort.oracle))
}

/// Split file of a cohort directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub num_classes: u8,
    pub seed: u64,
    pub labeled_ids: Vec<VolumeId>,
    pub unlabeled_ids: Vec<VolumeId>,
    pub test_ids: Vec<VolumeId>,
    pub spec: CohortSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OracleFile {
    dims: [usize; 3],
    spacing: [f64; 3],
    cases: Vec<OracleCase>,
}

fn volume_path(dir: &Path, id: VolumeId) -> std::path::PathBuf {
    dir.join("volumes").join(format!("{:04}.xtv", id.0))
}

fn label_path(dir: &Path, sub: &str, id: VolumeId) -> std::path::PathBuf {
    dir.join(sub).join(format!("{:04}.xtl", id.0))
}

fn make_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes volumes, training labels, test labels, `dataset.json`, and the
/// test-only `oracle.json` with `oracle_labels/`.
pub fn write_cohort(dir: &Path, cohort: &Cohort, seed: u64) -> Result<()> {
    for sub in ["volumes", "labels", "test_labels", "oracle_labels"] {
        make_dir(&dir.join(sub))?;
    }
    for case in cohort.dataset.cases.iter().chain(&cohort.test) {
        volgrid::write_volume(&volume_path(dir, case.volume.id), &case.volume)?;
    }
    for id in &cohort.dataset.labeled_ids {
        volgrid::write_labels(&label_path(dir, "labels", *id), cohort.dataset.labels(*id)?)?;
    }
    for case in &cohort.test {
        if let Some(l) = &case.labels {
            volgrid::write_labels(&label_path(dir, "test_labels", case.volume.id), l)?;
        }
    }
    for (id, l) in &cohort.oracle.labels {
        volgrid::write_labels(&label_path(dir, "oracle_labels", *id), l)?;
    }
    let index = DatasetIndex {
        num_classes: cohort.spec.phantom.num_classes,
        seed,
        labeled_ids: cohort.dataset.labeled_ids.clone(),
        unlabeled_ids: cohort.dataset.unlabeled_ids.clone(),
        test_ids: cohort.test.iter().map(|c| c.volume.id).collect(),
        spec: cohort.spec.clone(),
    };
    let p = dir.join("dataset.json");
    std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    let oracle = OracleFile {
        dims: cohort.oracle.grid.dims,
        spacing: cohort.oracle.grid.spacing,
        cases: cohort.oracle.cases.clone(),
    };
    let p = dir.join("oracle.json");
    std::fs::write(&p, serde_json::to_string_pretty(&oracle)?).map_err(|e| Error::io(&p, e))
}

/// Cohort directory as seen by training and evaluation.
#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub index: DatasetIndex,
    pub dataset: Dataset,
    pub test: Vec<Case>,
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join("dataset.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the training view and the labeled test cases; never touches the oracle.
pub fn read_cohort(dir: &Path) -> Result<LoadedCohort> {
    let index = read_index(dir)?;
    let mut train = Vec::new();
    for id in index.labeled_ids.iter().chain(&index.unlabeled_ids) {
        let volume = volgrid::read_volume(&volume_path(dir, *id))?;
        let labels = if index.labeled_ids.contains(id) {
            Some(volgrid::read_labels(&label_path(dir, "labels", *id))?)
        } else {
            None
        };
        train.push(Case { volume, labels });
    }
    train.sort_by_key(|c| c.volume.id);
    let mut test = Vec::new();
    for id in &index.test_ids {
        test.push(Case {
            volume: volgrid::read_volume(&volume_path(dir, *id))?,
            labels: Some(volgrid::read_labels(&label_path(dir, "test_labels", *id))?),
        });
    }
    let dataset = Dataset::new(train, index.labeled_ids.clone(), index.unlabeled_ids.clone())?;
    Ok(LoadedCohort {
        index,
        dataset,
        test,
    })
}

/// Reads `oracle.json` and `oracle_labels/`. Test and evaluation code only.
pub fn read_oracle(dir: &Path) -> Result<Oracle> {
    let p = dir.join("oracle.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let file: OracleFile = serde_json::from_str(&text)?;
    let mut labels = BTreeMap::new();
    for c in &file.cases {
        labels.insert(c.id, volgrid::read_labels(&label_path(dir, "oracle_labels", c.id))?);
    }
    Ok(Oracle {
        grid: Grid::new(file.dims, file.spacing)?,
        cases: file.cases,
        labels,
    })
}
