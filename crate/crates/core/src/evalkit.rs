//! Overlap and surface-distance metrics, run reports and plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use rand::seq::index::sample;

use crate::autograd::Tensor;
use crate::losses::argmax_labels;
use crate::segnets::Model;
use crate::synthgen::Oracle;
use crate::trainkit::{Flags, TrainConfig, TrainData};
use crate::volgrid::{LabelMap, SliceRef, VolumeId};
use crate::{seeding, Error, Result};

/// `2|P & G| / (|P| + |G|)`; 1 when both are empty.
pub fn dsc(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        let (ia, ib) = (*a == class, *b == class);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Mask voxels with a face neighbor outside the mask or the lattice.
/// Axes of extent 1 have no neighbors.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let mut edge = false;
                for (axis, n, stride) in [(z, d, h * w), (y, h, w), (x, w, 1)] {
                    if n == 1 {
                        continue;
                    }
                    if axis == 0 || axis + 1 == n || !mask[i - stride] || !mask[i + stride] {
                        edge = true;
                        break;
                    }
                }
                if edge {
                    out.push(i);
                }
            }
        }
    }
    out
}

// Exact squared distance along one line with sample spacing `s`
// (lower envelope of parabolas).
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let sq = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64))
                / (2.0 * s2 * (q as f64 - p as f64));
            if sq <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sq;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = s2 * dq * dq + f[p];
    }
}

/// Squared physical distance from every voxel to the nearest seed.
pub fn squared_distance_to(seeds: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut g = vec![f64::INFINITY; n];
    for &i in seeds {
        g[i] = 0.0;
    }
    let strides = [dims[1] * dims[2], dims[2], 1];
    let longest = *dims.iter().max().unwrap_or(&1);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let st = strides[axis];
        for start in 0..n {
            // Visit each line once, from its first element.
            if (start / st) % len != 0 {
                continue;
            }
            for t in 0..len {
                line[t] = g[start + t * st];
            }
            edt_line(&line[..len], spacing[axis], &mut out[..len], &mut v, &mut z);
            for t in 0..len {
                g[start + t * st] = out[t];
            }
        }
    }
    g
}

/// Linear-interpolated percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions. `None` if either mask is empty.
pub fn hd95(pred: &[u8], gt: &[u8], class: u8, dims: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let pm: Vec<bool> = pred.iter().map(|v| *v == class).collect();
    let gm: Vec<bool> = gt.iter().map(|v| *v == class).collect();
    let pb = boundary(&pm, dims);
    let gb = boundary(&gm, dims);
    if pb.is_empty() || gb.is_empty() {
        return None;
    }
    let to_g = squared_distance_to(&gb, dims, spacing);
    let to_p = squared_distance_to(&pb, dims, spacing);
    let mut d: Vec<f64> = pb
        .iter()
        .map(|&i| to_g[i].sqrt())
        .chain(gb.iter().map(|&i| to_p[i].sqrt()))
        .collect();
    Some(percentile(&mut d, 95.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hd95Mode {
    /// Per axial slice, averaged over slices where it is defined.
    #[default]
    Slice,
    Volume,
}

/// Metrics of one case over the foreground classes `1..C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case: VolumeId,
    pub iteration: usize,
    pub dsc: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    /// Slices (or volumes) where exactly one mask was empty.
    pub hd95_undefined: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

pub fn evaluate_case(pred: &LabelMap, gt: &LabelMap, iteration: usize, mode: Hd95Mode) -> Result<MetricReport> {
    if pred.grid.dims != gt.grid.dims {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.grid.dims, gt.grid.dims
        )));
    }
    let c = gt.num_classes;
    let [d, h, w] = gt.grid.dims;
    let spacing = gt.grid.spacing;
    let mut dscs = Vec::new();
    let mut hds = Vec::new();
    let mut undefined = 0;
    for class in 1..c {
        dscs.push(dsc(&pred.labels, &gt.labels, class));
        match mode {
            Hd95Mode::Volume => {
                let v = hd95(&pred.labels, &gt.labels, class, gt.grid.dims, spacing);
                let any = pred.labels.contains(&class) || gt.labels.contains(&class);
                if v.is_none() && any {
                    undefined += 1;
                }
                hds.push(v);
            }
            Hd95Mode::Slice => {
                let mut per = Vec::new();
                for z in 0..d {
                    let (ps, gs) = (pred.slice(z), gt.slice(z));
                    let (pa, ga) = (ps.contains(&class), gs.contains(&class));
                    if !pa && !ga {
                        continue;
                    }
                    match hd95(ps, gs, class, [1, h, w], spacing) {
                        Some(v) => per.push(Some(v)),
                        None => undefined += 1,
                    }
                }
                hds.push(mean_defined(&per));
            }
        }
    }
    Ok(MetricReport {
        case: gt.id,
        iteration,
        mean_dsc: dscs.iter().sum::<f64>() / dscs.len().max(1) as f64,
        mean_hd95: mean_defined(&hds),
        dsc: dscs,
        hd95: hds,
        hd95_undefined: undefined,
    })
}

/// Mean foreground DSC with each class pooled over all given slices.
pub fn pooled_mean_dsc(pred: &[u8], gt: &[u8], num_classes: u8) -> f64 {
    let fg: Vec<f64> = (1..num_classes).map(|c| dsc(pred, gt, c)).collect();
    fg.iter().sum::<f64>() / fg.len().max(1) as f64
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let classes = reports.first().map_or(0, |r| r.dsc.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = ["case", "iteration", "mean_dsc", "mean_hd95", "hd95_undefined"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=classes).map(|c| format!("dsc_{c}")));
    header.extend((1..=classes).map(|c| format!("hd95_{c}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let mut row = vec![
            r.case.0.to_string(),
            r.iteration.to_string(),
            r.mean_dsc.to_string(),
            opt(r.mean_hd95),
            r.hd95_undefined.to_string(),
        ];
        row.extend(r.dsc.iter().map(|v| v.to_string()));
        row.extend(r.hd95.iter().map(|v| opt(*v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Per-case `(mean_dsc, mean_hd95)` read back from a metrics file.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(f64, Option<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let dsc: f64 = field(2)
            .parse()
            .map_err(|_| Error::format(path, format!("bad mean_dsc {:?}", field(2))))?;
        let hd = match field(3) {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::format(path, format!("bad mean_hd95 {s:?}")))?,
            ),
        };
        out.push((dsc, hd));
    }
    Ok(out)
}

/// Pseudo-label quality of both models at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoPoint {
    pub iteration: usize,
    pub dsc_a: f64,
    pub dsc_b: f64,
}

/// Scores each model's argmax on a fixed subset of unlabeled training slices
/// against oracle labels.
#[derive(Debug, Clone)]
pub struct PseudoTracker {
    pub every: usize,
    pub slices: Vec<SliceRef>,
    images: Tensor<f32>,
    truth: Vec<u8>,
    num_classes: u8,
}

impl PseudoTracker {
    /// `n_slices` unlabeled slices drawn with `seed`, so runs sharing a
    /// cohort and seed are scored on the same slices.
    pub fn new(data: &TrainData, oracle: &Oracle, n_slices: usize, every: usize, seed: u64) -> Result<Self> {
        let n = n_slices.min(data.unlabeled.len()).max(1);
        let mut rng = seeding::rng(seed, &[0x9d5]);
        let mut idx = sample(&mut rng, data.unlabeled.len(), n).into_vec();
        idx.sort_unstable();
        let mut images = Vec::new();
        let mut truth = Vec::new();
        let mut slices = Vec::new();
        for i in idx {
            let s = &data.unlabeled[i];
            let labels = oracle.labels(s.slice.volume_id)?;
            images.extend_from_slice(&s.image);
            truth.extend_from_slice(labels.slice(s.slice.slice_index as usize));
            slices.push(s.slice);
        }
        Ok(PseudoTracker {
            every,
            slices,
            images: Tensor::new(vec![n, 1, data.size, data.size], images)?,
            truth,
            num_classes: data.num_classes as u8,
        })
    }

    /// True after `done` completed steps when a measurement is scheduled.
    pub fn due(&self, done: usize) -> bool {
        self.every > 0 && done > 0 && done % self.every == 0
    }

    pub fn measure(&self, a: &Model<f32>, b: &Model<f32>, iteration: usize) -> Result<PseudoPoint> {
        let score = |m: &Model<f32>| -> Result<f64> {
            let pred = argmax_labels(&m.predict(&self.images)?.prob);
            Ok(pooled_mean_dsc(&pred, &self.truth, self.num_classes))
        };
        Ok(PseudoPoint {
            iteration,
            dsc_a: score(a)?,
            dsc_b: score(b)?,
        })
    }
}

pub fn write_pseudo_csv(path: &Path, points: &[PseudoPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_csv(path: &Path) -> Result<Vec<PseudoPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|p| p.map_err(|e| csv_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_labeled: usize,
    pub flags: Flags,
    pub runs: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
}

/// One row per (labeled count, flag combination), averaged over the runs'
/// per-run case means; rows sorted by labeled count then flags.
pub fn ablation_table(run_dirs: &[PathBuf]) -> Result<Vec<AblationRow>> {
    if run_dirs.len() < 2 {
        return Err(Error::Usage("an ablation table needs at least two runs".into()));
    }
    type Key = (usize, [bool; 4]);
    let mut groups: BTreeMap<Key, (Flags, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for dir in run_dirs {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        let metrics = dir.join("metrics.csv");
        if !metrics.exists() {
            return Err(Error::Lookup(format!(
                "{} has no metrics.csv; run eval first",
                dir.display()
            )));
        }
        let rows = read_metrics_csv(&metrics)?;
        if rows.is_empty() {
            return Err(Error::format(&metrics, "no cases"));
        }
        let dsc = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
        let hds: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
        let key = (cfg.n_labeled, cfg.flags.key());
        let g = groups.entry(key).or_insert_with(|| (cfg.flags, Vec::new(), Vec::new()));
        g.1.push(dsc);
        if !hds.is_empty() {
            g.2.push(hds.iter().sum::<f64>() / hds.len() as f64);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((n_labeled, _), (flags, d, h))| AblationRow {
            n_labeled,
            flags,
            runs: d.len(),
            mean_dsc: d.iter().sum::<f64>() / d.len() as f64,
            mean_hd95: (!h.is_empty()).then(|| h.iter().sum::<f64>() / h.len() as f64),
        })
        .collect())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["n_labeled", "rsl", "brs", "scl", "reps", "runs", "mean_dsc", "mean_hd95"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let f = r.flags;
        w.write_record([
            r.n_labeled.to_string(),
            f.rsl.to_string(),
            f.brs.to_string(),
            f.scl.to_string(),
            f.reps.to_string(),
            r.runs.to_string(),
            r.mean_dsc.to_string(),
            r.mean_hd95.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot failed: {e}"))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

/// Line chart of named `(x, y)` series as SVG.
pub fn plot_lines(path: &Path, title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Bar chart with one bar per label as SVG.
pub fn plot_bars(path: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    let top = values.iter().copied().fold(0.0f64, f64::max).max(1e-6) * 1.1;
    let n = values.len().max(1);
    let root = SVGBackend::new(path, (560, 380)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(|e| plot_err(path, e))?;
    let names = labels.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&move |x| {
            let i = x.floor() as usize;
            names.get(i).cloned().unwrap_or_default()
        })
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, v)| {
            Rectangle::new(
                [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)],
                PALETTE[i % PALETTE.len()].filled(),
            )
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
