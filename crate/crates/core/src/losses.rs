//! Segmentation and contrastive training losses.
//!
//! Losses take softmax probabilities recorded on a tape and targets as plain
//! values, so pseudo-labels and contrastive keys can never carry gradient
//! back to the network that produced them.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::membank::FeatureBank;
use crate::spatreg::TransformTable;
use crate::volgrid::{Grid, SliceRef};
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const CE_FLOOR: f64 = 1e-12;
/// Keys shorter than this before normalization have no direction.
pub const KEY_EPS: f64 = 1e-6;

fn prob_dims<T: Real>(tape: &Tape<T>, prob: Var, labels: &[u8]) -> Result<[usize; 3]> {
    match tape.shape(prob) {
        [b, c, h, w] if labels.len() == b * h * w => Ok([*b, *c, h * w]),
        s => Err(Error::Shape(format!(
            "prob {s:?} against {} label values",
            labels.len()
        ))),
    }
}

fn check_labels(labels: &[u8], c: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= c) {
        Some(l) => Err(Error::Range {
            what: "label",
            value: *l as usize,
            limit: c,
        }),
        None => Ok(()),
    }
}

/// Per-image soft Dice loss `1 - mean_c (2 sum P Y + eps) / (sum P + sum Y + eps)`,
/// averaged over included images. `None` when nothing is included.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, prob: Var, labels: &[u8], include: &[bool]) -> Result<Option<Var>> {
    let [b, c, plane] = prob_dims(tape, prob, labels)?;
    check_labels(labels, c)?;
    if include.len() != b {
        return Err(Error::Shape(format!("{} include flags for batch {b}", include.len())));
    }
    let n_inc = include.iter().filter(|&&f| f).count();
    if n_inc == 0 {
        return Ok(None);
    }
    let eps = T::of(DICE_EPS);
    let two = T::of(2.0);
    let p = &tape.value(prob).data;
    let mut grad = vec![T::zero(); p.len()];
    let mut total = T::zero();
    let scale = T::one() / T::of((n_inc * c) as f64);
    for n in 0..b {
        if !include[n] {
            continue;
        }
        let lab = &labels[n * plane..(n + 1) * plane];
        let mut loss_n = T::one();
        for k in 0..c {
            let pk = &p[(n * c + k) * plane..(n * c + k + 1) * plane];
            let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
            for (pv, l) in pk.iter().zip(lab) {
                sp += *pv;
                if *l as usize == k {
                    inter += *pv;
                    sy += T::one();
                }
            }
            let num = two * inter + eps;
            let den = sp + sy + eps;
            loss_n -= num / den / T::of(c as f64);
            let g = &mut grad[(n * c + k) * plane..(n * c + k + 1) * plane];
            for (gv, l) in g.iter_mut().zip(lab) {
                let y = if *l as usize == k { T::one() } else { T::zero() };
                *gv = -(two * y / den - num / (den * den)) * scale;
            }
        }
        total += loss_n;
    }
    let value = total / T::of(n_inc as f64);
    tape.fused_scalar(prob, value, grad).map(Some)
}

/// Mean of `-log max(P[y], 1e-12)` over pixels of included images.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, prob: Var, labels: &[u8], include: &[bool]) -> Result<Option<Var>> {
    let [b, c, plane] = prob_dims(tape, prob, labels)?;
    check_labels(labels, c)?;
    if include.len() != b {
        return Err(Error::Shape(format!("{} include flags for batch {b}", include.len())));
    }
    let n_inc = include.iter().filter(|&&f| f).count();
    if n_inc == 0 {
        return Ok(None);
    }
    let floor = T::of(CE_FLOOR);
    let inv = T::one() / T::of((n_inc * plane) as f64);
    let p = &tape.value(prob).data;
    let mut grad = vec![T::zero(); p.len()];
    let mut total = T::zero();
    for n in 0..b {
        if !include[n] {
            continue;
        }
        for i in 0..plane {
            let idx = (n * c + labels[n * plane + i] as usize) * plane + i;
            let v = p[idx];
            if v > floor {
                total -= v.ln();
                grad[idx] = -inv / v;
            } else {
                total -= floor.ln();
            }
        }
    }
    tape.fused_scalar(prob, total * inv, grad).map(Some)
}

fn dice_plus_ce<T: Real>(tape: &mut Tape<T>, prob: Var, labels: &[u8], include: &[bool]) -> Result<Option<Var>> {
    let d = dice_loss(tape, prob, labels, include)?;
    let e = ce_loss(tape, prob, labels, include)?;
    match (d, e) {
        (Some(d), Some(e)) => tape.weighted_sum(&[(d, T::one()), (e, T::one())]).map(Some),
        _ => Ok(None),
    }
}

/// Dice + cross-entropy against ground truth on the included (labeled)
/// images; `labels` covers the whole batch.
pub fn sup_loss<T: Real>(tape: &mut Tape<T>, prob: Var, labels: &[u8], include: &[bool]) -> Result<Var> {
    dice_plus_ce(tape, prob, labels, include)?
        .ok_or_else(|| Error::Shape("supervised loss on an empty batch".into()))
}

/// Hard argmax labels over axis 1 of `[B, C, H, W]`; ties go to the lower class.
pub fn argmax_labels<T: Real>(prob: &Tensor<T>) -> Vec<u8> {
    let (b, c) = (prob.shape[0], prob.shape[1]);
    let plane: usize = prob.shape[2..].iter().product();
    let mut out = vec![0u8; b * plane];
    for n in 0..b {
        for i in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if prob.data[(n * c + k) * plane + i] > prob.data[(n * c + best) * plane + i] {
                    best = k;
                }
            }
            out[n * plane + i] = best as u8;
        }
    }
    out
}

/// Dice of this model's prediction against the other model's argmax on the
/// included images. The other model enters only as values, so no gradient
/// can reach it.
pub fn cps_loss<T: Real>(
    tape: &mut Tape<T>,
    prob_self: Var,
    prob_other: &Tensor<T>,
    include: &[bool],
) -> Result<Var> {
    if tape.shape(prob_self) != prob_other.shape.as_slice() {
        return Err(Error::Shape(format!(
            "cps between {:?} and {:?}",
            tape.shape(prob_self),
            prob_other.shape
        )));
    }
    let pseudo = argmax_labels(prob_other);
    dice_loss(tape, prob_self, &pseudo, include)?
        .ok_or_else(|| Error::Shape("cps loss on an empty batch".into()))
}

#[derive(Debug, Clone, Copy)]
pub struct RslLoss {
    pub loss: Option<Var>,
    /// Slices without a registered label, left out of the mean.
    pub excluded: usize,
}

/// Dice + cross-entropy against registered labels, one target per slice.
pub fn rsl_loss<T: Real>(tape: &mut Tape<T>, prob: Var, targets: &[Option<&[u8]>]) -> Result<RslLoss> {
    let s = tape.shape(prob).to_vec();
    if s.len() != 4 || targets.len() != s[0] {
        return Err(Error::Shape(format!("{} targets for prob {s:?}", targets.len())));
    }
    let plane = s[2] * s[3];
    let mut labels = vec![0u8; s[0] * plane];
    let mut include = vec![false; s[0]];
    for (n, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            if t.len() != plane {
                return Err(Error::Shape(format!("registered label of {} values", t.len())));
            }
            labels[n * plane..(n + 1) * plane].copy_from_slice(t);
            include[n] = true;
        }
    }
    let excluded = include.iter().filter(|&&f| !f).count();
    Ok(RslLoss {
        loss: dice_plus_ce(tape, prob, &labels, &include)?,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Anchors sampled per class (N).
    pub n_anchors: usize,
    /// Negatives per class (O).
    pub n_negatives: usize,
    /// Minimum class probability for a location to qualify (h).
    pub threshold: f64,
    /// Weight of the label-based positive.
    pub w_label: f64,
    /// Weight of the registration-based positive.
    pub w_reg: f64,
    /// Cap negatives drawn from each other class at `ceil(O / (present - 1))`.
    pub neg_cap: bool,
    /// Draw negatives from both models' feature batches.
    pub share_negatives: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            n_anchors: 1000,
            n_negatives: 500,
            threshold: 0.5,
            w_label: 0.5,
            w_reg: 0.5,
            neg_cap: true,
            share_negatives: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        if (self.w_label + self.w_reg - 1.0).abs() > 1e-9 || self.w_label < 0.0 || self.w_reg < 0.0 {
            return Err(Error::Config(format!(
                "positive weights {} + {} must be non-negative and sum to 1",
                self.w_label, self.w_reg
            )));
        }
        Ok(())
    }
}

/// Location on the feature grid of one slice in the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorEntry {
    /// Row in the flattened `[B * h * w, D]` feature matrix.
    pub row: usize,
    pub slice: SliceRef,
    /// `(y, x)` cell on the stride grid.
    pub cell: [usize; 2],
    pub prob: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub class: u8,
    pub entries: Vec<AnchorEntry>,
}

/// Per-cell class assignment and probabilities on the stride grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    pub side: usize,
    pub num_classes: usize,
    /// One label per row.
    pub labels: Vec<u8>,
    /// `[rows, C]` class probabilities pooled over each cell.
    pub probs: Vec<f32>,
}

/// Averages `[B, C, H, W]` probabilities over `stride x stride` cells.
pub fn pool_cells<T: Real>(prob: &Tensor<T>, stride: usize) -> Vec<f32> {
    let (b, c, h, w) = (prob.shape[0], prob.shape[1], prob.shape[2], prob.shape[3]);
    let (fh, fw) = (h / stride, w / stride);
    let inv = 1.0 / (stride * stride) as f64;
    let mut out = vec![0f32; b * fh * fw * c];
    for n in 0..b {
        for k in 0..c {
            let plane = &prob.data[(n * c + k) * h * w..(n * c + k + 1) * h * w];
            for cy in 0..fh {
                for cx in 0..fw {
                    let mut s = 0.0f64;
                    for dy in 0..stride {
                        for dx in 0..stride {
                            s += plane[(cy * stride + dy) * w + cx * stride + dx].f64();
                        }
                    }
                    out[((n * fh + cy) * fw + cx) * c + k] = (s * inv) as f32;
                }
            }
        }
    }
    out
}

impl CellTargets {
    /// Per batch item, `truth[n] = Some(labels)` takes the pixel at each
    /// cell center as the cell label; `None` takes the argmax of the pooled
    /// prediction (pseudo-label).
    pub fn new<T: Real>(prob: &Tensor<T>, truth: &[Option<&[u8]>], stride: usize) -> Self {
        let (c, h, w) = (prob.shape[1], prob.shape[2], prob.shape[3]);
        let side = h / stride;
        let probs = pool_cells(prob, stride);
        let mut labels = Vec::with_capacity(probs.len() / c);
        for (n, t) in truth.iter().enumerate() {
            for cy in 0..side {
                for cx in 0..w / stride {
                    let row = (n * side + cy) * (w / stride) + cx;
                    labels.push(match t {
                        Some(l) => l[(cy * stride + stride / 2) * w + cx * stride + stride / 2],
                        None => {
                            let p = &probs[row * c..(row + 1) * c];
                            (1..c).fold(0, |best, k| if p[k] > p[best] { k } else { best }) as u8
                        }
                    });
                }
            }
        }
        CellTargets {
            side,
            num_classes: c,
            labels,
            probs,
        }
    }

}

/// Rows whose assigned class has probability above `threshold`, per class.
pub fn qualifying_rows(targets: &CellTargets, threshold: f64) -> BTreeMap<u8, Vec<usize>> {
    let c = targets.num_classes;
    let mut out: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (row, &l) in targets.labels.iter().enumerate() {
        if targets.probs[row * c + l as usize] as f64 > threshold {
            out.entry(l).or_default().push(row);
        }
    }
    out
}

/// Up to `n_anchors` uniformly sampled qualifying locations per class.
/// `slices[n]` is the source of batch item `n`.
pub fn select_anchors(
    targets: &CellTargets,
    slices: &[SliceRef],
    cfg: &ContrastConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<AnchorSet> {
    let per_slice = targets.side * targets.side;
    let c = targets.num_classes;
    qualifying_rows(targets, cfg.threshold)
        .into_iter()
        .map(|(class, rows)| {
            let picked: Vec<usize> = if rows.len() > cfg.n_anchors {
                let mut idx = sample(rng, rows.len(), cfg.n_anchors).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| rows[i]).collect()
            } else {
                rows
            };
            let entries = picked
                .into_iter()
                .map(|row| {
                    let within = row % per_slice;
                    AnchorEntry {
                        row,
                        slice: slices[row / per_slice],
                        cell: [within / targets.side, within % targets.side],
                        prob: targets.probs[row * c + class as usize],
                    }
                })
                .collect();
            AnchorSet { class, entries }
        })
        .collect()
}

fn normalized<T: Real>(mut v: Vec<T>) -> Option<Vec<T>> {
    let n = v.iter().fold(T::zero(), |a, b| a + *b * *b).sqrt();
    if n.f64() < KEY_EPS {
        return None;
    }
    v.iter_mut().for_each(|x| *x = *x / n);
    Some(v)
}

/// Re-normalized mean of the set's features. `None` for an empty set or when
/// the mean has no direction.
pub fn label_positive_key<T: Real>(features: &[T], dim: usize, set: &AnchorSet) -> Option<Vec<T>> {
    if set.entries.is_empty() {
        return None;
    }
    let mut acc = vec![T::zero(); dim];
    for e in &set.entries {
        for (a, f) in acc.iter_mut().zip(&features[e.row * dim..(e.row + 1) * dim]) {
            *a += *f;
        }
    }
    normalized(acc)
}

/// Physical coordinate of a feature cell center on its slice.
pub fn anchor_point(entry: &AnchorEntry, grid: &Grid, stride: usize) -> [f64; 3] {
    let off = (stride as f64 - 1.0) / 2.0;
    grid.to_physical([
        entry.slice.slice_index as f64,
        (entry.cell[0] * stride) as f64 + off,
        (entry.cell[1] * stride) as f64 + off,
    ])
}

/// Average over other volumes of the bank feature at the registered
/// correspondent of `entry`. `None` if no volume has it.
pub fn reg_positive_key(
    entry: &AnchorEntry,
    grid: &Grid,
    stride: usize,
    table: &TransformTable,
    bank: &FeatureBank,
) -> Option<Vec<f32>> {
    let p = anchor_point(entry, grid, stride);
    let q = entry.slice.volume_id;
    let off = (stride as f64 - 1.0) / 2.0;
    let [_, h, w] = grid.dims;
    let mut acc: Vec<f32> = Vec::new();
    let mut sample_buf: Vec<f32> = Vec::new();
    let mut found = 0usize;
    for j in bank.volumes() {
        if j == q {
            continue;
        }
        let Ok(t) = table.get(q, j) else { continue };
        let v = grid.to_voxel(t.apply_point(p));
        if v[1] < -0.5 || v[1] > h as f64 - 0.5 || v[2] < -0.5 || v[2] > w as f64 - 0.5 {
            continue;
        }
        let Some((_, map)) = bank.lookup(j, v[0]) else { continue };
        if acc.is_empty() {
            acc = vec![0.0; map.dim];
            sample_buf = vec![0.0; map.dim];
        }
        map.sample_bilinear((v[1] - off) / stride as f64, (v[2] - off) / stride as f64, &mut sample_buf);
        for (a, s) in acc.iter_mut().zip(&sample_buf) {
            *a += *s;
        }
        found += 1;
    }
    if found == 0 {
        return None;
    }
    normalized(acc)
}

/// `w1 * label + w2 * reg`, re-normalized; the label key alone when the
/// registration key is absent or the mix has no direction.
pub fn combine_positive<T: Real>(label: &[T], reg: Option<&[T]>, w1: f64, w2: f64) -> Vec<T> {
    let Some(reg) = reg else { return label.to_vec() };
    let mix: Vec<T> = label
        .iter()
        .zip(reg)
        .map(|(l, r)| T::of(w1) * *l + T::of(w2) * *r)
        .collect();
    normalized(mix).unwrap_or_else(|| label.to_vec())
}

/// Detached features of qualifying locations, grouped by class.
#[derive(Debug, Clone, Default)]
pub struct NegativePool<T> {
    pub dim: usize,
    pub by_class: BTreeMap<u8, Vec<T>>,
}

impl<T: Real> NegativePool<T> {
    pub fn new(dim: usize) -> Self {
        NegativePool {
            dim,
            by_class: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, features: &[T], qualifying: &BTreeMap<u8, Vec<usize>>) {
        for (class, rows) in qualifying {
            let dst = self.by_class.entry(*class).or_default();
            for r in rows {
                dst.extend_from_slice(&features[r * self.dim..(r + 1) * self.dim]);
            }
        }
    }

    fn count(&self, class: u8) -> usize {
        self.by_class.get(&class).map_or(0, |v| v.len() / self.dim)
    }

    /// Up to `O` keys from classes other than `class`, flattened `[K, D]`.
    pub fn sample_for(&self, class: u8, cfg: &ContrastConfig, rng: &mut ChaCha8Rng) -> Vec<T> {
        let present = self.by_class.keys().filter(|k| self.count(**k) > 0).count();
        let others: Vec<u8> = self
            .by_class
            .keys()
            .copied()
            .filter(|k| *k != class && self.count(*k) > 0)
            .collect();
        if others.is_empty() || cfg.n_negatives == 0 {
            return Vec::new();
        }
        let denom = if present > others.len() { present - 1 } else { present }.max(1);
        let cap = if cfg.neg_cap {
            cfg.n_negatives.div_ceil(denom)
        } else {
            cfg.n_negatives
        };
        let d = self.dim;
        let mut picked: Vec<&[T]> = Vec::new();
        for k in others {
            let keys = &self.by_class[&k];
            let n = keys.len() / d;
            let take = cap.min(n);
            let mut idx = sample(rng, n, take).into_vec();
            idx.sort_unstable();
            picked.extend(idx.into_iter().map(|i| &keys[i * d..(i + 1) * d]));
        }
        if picked.len() > cfg.n_negatives {
            let mut idx = sample(rng, picked.len(), cfg.n_negatives).into_vec();
            idx.sort_unstable();
            picked = idx.into_iter().map(|i| picked[i]).collect();
        }
        picked.concat()
    }
}

/// One class's contribution to the contrastive loss.
#[derive(Debug, Clone)]
pub struct ClassTerm<T> {
    pub class: u8,
    /// Anchor rows in the feature matrix.
    pub anchors: Vec<usize>,
    /// One positive key per anchor, `[n, D]`.
    pub positives: Vec<T>,
    /// Shared negative keys, `[K, D]`.
    pub negatives: Vec<T>,
}

/// `-log softmax` of the positive among `{positive} + negatives`, with
/// dot products scaled by `1 / tau`. Returns the loss and its gradient with
/// respect to the anchor.
pub fn anchor_term<T: Real>(anchor: &[T], positive: &[T], negatives: &[T], tau: f64) -> (T, Vec<T>) {
    let d = anchor.len();
    let inv_tau = T::of(1.0 / tau);
    let dot = |k: &[T]| anchor.iter().zip(k).fold(T::zero(), |a, (x, y)| a + *x * *y) * inv_tau;
    let sp = dot(positive);
    let sk: Vec<T> = negatives.chunks(d).map(dot).collect();
    let m = sk.iter().fold(sp, |a, b| a.max(*b));
    let mut z = (sp - m).exp();
    for s in &sk {
        z += (*s - m).exp();
    }
    let lse = m + z.ln();
    let mut grad: Vec<T> = positive.iter().map(|p| ((sp - lse).exp() - T::one()) * *p).collect();
    for (s, k) in sk.iter().zip(negatives.chunks(d)) {
        let pk = (*s - lse).exp();
        for (g, kv) in grad.iter_mut().zip(k) {
            *g += pk * *kv;
        }
    }
    grad.iter_mut().for_each(|g| *g = *g * inv_tau);
    (lse - sp, grad)
}

/// Mean over classes, then anchors, of [`anchor_term`]. Classes without
/// anchors or negatives are skipped; `None` if none remain.
pub fn contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    terms: &[ClassTerm<T>],
    tau: f64,
) -> Result<Option<Var>> {
    let d = *tape.shape(features).last().unwrap_or(&0);
    let live: Vec<&ClassTerm<T>> = terms
        .iter()
        .filter(|t| !t.anchors.is_empty() && !t.negatives.is_empty())
        .collect();
    if live.is_empty() || d == 0 {
        return Ok(None);
    }
    let f = &tape.value(features).data;
    let mut grad = vec![T::zero(); f.len()];
    let mut total = T::zero();
    let class_w = T::one() / T::of(live.len() as f64);
    for t in &live {
        if t.positives.len() != t.anchors.len() * d || t.negatives.len() % d != 0 {
            return Err(Error::Shape(format!(
                "class {} has {} anchors, {} positive and {} negative values",
                t.class,
                t.anchors.len(),
                t.positives.len(),
                t.negatives.len()
            )));
        }
        let w = class_w / T::of(t.anchors.len() as f64);
        for (i, &row) in t.anchors.iter().enumerate() {
            let a = &f[row * d..(row + 1) * d];
            let (l, g) = anchor_term(a, &t.positives[i * d..(i + 1) * d], &t.negatives, tau);
            total += l * w;
            for (dst, gv) in grad[row * d..(row + 1) * d].iter_mut().zip(g) {
                *dst += gv * w;
            }
        }
    }
    tape.fused_scalar(features, total, grad).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_gradient;
    use crate::membank::FeatureMap;
    use crate::spatreg::{AffineTransform, SpatialTransform};
    use crate::volgrid::VolumeId;
    use rand::{Rng, SeedableRng};

    fn softmax_prob(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tape::new();
        let x = t.constant(Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        });
        let p = t.softmax_channels(x).unwrap();
        t.value(p).clone()
    }

    fn onehot_prob(labels: &[u8], c: usize) -> Tensor<f64> {
        let plane = labels.len();
        let mut data = vec![0.0; c * plane];
        for (i, l) in labels.iter().enumerate() {
            data[*l as usize * plane + i] = 1.0;
        }
        Tensor {
            shape: vec![1, c, 1, plane],
            data,
        }
    }

    fn eval<F>(p: &Tensor<f64>, f: F) -> f64
    where
        F: Fn(&mut Tape<f64>, Var) -> Option<Var>,
    {
        let mut t = Tape::new();
        let v = t.param(p.clone());
        let l = f(&mut t, v).unwrap();
        t.value(l).item()
    }

    #[test]
    fn dice_perfect_and_uniform() {
        let labels = [0u8, 1, 1, 0];
        let p = onehot_prob(&labels, 2);
        assert!(eval(&p, |t, v| dice_loss(t, v, &labels, &[true]).unwrap()) <= 1e-4);
        // Uniform 1/2 on a balanced 2x2 grid: per class (2*1 + eps)/(2 + 2 + eps).
        let u = Tensor::full(&[1, 2, 2, 2], 0.5);
        let per_class = (2.0 * 1.0 + DICE_EPS) / (2.0 + 2.0 + DICE_EPS);
        let got = eval(&u, |t, v| dice_loss(t, v, &labels, &[true]).unwrap());
        assert!((got - (1.0 - per_class)).abs() < 1e-12);
    }

    #[test]
    fn dice_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = softmax_prob([1, 3, 1, 6], &mut rng);
        let labels: Vec<u8> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pp = p.clone();
        for k in 0..3 {
            for (i, &s) in perm.iter().enumerate() {
                pp.data[k * 6 + i] = p.data[k * 6 + s];
            }
        }
        let lp: Vec<u8> = perm.iter().map(|&s| labels[s]).collect();
        let a = eval(&p, |t, v| dice_loss(t, v, &labels, &[true]).unwrap());
        let b = eval(&pp, |t, v| dice_loss(t, v, &lp, &[true]).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ce_closed_forms() {
        let labels = [0u8, 1, 2, 3];
        let p = onehot_prob(&labels, 4);
        assert_eq!(eval(&p, |t, v| ce_loss(t, v, &labels, &[true]).unwrap()), 0.0);
        let u = Tensor::full(&[1, 4, 2, 2], 0.25);
        let got = eval(&u, |t, v| ce_loss(t, v, &labels, &[true]).unwrap());
        assert!((got - 4f64.ln()).abs() < 1e-12);
        // Clamped at P = 1e-12.
        let wrong = onehot_prob(&[1, 0, 3, 2], 4);
        let got = eval(&wrong, |t, v| ce_loss(t, v, &labels, &[true]).unwrap());
        assert!((got + CE_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_matches_hand_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = softmax_prob([2, 3, 2, 3], &mut rng);
        let labels: Vec<u8> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let mut s = 0.0;
        for n in 0..2 {
            for i in 0..6 {
                s -= p.data[(n * 3 + labels[n * 6 + i] as usize) * 6 + i].ln();
            }
        }
        let got = eval(&p, |t, v| ce_loss(t, v, &labels, &[true, true]).unwrap());
        assert!((got - s / 12.0).abs() < 1e-12);
    }

    #[test]
    fn label_range_checked() {
        let mut t = Tape::<f64>::new();
        let p = t.param(Tensor::full(&[1, 2, 1, 2], 0.5));
        assert!(dice_loss(&mut t, p, &[0, 2], &[true]).is_err());
        assert!(ce_loss(&mut t, p, &[0], &[true]).is_err());
    }

    #[test]
    fn rsl_excludes_missing_and_is_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = softmax_prob([3, 2, 2, 2], &mut rng);
        let r0 = [0u8, 1, 1, 0];
        let r2 = [1u8, 1, 0, 0];
        let mut t = Tape::new();
        let v = t.param(p.clone());
        let out = rsl_loss(&mut t, v, &[Some(&r0), None, Some(&r2)]).unwrap();
        assert_eq!(out.excluded, 1);
        let full = t.value(out.loss.unwrap()).item();
        // Changing the excluded slice leaves the loss unchanged.
        let mut p2 = p.clone();
        for k in 0..2 {
            for i in 0..4 {
                p2.data[(2 + k) * 4 + i] = if k == 0 { 0.9 } else { 0.1 };
            }
        }
        let mut t2 = Tape::new();
        let v2 = t2.param(p2);
        let out2 = rsl_loss(&mut t2, v2, &[Some(&r0), None, Some(&r2)]).unwrap();
        assert!((t2.value(out2.loss.unwrap()).item() - full).abs() < 1e-15);
        let mut t3 = Tape::new();
        let v3 = t3.param(p);
        assert!(rsl_loss(&mut t3, v3, &[None, None, None]).unwrap().loss.is_none());
    }

    #[test]
    fn rsl_background_target_uniform_prob() {
        let u = Tensor::full(&[1, 2, 2, 2], 0.5);
        let r = [0u8; 4];
        let mut t = Tape::new();
        let v = t.param(u);
        let l = rsl_loss(&mut t, v, &[Some(&r)]).unwrap().loss.unwrap();
        // Dice: class 0 (2*2 + eps)/(2 + 4 + eps); class 1 eps/(2 + eps).
        let d0 = (4.0 + DICE_EPS) / (6.0 + DICE_EPS);
        let d1 = DICE_EPS / (2.0 + DICE_EPS);
        let want = 1.0 - (d0 + d1) / 2.0 + 2f64.ln();
        assert!((t.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn dice_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = softmax_prob([2, 3, 4, 4], &mut rng);
        let labels: Vec<u8> = (0..32).map(|_| rng.random_range(0..3)).collect();
        let r = check_gradient(&[p], 1e-6, usize::MAX, 0, |t, v| {
            sup_loss(t, v[0], &labels, &[true, true]).unwrap()
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn cps_is_dice_on_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = softmax_prob([1, 3, 2, 2], &mut rng);
        let q = softmax_prob([1, 3, 2, 2], &mut rng);
        let labels = argmax_labels(&q);
        let a = eval(&p, |t, v| Some(cps_loss(t, v, &q, &[true]).unwrap()));
        let b = eval(&p, |t, v| dice_loss(t, v, &labels, &[true]).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn contrastive_closed_form() {
        let anchor = [1.0f64, 0.0];
        let (l, _) = anchor_term(&anchor, &[1.0, 0.0], &[0.0, 1.0], 0.1);
        assert!((l - (1.0 + (-10f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_negative_order_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let unit = |rng: &mut ChaCha8Rng| normalized((0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let a = unit(&mut rng);
        let p = unit(&mut rng);
        let negs: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng)).collect();
        let flat = negs.concat();
        let mut rev = negs.clone();
        rev.reverse();
        let (l1, _) = anchor_term(&a, &p, &flat, 0.1);
        let (l2, _) = anchor_term(&a, &p, &rev.concat(), 0.1);
        assert!((l1 - l2).abs() < 1e-12);
        // Closer positive gives lower loss.
        let (lo, _) = anchor_term(&a, &a, &flat, 0.1);
        assert!(lo < l1);
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats = Tensor {
            shape: vec![1, 2, 2, 6],
            data: (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let keys = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).flat_map(|_| normalized((0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()).collect()
        };
        let terms = vec![
            ClassTerm {
                class: 0,
                anchors: vec![0, 3],
                positives: keys(2, &mut rng),
                negatives: keys(4, &mut rng),
            },
            ClassTerm {
                class: 1,
                anchors: vec![1],
                positives: keys(1, &mut rng),
                negatives: keys(3, &mut rng),
            },
        ];
        let r = check_gradient(&[feats], 1e-6, usize::MAX, 0, |t, v| {
            let u = t.l2_normalize(v[0]);
            contrastive_loss(t, u, &terms, 0.1).unwrap().unwrap()
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn targets(labels: Vec<u8>, probs: Vec<f32>) -> CellTargets {
        CellTargets {
            side: 1,
            num_classes: 2,
            labels,
            probs,
        }
    }

    #[test]
    fn anchor_threshold_and_clamp() {
        let slices: Vec<SliceRef> = (0..3)
            .map(|i| SliceRef {
                volume_id: VolumeId(0),
                slice_index: i,
            })
            .collect();
        let t = targets(vec![1, 1, 0], vec![0.4, 0.6, 0.3, 0.7, 0.6, 0.4]);
        let cfg = ContrastConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sets = select_anchors(&t, &slices, &cfg, &mut rng);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].class, 0);
        assert_eq!(sets[0].entries[0].row, 2);
        assert_eq!(sets[1].entries.len(), 2);
        let none = targets(vec![1, 0], vec![0.6, 0.4, 0.4, 0.6]);
        assert!(select_anchors(&none, &slices, &cfg, &mut rng).is_empty());
        let small = ContrastConfig {
            n_anchors: 1,
            ..cfg
        };
        let sets = select_anchors(&t, &slices, &small, &mut rng);
        assert_eq!(sets[1].entries.len(), 1);
    }

    fn set(rows: &[usize]) -> AnchorSet {
        AnchorSet {
            class: 0,
            entries: rows
                .iter()
                .map(|&row| AnchorEntry {
                    row,
                    slice: SliceRef {
                        volume_id: VolumeId(0),
                        slice_index: 0,
                    },
                    cell: [0, 0],
                    prob: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn label_key_rules() {
        let f = [0.6f64, 0.8, -0.6, -0.8, 1.0, 0.0];
        assert_eq!(label_positive_key(&f, 2, &set(&[0])).unwrap(), vec![0.6, 0.8]);
        assert!(label_positive_key(&f, 2, &set(&[0, 1])).is_none());
        let k = label_positive_key(&f, 2, &set(&[0, 2])).unwrap();
        let n = (1.6f64 * 1.6 + 0.8 * 0.8).sqrt();
        assert!((k[0] - 1.6 / n).abs() < 1e-12 && (k[1] - 0.8 / n).abs() < 1e-12);
        assert!(label_positive_key(&f, 2, &set(&[])).is_none());
    }

    #[test]
    fn combine_rules() {
        let l = [1.0f64, 0.0];
        assert_eq!(combine_positive(&l, None, 0.5, 0.5), l.to_vec());
        assert_eq!(combine_positive(&l, Some(&[0.0, 1.0]), 1.0, 0.0), l.to_vec());
        assert_eq!(combine_positive(&l, Some(&l), 0.5, 0.5), l.to_vec());
        let c = combine_positive(&l, Some(&[0.0, 1.0]), 0.5, 0.5);
        let s = 0.5f64.sqrt();
        assert!((c[0] - s).abs() < 1e-12 && (c[1] - s).abs() < 1e-12);
    }

    #[test]
    fn negative_cap_per_class() {
        let mut pool = NegativePool::<f64>::new(1);
        let mut q = BTreeMap::new();
        q.insert(0u8, (0..10).collect::<Vec<usize>>());
        q.insert(1u8, (10..20).collect());
        q.insert(2u8, (20..23).collect());
        let f: Vec<f64> = (0..23).map(|i| i as f64).collect();
        pool.add(&f, &q);
        let cfg = ContrastConfig {
            n_negatives: 8,
            ..ContrastConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let negs = pool.sample_for(0, &cfg, &mut rng);
        // cap = ceil(8 / 2) = 4 from class 1, all 3 of class 2.
        assert_eq!(negs.len(), 7);
        assert_eq!(negs.iter().filter(|v| **v >= 20.0).count(), 3);
        assert!(negs.iter().all(|v| *v >= 10.0));
    }

    #[test]
    fn reg_key_absent_on_empty_bank() {
        let grid = Grid::isotropic(8);
        let table = TransformTable::new(0);
        let bank = FeatureBank::new(4, false);
        let e = set(&[0]).entries[0];
        assert!(reg_positive_key(&e, &grid, 4, &table, &bank).is_none());
    }

    #[test]
    fn reg_key_follows_transform() {
        // Volume 1 is volume 0 shifted by one feature cell in y.
        let grid = Grid::isotropic(8);
        let mut table = TransformTable::new(0);
        let shift = AffineTransform::translation([0.0, 4.0, 0.0]);
        table
            .insert(VolumeId(0), VolumeId(1), SpatialTransform::Affine(shift))
            .unwrap();
        let mut bank = FeatureBank::new(8, false);
        let cellfeat = |y: usize, x: usize| -> Vec<f32> {
            normalized(vec![1.0 + y as f32, x as f32 - 0.5, 0.3]).unwrap()
        };
        for z in 2..4 {
            let data: Vec<f32> = (0..2).flat_map(|y| (0..2).flat_map(move |x| cellfeat(y, x))).collect();
            bank.upsert(
                SliceRef {
                    volume_id: VolumeId(1),
                    slice_index: z,
                },
                FeatureMap::new(2, 2, 3, data).unwrap(),
            );
        }
        let anchor = AnchorEntry {
            row: 0,
            slice: SliceRef {
                volume_id: VolumeId(0),
                slice_index: 3,
            },
            cell: [0, 1],
            prob: 1.0,
        };
        let k = reg_positive_key(&anchor, &grid, 4, &table, &bank).unwrap();
        let want = cellfeat(1, 1);
        for (a, b) in k.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
