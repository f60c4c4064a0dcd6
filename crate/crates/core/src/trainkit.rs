//! Dual-model training: batch composition, loss weighting, optimization and
//! inference by logit averaging.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::losses::{
    self, cps_loss, rsl_loss, sup_loss, CellTargets, ClassTerm, ContrastConfig, NegativePool,
};
use crate::membank::{default_capacity, FeatureBank, FeatureMap};
use crate::regsup::RegisteredLabelSet;
use crate::segnets::{self, Arch, Bound, ForwardVars, Model, ModelSpec};
use crate::spatreg::TransformTable;
use crate::volgrid::{Dataset, Grid, LabelMap, SliceRef, Volume, VolumeId};
use crate::{seeding, Error, Result};

pub const STREAM_BATCH: u64 = 0xba7c;
pub const STREAM_CONTRAST: u64 = 0xc0a7;
pub const STREAM_INIT: u64 = 0x1417;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    /// Registration supervision loss on unlabeled slices.
    pub rsl: bool,
    /// Pick the registration source by cycle consistency.
    pub brs: bool,
    /// Supervised contrastive loss.
    pub scl: bool,
    /// Registration-enhanced positives.
    pub reps: bool,
}

impl Flags {
    pub fn full() -> Self {
        Flags {
            rsl: true,
            brs: true,
            scl: true,
            reps: true,
        }
    }

    pub fn key(&self) -> [bool; 4] {
        [self.rsl, self.brs, self.scl, self.reps]
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps && !self.scl {
            return Err(Error::Config("reps needs scl".into()));
        }
        if self.brs && !self.rsl {
            return Err(Error::Config("brs needs rsl".into()));
        }
        Ok(())
    }

    /// `baseline`, or the enabled switches joined by `+`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.rsl, "rsl"),
            (self.brs, "brs"),
            (self.scl, "scl"),
            (self.reps, "reps"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "baseline".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub t_total: usize,
    /// Even; half labeled, half unlabeled.
    pub batch_size: usize,
    pub arch_a: Arch,
    pub arch_b: Arch,
    /// Overrides the architecture's default stage widths.
    pub channels_a: Option<Vec<usize>>,
    pub channels_b: Option<Vec<usize>>,
    pub lr_a: f64,
    pub lr_b: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Cross pseudo supervision; off forces `w_cps = 0`.
    pub cps: bool,
    pub w_cl: f64,
    pub w_rs: f64,
    pub flags: Flags,
    pub seed: u64,
    /// Labeled volumes in the cohort; recorded for reports.
    pub n_labeled: usize,
    /// Defaults to a fifth of the training slices.
    pub bank_capacity: Option<usize>,
    pub fifo_strict: bool,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Steps between pseudo-label quality measurements; 0 disables them.
    pub pseudo_every: usize,
    pub pseudo_slices: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_total: 2000,
            batch_size: 8,
            arch_a: Arch::Convnet,
            arch_b: Arch::Mixer,
            channels_a: None,
            channels_b: None,
            lr_a: 5e-4,
            lr_b: 1e-4,
            weight_decay: 5e-4,
            poly_power: 0.9,
            cps: true,
            w_cl: 1e-3,
            w_rs: 1.0,
            flags: Flags::default(),
            seed: 0,
            n_labeled: 1,
            bank_capacity: None,
            fifo_strict: false,
            checkpoint_every: 0,
            pseudo_every: 0,
            pseudo_slices: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size {} must be even and > 0", self.batch_size)));
        }
        if self.t_total == 0 {
            return Err(Error::Config("t_total must be positive".into()));
        }
        for (name, v) in [("lr_a", self.lr_a), ("lr_b", self.lr_b)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        if self.weight_decay < 0.0 || self.w_cl < 0.0 || self.w_rs < 0.0 {
            return Err(Error::Config("weights must be non-negative".into()));
        }
        Ok(())
    }

    fn spec(arch: Arch, channels: &Option<Vec<usize>>, num_classes: usize, size: usize) -> ModelSpec {
        let mut spec = match arch {
            Arch::Convnet => ModelSpec::convnet(num_classes, size),
            Arch::Mixer => ModelSpec::mixer(num_classes, size),
        };
        if let Some(c) = channels {
            spec.channels = c.clone();
        }
        spec
    }

    pub fn spec_a(&self, num_classes: usize, size: usize) -> ModelSpec {
        Self::spec(self.arch_a, &self.channels_a, num_classes, size)
    }

    pub fn spec_b(&self, num_classes: usize, size: usize) -> ModelSpec {
        Self::spec(self.arch_b, &self.channels_b, num_classes, size)
    }
}

/// Gaussian warm-up `0.1 exp(-5 (1 - i / t)^2)`.
pub fn w_cps_schedule(i: usize, t_total: usize) -> f64 {
    let r = 1.0 - (i as f64 / t_total as f64).min(1.0);
    0.1 * (-5.0 * r * r).exp()
}

pub fn poly_lr(base: f64, i: usize, t_total: usize, power: f64) -> f64 {
    base * (1.0 - (i as f64 / t_total as f64).min(1.0)).powf(power)
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x = *x * decay - step * *mi / (vi.sqrt() / c2s + eps);
            }
        }
    }
}

/// One training slice with its available targets.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub slice: SliceRef,
    pub image: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    /// Registered label, unlabeled slices only.
    pub rsl: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub size: usize,
    pub num_classes: usize,
    pub labeled: Vec<SliceSample>,
    pub unlabeled: Vec<SliceSample>,
    pub grids: BTreeMap<VolumeId, Grid>,
}

impl TrainData {
    /// Slices of every training volume; `rsl` attaches registered labels to
    /// unlabeled slices.
    pub fn new(dataset: &Dataset, rsl: Option<&[RegisteredLabelSet]>) -> Result<Self> {
        let first = dataset
            .labeled_ids
            .first()
            .ok_or_else(|| Error::Config("no labeled volumes".into()))?;
        if dataset.unlabeled_ids.is_empty() {
            return Err(Error::Config("no unlabeled volumes".into()));
        }
        let grid0 = dataset.volume(*first)?.grid;
        let [_, h, w] = grid0.dims;
        if h != w {
            return Err(Error::Config(format!("slices must be square, got {h}x{w}")));
        }
        let num_classes = dataset.labels(*first)?.num_classes as usize;
        let mut grids = BTreeMap::new();
        let slices = |id: VolumeId, grids: &mut BTreeMap<VolumeId, Grid>| -> Result<Vec<(SliceRef, Vec<f32>)>> {
            let v = dataset.volume(id)?;
            if v.grid.dims[1..] != grid0.dims[1..] {
                return Err(Error::Config(format!("volume {id} has a different slice size")));
            }
            grids.insert(id, v.grid);
            Ok((0..v.grid.dims[0])
                .map(|z| {
                    (
                        SliceRef {
                            volume_id: id,
                            slice_index: z as u32,
                        },
                        v.slice(z).to_vec(),
                    )
                })
                .collect())
        };
        let mut labeled = Vec::new();
        for &id in &dataset.labeled_ids {
            let lm = dataset.labels(id)?;
            for (s, image) in slices(id, &mut grids)? {
                labeled.push(SliceSample {
                    slice: s,
                    image,
                    labels: Some(lm.slice(s.slice_index as usize).to_vec()),
                    rsl: None,
                });
            }
        }
        let mut unlabeled = Vec::new();
        for &id in &dataset.unlabeled_ids {
            let set = match rsl {
                Some(sets) => Some(sets.iter().find(|s| s.target == id).ok_or_else(|| {
                    Error::Lookup(format!("no registered labels for unlabeled volume {id}"))
                })?),
                None => None,
            };
            for (s, image) in slices(id, &mut grids)? {
                unlabeled.push(SliceSample {
                    slice: s,
                    image,
                    labels: None,
                    rsl: set.map(|set| set.slice(s).map(|l| l.to_vec())).transpose()?,
                });
            }
        }
        Ok(TrainData {
            size: h,
            num_classes,
            labeled,
            unlabeled,
            grids,
        })
    }

    pub fn total_slices(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn has_rsl(&self) -> bool {
        self.unlabeled.iter().all(|s| s.rsl.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub slices: Vec<SliceRef>,
    /// `[B, 1, S, S]`.
    pub images: Tensor<f32>,
    /// Ground truth, zeros on unlabeled items.
    pub labels: Vec<u8>,
    pub labeled: Vec<bool>,
    pub rsl: Vec<Option<Vec<u8>>>,
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= k {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Half labeled, half unlabeled; draws with replacement from a pool smaller
/// than half the batch.
pub fn compose_batch(data: &TrainData, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if batch_size % 2 != 0 || batch_size == 0 {
        return Err(Error::Config(format!("batch size {batch_size} must be even")));
    }
    if data.labeled.is_empty() || data.unlabeled.is_empty() {
        return Err(Error::Config("both slice pools must be non-empty".into()));
    }
    let half = batch_size / 2;
    let li = pick(data.labeled.len(), half, rng);
    let ui = pick(data.unlabeled.len(), half, rng);
    let items: Vec<&SliceSample> = li
        .iter()
        .map(|&i| &data.labeled[i])
        .chain(ui.iter().map(|&i| &data.unlabeled[i]))
        .collect();
    let plane = data.size * data.size;
    let mut images = Vec::with_capacity(batch_size * plane);
    let mut labels = Vec::with_capacity(batch_size * plane);
    for it in &items {
        images.extend_from_slice(&it.image);
        match &it.labels {
            Some(l) => labels.extend_from_slice(l),
            None => labels.extend(std::iter::repeat_n(0u8, plane)),
        }
    }
    Ok(Batch {
        slices: items.iter().map(|s| s.slice).collect(),
        images: Tensor::new(vec![batch_size, 1, data.size, data.size], images)?,
        labels,
        labeled: items.iter().map(|s| s.labels.is_some()).collect(),
        rsl: items.iter().map(|s| s.rsl.clone()).collect(),
    })
}

/// Loss components of one model at one step. Absent terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelLosses {
    pub sup: f64,
    pub cps: f64,
    pub cl: Option<f64>,
    pub rs: Option<f64>,
    pub total: f64,
    pub anchors: usize,
    /// Anchors whose positive includes a registered key.
    pub reg_positives: usize,
}

fn finite(l: &ModelLosses) -> bool {
    l.total.is_finite()
        && l.sup.is_finite()
        && l.cps.is_finite()
        && l.cl.is_none_or(f64::is_finite)
        && l.rs.is_none_or(f64::is_finite)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub w_cps: f64,
    pub lr_a: f64,
    pub lr_b: f64,
    pub a: ModelLosses,
    pub b: ModelLosses,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model_a: Model<f32>,
    pub model_b: Model<f32>,
    pub opt_a: AdamW,
    pub opt_b: AdamW,
    pub iteration: usize,
    pub bank_a: FeatureBank,
    pub bank_b: FeatureBank,
    pub log: Vec<LossRecord>,
}

/// Tape handles of one step, before any update.
pub struct StepGraph {
    pub bound_a: Bound,
    pub bound_b: Bound,
    pub out_a: ForwardVars,
    pub out_b: ForwardVars,
    pub loss_a: Var,
    pub loss_b: Var,
    pub record: LossRecord,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub contrast: ContrastConfig,
    pub data: TrainData,
    pub table: Option<TransformTable>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        contrast: ContrastConfig,
        data: TrainData,
        table: Option<TransformTable>,
    ) -> Result<Self> {
        cfg.validate()?;
        contrast.validate()?;
        if cfg.flags.rsl && !data.has_rsl() {
            return Err(Error::Config("rsl is on but unlabeled slices lack registered labels".into()));
        }
        if cfg.flags.reps && table.is_none() {
            return Err(Error::Config("reps is on but no transform table was given".into()));
        }
        let spec_a = cfg.spec_a(data.num_classes, data.size);
        let spec_b = cfg.spec_b(data.num_classes, data.size);
        let (model_a, model_b) = segnets::init_models(&spec_a, &spec_b, seeding::derive(cfg.seed, &[STREAM_INIT]))?;
        let cap = cfg
            .bank_capacity
            .unwrap_or_else(|| default_capacity(data.total_slices()))
            .max(1);
        let state = TrainState {
            opt_a: AdamW::new(&model_a.params, cfg.weight_decay),
            opt_b: AdamW::new(&model_b.params, cfg.weight_decay),
            model_a,
            model_b,
            iteration: 0,
            bank_a: FeatureBank::new(cap, cfg.fifo_strict),
            bank_b: FeatureBank::new(cap, cfg.fifo_strict),
            log: Vec::new(),
        };
        Ok(Trainer {
            cfg,
            contrast,
            data,
            table,
            state,
        })
    }

    pub fn batch(&self, iteration: usize) -> Result<Batch> {
        let mut rng = seeding::rng(self.cfg.seed, &[iteration as u64, STREAM_BATCH]);
        compose_batch(&self.data, self.cfg.batch_size, &mut rng)
    }

    /// Both models' losses for `batch` on one tape.
    pub fn loss_graph(&self, tape: &mut Tape<f32>, batch: &Batch) -> Result<StepGraph> {
        let st = &self.state;
        let i = st.iteration;
        let w_cps = if self.cfg.cps {
            w_cps_schedule(i, self.cfg.t_total)
        } else {
            0.0
        };
        let bound_a = st.model_a.bind(tape, true);
        let bound_b = st.model_b.bind(tape, true);
        let out_a = st.model_a.forward(tape, &bound_a, &batch.images)?;
        let out_b = st.model_b.forward(tape, &bound_b, &batch.images)?;
        let prob_a = tape.value(out_a.prob).clone();
        let prob_b = tape.value(out_b.prob).clone();

        let contrast = if self.cfg.flags.scl {
            let mut rng = seeding::rng(self.cfg.seed, &[i as u64, STREAM_CONTRAST]);
            Some(self.contrast_terms(tape, batch, [&out_a, &out_b], [&prob_a, &prob_b], &mut rng)?)
        } else {
            None
        };

        let mut totals = Vec::new();
        let mut records = Vec::new();
        for (m, (out, other)) in [(&out_a, &prob_b), (&out_b, &prob_a)].into_iter().enumerate() {
            let unlabeled: Vec<bool> = batch.labeled.iter().map(|l| !l).collect();
            let sup = sup_loss(tape, out.prob, &batch.labels, &batch.labeled)?;
            let cps = cps_loss(tape, out.prob, other, &unlabeled)?;
            let mut terms = vec![(sup, 1.0f32), (cps, w_cps as f32)];
            let mut rec = ModelLosses {
                sup: tape.value(sup).item() as f64,
                cps: tape.value(cps).item() as f64,
                ..ModelLosses::default()
            };
            if let Some(c) = &contrast {
                let (cl, anchors, regs) = &c[m];
                rec.anchors = *anchors;
                rec.reg_positives = *regs;
                if let Some(cl) = cl {
                    rec.cl = Some(tape.value(*cl).item() as f64);
                    terms.push((*cl, self.cfg.w_cl as f32));
                }
            }
            if self.cfg.flags.rsl {
                let targets: Vec<Option<&[u8]>> = batch.rsl.iter().map(|r| r.as_deref()).collect();
                let rs = rsl_loss(tape, out.prob, &targets)?;
                if let Some(l) = rs.loss {
                    rec.rs = Some(tape.value(l).item() as f64);
                    terms.push((l, self.cfg.w_rs as f32));
                }
            }
            let total = tape.weighted_sum(&terms)?;
            rec.total = tape.value(total).item() as f64;
            totals.push(total);
            records.push(rec);
        }
        Ok(StepGraph {
            bound_a,
            bound_b,
            out_a,
            out_b,
            loss_a: totals[0],
            loss_b: totals[1],
            record: LossRecord {
                iteration: i,
                w_cps,
                lr_a: poly_lr(self.cfg.lr_a, i, self.cfg.t_total, self.cfg.poly_power),
                lr_b: poly_lr(self.cfg.lr_b, i, self.cfg.t_total, self.cfg.poly_power),
                a: records[0],
                b: records[1],
            },
        })
    }

    /// Per model: contrastive loss (if any class has anchors and negatives),
    /// anchor count and registered-positive count.
    fn contrast_terms(
        &self,
        tape: &mut Tape<f32>,
        batch: &Batch,
        outs: [&ForwardVars; 2],
        probs: [&Tensor<f32>; 2],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(Option<Var>, usize, usize)>> {
        let cfg = &self.contrast;
        let plane = self.data.size * self.data.size;
        let truth: Vec<Option<&[u8]>> = batch
            .labeled
            .iter()
            .enumerate()
            .map(|(n, l)| l.then(|| &batch.labels[n * plane..(n + 1) * plane]))
            .collect();
        let stride = self.state.model_a.spec.feature_stride;
        let dim = self.state.model_a.spec.feature_dim();
        let targets: Vec<CellTargets> = probs.iter().map(|p| CellTargets::new(*p, &truth, stride)).collect();
        let feats: Vec<Vec<f32>> = outs.iter().map(|o| tape.value(o.features).data.clone()).collect();
        let qualifying: Vec<_> = targets
            .iter()
            .map(|t| losses::qualifying_rows(t, cfg.threshold))
            .collect();

        let mut pools = vec![NegativePool::new(dim), NegativePool::new(dim)];
        for m in 0..2 {
            if cfg.share_negatives {
                for src in 0..2 {
                    pools[m].add(&feats[src], &qualifying[src]);
                }
            } else {
                pools[m].add(&feats[m], &qualifying[m]);
            }
        }
        let anchor_sets: Vec<_> = targets
            .iter()
            .map(|t| losses::select_anchors(t, &batch.slices, cfg, rng))
            .collect();
        // Shared pools give both models the same negative draw per class.
        let mut shared_neg: BTreeMap<u8, Vec<f32>> = BTreeMap::new();
        let banks = [&self.state.bank_a, &self.state.bank_b];
        let mut out = Vec::new();
        for m in 0..2 {
            let mut terms = Vec::new();
            let (mut n_anchor, mut n_reg) = (0, 0);
            for set in &anchor_sets[m] {
                let Some(label_key) = losses::label_positive_key(&feats[m], dim, set) else {
                    continue;
                };
                let negatives = if cfg.share_negatives {
                    shared_neg
                        .entry(set.class)
                        .or_insert_with(|| pools[0].sample_for(set.class, cfg, rng))
                        .clone()
                } else {
                    pools[m].sample_for(set.class, cfg, rng)
                };
                let mut positives = Vec::with_capacity(set.entries.len() * dim);
                for e in &set.entries {
                    let reg = match (&self.table, self.cfg.flags.reps) {
                        (Some(table), true) => {
                            let grid = &self.data.grids[&e.slice.volume_id];
                            losses::reg_positive_key(e, grid, stride, table, banks[m])
                        }
                        _ => None,
                    };
                    n_reg += reg.is_some() as usize;
                    positives.extend(losses::combine_positive(&label_key, reg.as_deref(), cfg.w_label, cfg.w_reg));
                }
                n_anchor += set.entries.len();
                terms.push(ClassTerm {
                    class: set.class,
                    anchors: set.entries.iter().map(|e| e.row).collect(),
                    positives,
                    negatives,
                });
            }
            let flat = tape.reshape(outs[m].features, &[feats[m].len() / dim, dim])?;
            let loss = losses::contrastive_loss(tape, flat, &terms, cfg.tau)?;
            out.push((loss, n_anchor, n_reg));
        }
        Ok(out)
    }

    /// One optimization step of both models.
    pub fn step(&mut self) -> Result<LossRecord> {
        crate::autograd::flush_subnormals();
        let batch = self.batch(self.state.iteration)?;
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, &batch)?;
        let rec = g.record;
        if !finite(&rec.a) || !finite(&rec.b) {
            return Err(Error::Divergence {
                iteration: rec.iteration,
                detail: serde_json::to_string(&rec)?,
            });
        }
        let root = tape.weighted_sum(&[(g.loss_a, 1.0), (g.loss_b, 1.0)])?;
        let grads = tape.backward(root)?;
        let st = &mut self.state;
        let ga: Vec<Vec<f32>> = g
            .bound_a
            .vars
            .iter()
            .zip(&st.model_a.params)
            .map(|(v, p)| grads.dense(*v, p.len()))
            .collect();
        let gb: Vec<Vec<f32>> = g
            .bound_b
            .vars
            .iter()
            .zip(&st.model_b.params)
            .map(|(v, p)| grads.dense(*v, p.len()))
            .collect();
        if ga.iter().chain(&gb).any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                iteration: rec.iteration,
                detail: format!("non-finite gradient; losses {}", serde_json::to_string(&rec)?),
            });
        }
        st.opt_a.step(&mut st.model_a.params, &ga, rec.lr_a);
        st.opt_b.step(&mut st.model_b.params, &gb, rec.lr_b);
        // Banks take this step's features only after every loss is computed.
        for (bank, out) in [(&mut st.bank_a, g.out_a), (&mut st.bank_b, g.out_b)] {
            let f = tape.value(out.features);
            let [_, h, w, d] = [f.shape[0], f.shape[1], f.shape[2], f.shape[3]];
            for (n, s) in batch.slices.iter().enumerate() {
                let data = f.data[n * h * w * d..(n + 1) * h * w * d].to_vec();
                bank.upsert(*s, FeatureMap::new(h, w, d, data)?);
            }
        }
        st.iteration += 1;
        st.log.push(rec);
        Ok(rec)
    }
}

/// Argmax of the averaged logits of both models, `[B * H * W]`.
pub fn infer(a: &Model<f32>, b: &Model<f32>, images: &Tensor<f32>) -> Result<Vec<u8>> {
    let la = a.predict(images)?.logits;
    let lb = b.predict(images)?.logits;
    if la.shape != lb.shape {
        return Err(Error::Shape(format!("logits {:?} vs {:?}", la.shape, lb.shape)));
    }
    let avg = Tensor {
        shape: la.shape.clone(),
        data: la.data.iter().zip(&lb.data).map(|(x, y)| (x + y) * 0.5).collect(),
    };
    Ok(losses::argmax_labels(&avg))
}

/// Slices of `images` through `predict`, in chunks of `chunk`.
pub fn predict_slices<F>(images: &[&[f32]], size: usize, chunk: usize, mut predict: F) -> Result<Vec<u8>>
where
    F: FnMut(&Tensor<f32>) -> Result<Vec<u8>>,
{
    let mut out = Vec::with_capacity(images.len() * size * size);
    for group in images.chunks(chunk.max(1)) {
        let t = Tensor::new(vec![group.len(), 1, size, size], group.concat())?;
        out.extend(predict(&t)?);
    }
    Ok(out)
}

/// Axial slice-by-slice segmentation of a volume.
pub fn segment_volume(a: &Model<f32>, b: &Model<f32>, volume: &Volume) -> Result<LabelMap> {
    let [d, h, _] = volume.grid.dims;
    let slices: Vec<&[f32]> = (0..d).map(|z| volume.slice(z)).collect();
    let labels = predict_slices(&slices, h, 16, |t| infer(a, b, t))?;
    LabelMap::new(volume.id, volume.grid, labels, a.spec.num_classes as u8)
}

const STATE_MAGIC: &[u8; 4] = b"XTTS";
const STATE_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    iteration: usize,
    adam_t: [u64; 2],
    /// Per bank, keys oldest first with map shape.
    banks: [Vec<(SliceRef, [usize; 3])>; 2],
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.write_f32::<LittleEndian>(*x).expect("vec write");
    }
}

/// Optimizer moments, iteration and both banks. Models go in their own
/// checkpoint files.
pub fn write_state(path: &Path, st: &TrainState) -> Result<()> {
    let banks = [&st.bank_a, &st.bank_b].map(|b| {
        b.keys_by_age()
            .into_iter()
            .map(|k| {
                let m = b.get(k).expect("listed key");
                (k, [m.height, m.width, m.dim])
            })
            .collect::<Vec<_>>()
    });
    let header = StateHeader {
        iteration: st.iteration,
        adam_t: [st.opt_a.t, st.opt_b.t],
        banks,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.write_u16::<LittleEndian>(STATE_VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    for opt in [&st.opt_a, &st.opt_b] {
        for (m, v) in opt.m.iter().zip(&opt.v) {
            put_f32s(&mut buf, m);
            put_f32s(&mut buf, v);
        }
    }
    for (bank, keys) in [&st.bank_a, &st.bank_b].iter().zip(&header.banks) {
        for (k, _) in keys {
            put_f32s(&mut buf, &bank.get(*k).expect("listed key").data);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Restores what [`write_state`] saved into `st`, whose models and bank
/// settings must already match.
pub fn read_state(path: &Path, st: &mut TrainState) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != STATE_MAGIC {
        return Err(Error::format(path, "not a training state file"));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != STATE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    if r.len() < n {
        return Err(Error::format(path, "truncated header"));
    }
    let header: StateHeader = serde_json::from_slice(&r[..n])?;
    r = &r[n..];
    let mut take = |len: usize| -> Result<Vec<f32>> {
        let mut v = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut v)
            .map_err(|_| Error::format(path, "truncated payload"))?;
        Ok(v)
    };
    for opt in [&mut st.opt_a, &mut st.opt_b] {
        for i in 0..opt.m.len() {
            let len = opt.m[i].len();
            opt.m[i] = take(len)?;
            opt.v[i] = take(len)?;
        }
    }
    st.opt_a.t = header.adam_t[0];
    st.opt_b.t = header.adam_t[1];
    for (bank, keys) in [&mut st.bank_a, &mut st.bank_b].into_iter().zip(&header.banks) {
        let mut fresh = FeatureBank::new(bank.capacity(), bank.fifo_strict());
        for (k, [h, w, d]) in keys {
            fresh.upsert(*k, FeatureMap::new(*h, *w, *d, take(h * w * d)?)?);
        }
        *bank = fresh;
    }
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes"));
    }
    st.iteration = header.iteration;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_cohort, CohortSpec, PhantomSpec};
    use rand::SeedableRng;

    #[test]
    fn warmup_endpoints_and_monotone() {
        assert!((w_cps_schedule(100, 100) - 0.1).abs() < 1e-15);
        assert!((w_cps_schedule(0, 100) - 0.1 * (-5.0f64).exp()).abs() < 1e-15);
        let v: Vec<f64> = (0..=100).map(|i| w_cps_schedule(i, 100)).collect();
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn flags_rules() {
        let bad = Flags {
            reps: true,
            ..Flags::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(Flags::default().label(), "baseline");
        assert_eq!(Flags::full().label(), "rsl+brs+scl+reps");
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[vec![0.3, -2.0]], 0.01);
        assert!((p[0].data[0] - 0.99).abs() < 1e-6);
        assert!((p[0].data[1] + 0.99).abs() < 1e-6);
        let mut q = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        let mut decay = AdamW::new(&q, 0.5);
        decay.step(&mut q, &[vec![0.0]], 0.1);
        assert!((q[0].data[0] - 1.9).abs() < 1e-6);
    }

    fn tiny_data(n_labeled: usize) -> TrainData {
        let spec = CohortSpec {
            n_train: 4,
            n_test: 0,
            n_labeled,
            phantom: PhantomSpec::standard(32),
        };
        let c = build_cohort(&spec, 5).unwrap();
        TrainData::new(&c.dataset, None).unwrap()
    }

    #[test]
    fn batch_halves_and_replacement() {
        let data = tiny_data(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = compose_batch(&data, 8, &mut rng).unwrap();
        assert_eq!(b.labeled, [true, true, true, true, false, false, false, false]);
        let mut small = data.clone();
        small.labeled.truncate(1);
        let b = compose_batch(&small, 8, &mut rng).unwrap();
        assert!(b.slices[..4].iter().all(|s| *s == small.labeled[0].slice));
        let x = compose_batch(&data, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let y = compose_batch(&data, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(x.slices, y.slices);
        assert!(compose_batch(&data, 7, &mut rng).is_err());
    }

    #[test]
    fn infer_averages_logits() {
        let spec = ModelSpec::convnet(3, 16);
        let a: Model<f32> = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b: Model<f32> = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = segnets::random_batch::<f32>(2, 16, &mut ChaCha8Rng::seed_from_u64(3));
        let own = losses::argmax_labels(&a.predict(&x).unwrap().logits);
        assert_eq!(infer(&a, &a, &x).unwrap(), own);
        let la = a.predict(&x).unwrap().logits;
        let lb = b.predict(&x).unwrap().logits;
        let got = infer(&a, &b, &x).unwrap();
        let c = 3;
        let plane = 256;
        for n in 0..2 {
            for p in 0..plane {
                let s = |k: usize| (la.data[(n * c + k) * plane + p] + lb.data[(n * c + k) * plane + p]) * 0.5;
                let best = (1..c).fold(0, |bi, k| if s(k) > s(bi) { k } else { bi });
                assert_eq!(got[n * plane + p] as usize, best);
            }
        }
    }
}
