//! Registered pseudo-labels for unlabeled volumes and the cycle-consistency
//! rule that picks which labeled volume to propagate from.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::spatreg::metric::{mutual_information, rmse, DEFAULT_BINS};
use crate::spatreg::resample::{resample_intensity, resample_labels};
use crate::spatreg::table::TransformTable;
use crate::spatreg::transform::SpatialTransform;
use crate::volgrid::{self, Dataset, Grid, LabelMap, SliceRef, Volume, VolumeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub rmse: f64,
    pub mi: f64,
    pub bins: usize,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            rmse: 0.5,
            mi: 0.5,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleScore {
    pub unlabeled: VolumeId,
    pub labeled: VolumeId,
    /// RMSE over the intensity range, which is 1 for normalized volumes.
    pub rmse_term: f64,
    /// `1 - normalized MI`.
    pub mi_term: f64,
    /// Lower is better.
    pub composite: f64,
}

/// Scores the round trip `v_j -> q -> j` through `t_jq` then `t_qj`.
pub fn cycle_score(
    v_j: &Volume,
    grid_q: &Grid,
    t_jq: &SpatialTransform,
    t_qj: &SpatialTransform,
    labeled: VolumeId,
    weights: &ScoreWeights,
) -> Result<CycleScore> {
    let there = resample_intensity(v_j, t_jq, grid_q, v_j.id);
    let back = resample_intensity(&there, t_qj, &v_j.grid, v_j.id);
    let (rmse_term, mi_term) = if back.voxels == v_j.voxels {
        (0.0, 0.0)
    } else {
        let r = rmse(&v_j.voxels, &back.voxels)?.min(1.0);
        let mi = mutual_information(&v_j.voxels, &back.voxels, weights.bins)?;
        (r, 1.0 - mi)
    };
    Ok(CycleScore {
        unlabeled: v_j.id,
        labeled,
        rmse_term,
        mi_term,
        composite: weights.rmse * rmse_term + weights.mi * mi_term,
    })
}

/// Index of the smallest score; ties go to the lowest id.
pub fn argmin_by_lowest_id(scores: &[(VolumeId, f64)]) -> Option<VolumeId> {
    scores
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub unlabeled: VolumeId,
    pub chosen: VolumeId,
    /// Empty when there was a single candidate.
    pub scores: Vec<CycleScore>,
}

/// Labeled volume whose registrations with `v_j` are most cycle-consistent.
/// With a single candidate no scoring happens.
pub fn select_best_labeled(
    v_j: &Volume,
    labeled: &[&Volume],
    table: &TransformTable,
    weights: &ScoreWeights,
) -> Result<Selection> {
    match labeled {
        [] => Err(Error::Config("best registration selection needs a labeled volume".into())),
        [only] => Ok(Selection {
            unlabeled: v_j.id,
            chosen: only.id,
            scores: Vec::new(),
        }),
        _ => {
            let scores = labeled
                .iter()
                .map(|q| {
                    let t_jq = table.get(v_j.id, q.id)?;
                    let t_qj = table.get(q.id, v_j.id)?;
                    cycle_score(v_j, &q.grid, t_jq, t_qj, q.id, weights)
                })
                .collect::<Result<Vec<_>>>()?;
            let keyed: Vec<(VolumeId, f64)> = scores.iter().map(|s| (s.labeled, s.composite)).collect();
            let chosen = argmin_by_lowest_id(&keyed).expect("non-empty candidates");
            Ok(Selection {
                unlabeled: v_j.id,
                chosen,
                scores,
            })
        }
    }
}

/// Labels of a labeled volume carried onto an unlabeled volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredLabelSet {
    pub target: VolumeId,
    pub source: VolumeId,
    pub labels: LabelMap,
}

impl RegisteredLabelSet {
    pub fn slice(&self, s: SliceRef) -> Result<&[u8]> {
        if s.volume_id != self.target {
            return Err(Error::Lookup(format!(
                "slice of volume {} requested from registered labels of {}",
                s.volume_id, self.target
            )));
        }
        let z = s.slice_index as usize;
        if z >= self.labels.grid.dims[0] {
            return Err(Error::Range {
                what: "slice index",
                value: z,
                limit: self.labels.grid.dims[0],
            });
        }
        Ok(self.labels.slice(z))
    }
}

/// Nearest-neighbor propagation of `y_q` through `t_qj` onto `grid_j`.
pub fn make_registered_labels(
    y_q: &LabelMap,
    t_qj: &SpatialTransform,
    grid_j: &Grid,
    target: VolumeId,
) -> RegisteredLabelSet {
    RegisteredLabelSet {
        target,
        source: y_q.id,
        labels: resample_labels(y_q, t_qj, grid_j, target),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RslConfig {
    /// Choose the source per unlabeled volume by cycle consistency.
    pub brs: bool,
    pub weights: ScoreWeights,
    /// Drives the random source choice when `brs` is off.
    pub seed: u64,
}

impl Default for RslConfig {
    fn default() -> Self {
        RslConfig {
            brs: true,
            weights: ScoreWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrsReport {
    pub weights: ScoreWeights,
    pub brs: bool,
    pub selections: Vec<Selection>,
}

/// Registered labels for every unlabeled volume of `dataset`.
pub fn prepare_rsl(
    dataset: &Dataset,
    table: &TransformTable,
    cfg: &RslConfig,
) -> Result<(BrsReport, Vec<RegisteredLabelSet>)> {
    let labeled: Vec<&Volume> = dataset
        .labeled_ids
        .iter()
        .map(|id| dataset.volume(*id))
        .collect::<Result<_>>()?;
    let selections: Vec<Selection> = dataset
        .unlabeled_ids
        .par_iter()
        .map(|&j| {
            let v_j = dataset.volume(j)?;
            if cfg.brs || labeled.len() == 1 {
                select_best_labeled(v_j, &labeled, table, &cfg.weights)
            } else {
                let mut rng = seeding::rng(cfg.seed, &[j.0 as u64, 0xb75]);
                let pick = labeled[rng.random_range(0..labeled.len())].id;
                Ok(Selection {
                    unlabeled: j,
                    chosen: pick,
                    scores: Vec::new(),
                })
            }
        })
        .collect::<Result<_>>()?;
    let sets = selections
        .par_iter()
        .map(|s| {
            let y_q = dataset.labels(s.chosen)?;
            let t_qj = table.get(s.chosen, s.unlabeled)?;
            let grid_j = dataset.volume(s.unlabeled)?.grid;
            Ok(make_registered_labels(y_q, t_qj, &grid_j, s.unlabeled))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        BrsReport {
            weights: cfg.weights,
            brs: cfg.brs,
            selections,
        },
        sets,
    ))
}

pub fn write_brs(path: &Path, report: &BrsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_brs(path: &Path) -> Result<BrsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `rsl_labels/` holds one label container per unlabeled volume plus
/// `index.json` mapping target ids to source ids.
pub fn write_rsl_labels(dir: &Path, sets: &[RegisteredLabelSet]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    for s in sets {
        volgrid::write_labels(&dir.join(format!("{:04}.xtl", s.target.0)), &s.labels)?;
        index.insert(s.target.0.to_string(), s.source);
    }
    let p = dir.join("index.json");
    std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))
}

pub fn read_rsl_labels(dir: &Path) -> Result<Vec<RegisteredLabelSet>> {
    let p = dir.join("index.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: BTreeMap<String, VolumeId> = serde_json::from_str(&text)?;
    let mut out = Vec::new();
    for (target, source) in index {
        let target: u32 = target
            .parse()
            .map_err(|_| Error::format(&p, format!("bad volume id {target}")))?;
        let labels = volgrid::read_labels(&dir.join(format!("{target:04}.xtl")))?;
        out.push(RegisteredLabelSet {
            target: VolumeId(target),
            source,
            labels,
        });
    }
    out.sort_by_key(|s| s.target);
    Ok(out)
}
