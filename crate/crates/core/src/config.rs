//! Declarative experiment file with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evalkit::Hd95Mode;
use crate::losses::ContrastConfig;
use crate::regsup::ScoreWeights;
use crate::spatreg::RegistrationConfig;
use crate::synthgen::CohortSpec;
use crate::trainkit::{Flags, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hd95: Hd95Mode,
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hd95: Hd95Mode::Slice,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub flag_sets: Vec<Flags>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let f = |rsl, brs, scl, reps| Flags { rsl, brs, scl, reps };
        AblationConfig {
            seeds: vec![0, 1, 2],
            flag_sets: vec![
                f(false, false, false, false),
                f(true, false, false, false),
                f(true, true, false, false),
                f(true, true, true, false),
                f(true, true, true, true),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub cohort: CohortSpec,
    pub cohort_seed: u64,
    pub registration: RegistrationConfig,
    pub brs_weights: ScoreWeights,
    pub train: TrainConfig,
    pub contrast: ContrastConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cohort = desk_cohort();
        let train = TrainConfig {
            n_labeled: cohort.n_labeled,
            ..desk_train()
        };
        ExperimentConfig {
            cohort,
            cohort_seed: 0,
            registration: RegistrationConfig::default(),
            brs_weights: ScoreWeights::default(),
            train,
            contrast: ContrastConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// Cohort with wider case-to-case intensity spread than the standard
/// phantom, so a single labeled case generalizes poorly on its own.
pub fn desk_cohort() -> CohortSpec {
    let mut c = CohortSpec::default();
    for s in &mut c.phantom.structures {
        s.intensity_std = DESK_INTENSITY_STD;
    }
    c
}

const DESK_INTENSITY_STD: f64 = 0.12;

/// Training settings sized for a single CPU core: a shorter schedule, a
/// wider convnet and larger learning rates than the full-scale defaults.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        t_total: 1000,
        channels_a: Some(vec![16, 32, 64]),
        lr_a: 2e-3,
        lr_b: 1e-3,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.phantom.validate()?;
        self.train.validate()?;
        self.contrast.validate()?;
        if self.train.n_labeled != self.cohort.n_labeled {
            return Err(Error::Config(format!(
                "train.n_labeled {} differs from cohort.n_labeled {}",
                self.train.n_labeled, self.cohort.n_labeled
            )));
        }
        for f in &self.ablation.flag_sets {
            f.validate()?;
        }
        Ok(())
    }

    /// Applies `path=value` overrides. Values parse as JSON and fall back
    /// to plain strings. Unknown paths are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, path, value)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                let Some(child) = map.get_mut(*part) else {
                    return Err(Error::Config(format!("unknown config key {path:?}")));
                };
                child
            }
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{part:?} in {path:?} is not an index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("index {i} out of {len} in {path:?}")))?
            }
            _ => return Err(Error::Config(format!("{path:?} descends into a scalar"))),
        };
        if last {
            *node = value;
            return Ok(());
        }
    }
    Err(Error::Config("empty override path".into()))
}
