//! The stages behind each command, reading and writing one output tree.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::evalkit::{
    self, ablation_table, evaluate_case, plot_bars, plot_lines, write_ablation_csv, write_metrics_csv,
    AblationRow, MetricReport, PseudoPoint, PseudoTracker,
};
use crate::regsup::{self, prepare_rsl, RslConfig};
use crate::segnets::{read_checkpoint, write_checkpoint};
use crate::spatreg::{self, build_transform_table, improvement_rate, register_affine, SpatialTransform, TransformTable};
use crate::synthgen::{self, build_cohort, read_cohort, read_oracle, LoadedCohort};
use crate::trainkit::{self, segment_volume, Flags, LossRecord, ModelLosses, TrainConfig, TrainData, Trainer};
use crate::volgrid::{Volume, VolumeId};
use crate::{Error, Result};

/// Paths of the output tree.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn transforms(&self) -> PathBuf {
        self.root.join("transforms.bin")
    }

    /// Registered labels chosen by cycle consistency or at random.
    pub fn rsl(&self, brs: bool) -> PathBuf {
        self.root.join("rsl").join(if brs { "brs" } else { "random" })
    }

    pub fn run(&self, flags: &Flags, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{}-seed{seed}", flags.label()))
    }

    pub fn reg_only(&self) -> PathBuf {
        self.root.join("reg_only")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn need(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Lookup(format!("{} is missing; run `{stage}` first", path.display())))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateReport {
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_labeled: usize,
    pub n_test: usize,
    /// DSC of the stored oracle labels against the exported labels.
    pub oracle_self_dsc: f64,
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateReport> {
    let lay = Layout::new(&cfg.out);
    let cohort = build_cohort(&cfg.cohort, cfg.cohort_seed)?;
    let dir = lay.cohort();
    synthgen::write_cohort(&dir, &cohort, cfg.cohort_seed)?;
    let oracle = read_oracle(&dir)?;
    let loaded = read_cohort(&dir)?;
    let mut total = 0.0;
    let mut n = 0;
    for id in &loaded.dataset.labeled_ids {
        let l = loaded.dataset.labels(*id)?;
        let r = evaluate_case(l, oracle.labels(*id)?, 0, cfg.eval.hd95)?;
        total += r.mean_dsc;
        n += 1;
    }
    for c in &loaded.test {
        let l = c.labels.as_ref().expect("test labels");
        total += evaluate_case(l, oracle.labels(c.volume.id)?, 0, cfg.eval.hd95)?.mean_dsc;
        n += 1;
    }
    write_json(&cfg.out.join("experiment.json"), cfg)?;
    Ok(GenerateReport {
        dir,
        n_train: loaded.dataset.cases.len(),
        n_labeled: loaded.dataset.labeled_ids.len(),
        n_test: loaded.test.len(),
        oracle_self_dsc: total / n.max(1) as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RegisterReport {
    pub path: PathBuf,
    pub entries: usize,
    pub improvement_rate: f64,
    /// The existing table already matched the configuration.
    pub reused: bool,
}

fn load_cohort(lay: &Layout) -> Result<LoadedCohort> {
    need(&lay.cohort().join("dataset.json"), "generate")?;
    read_cohort(&lay.cohort())
}

pub fn cmd_register(cfg: &ExperimentConfig) -> Result<RegisterReport> {
    let lay = Layout::new(&cfg.out);
    let cohort = load_cohort(&lay)?;
    let vols: Vec<&Volume> = cohort.dataset.cases.iter().map(|c| &c.volume).collect();
    let path = lay.transforms();
    let ids: Vec<VolumeId> = vols.iter().map(|v| v.id).collect();
    let existing = if path.exists() {
        TransformTable::read(&path).ok().filter(|t| {
            t.provenance == spatreg::table::config_hash(&cfg.registration)
                && t.volume_ids() == ids
                && t.len() == ids.len() * ids.len()
        })
    } else {
        None
    };
    let reused = existing.is_some();
    let table = match existing {
        Some(t) => t,
        None => {
            let t = build_transform_table(&vols, &cfg.registration)?;
            t.write(&path)?;
            t
        }
    };
    let rate = improvement_rate(&table, &vols, cfg.registration.bins)?;
    info!("{} transforms, {:.1}% improve on identity", table.off_diagonal_len(), rate * 100.0);
    Ok(RegisterReport {
        path,
        entries: table.off_diagonal_len(),
        improvement_rate: rate,
        reused,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareReport {
    pub dir: PathBuf,
    pub brs: bool,
    pub selections: usize,
    /// Fraction of unlabeled volumes whose chosen source gives the best
    /// propagated labels by oracle DSC; `None` with a single labeled volume.
    pub oracle_agreement: Option<f64>,
}

fn load_table(lay: &Layout) -> Result<TransformTable> {
    need(&lay.transforms(), "register")?;
    TransformTable::read(&lay.transforms())
}

pub fn cmd_prepare_rsl(cfg: &ExperimentConfig) -> Result<PrepareReport> {
    prepare_rsl_mode(cfg, cfg.train.flags.brs)
}

pub fn prepare_rsl_mode(cfg: &ExperimentConfig, brs: bool) -> Result<PrepareReport> {
    let lay = Layout::new(&cfg.out);
    let cohort = load_cohort(&lay)?;
    let table = load_table(&lay)?;
    let rcfg = RslConfig {
        brs,
        weights: cfg.brs_weights,
        seed: cfg.cohort_seed,
    };
    let (report, sets) = prepare_rsl(&cohort.dataset, &table, &rcfg)?;
    let dir = lay.rsl(brs);
    mkdir(&dir)?;
    regsup::write_brs(&dir.join("brs.json"), &report)?;
    regsup::write_rsl_labels(&dir.join("rsl_labels"), &sets)?;

    let oracle_agreement = if cohort.dataset.labeled_ids.len() > 1 {
        let oracle = read_oracle(&lay.cohort())?;
        let mut hits = 0;
        for sel in &report.selections {
            let truth = oracle.labels(sel.unlabeled)?;
            let grid = cohort.dataset.volume(sel.unlabeled)?.grid;
            let mut best = (f64::MIN, sel.chosen);
            for q in &cohort.dataset.labeled_ids {
                let prop = regsup::make_registered_labels(
                    cohort.dataset.labels(*q)?,
                    table.get(*q, sel.unlabeled)?,
                    &grid,
                    sel.unlabeled,
                );
                let d = evalkit::pooled_mean_dsc(&prop.labels.labels, &truth.labels, truth.num_classes);
                if d > best.0 {
                    best = (d, *q);
                }
            }
            hits += (best.1 == sel.chosen) as usize;
        }
        let rate = hits as f64 / report.selections.len().max(1) as f64;
        info!("source choice matches the oracle-best source for {:.0}% of volumes", rate * 100.0);
        Some(rate)
    } else {
        None
    };
    Ok(PrepareReport {
        dir,
        brs,
        selections: report.selections.len(),
        oracle_agreement,
    })
}

const LOSS_HEADER: [&str; 18] = [
    "iteration", "w_cps", "lr_a", "lr_b", "sup_a", "cps_a", "cl_a", "rs_a", "total_a", "anchors_a",
    "reg_positives_a", "sup_b", "cps_b", "cl_b", "rs_b", "total_b", "anchors_b", "reg_positives_b",
];

fn loss_row(r: &LossRecord) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let model = |m: &ModelLosses| {
        vec![
            m.sup.to_string(),
            m.cps.to_string(),
            opt(m.cl),
            opt(m.rs),
            m.total.to_string(),
            m.anchors.to_string(),
            m.reg_positives.to_string(),
        ]
    };
    let mut row = vec![
        r.iteration.to_string(),
        r.w_cps.to_string(),
        r.lr_a.to_string(),
        r.lr_b.to_string(),
    ];
    row.extend(model(&r.a));
    row.extend(model(&r.b));
    row
}

fn parse_loss_row(rec: &csv::StringRecord) -> Option<LossRecord> {
    let f = |i: usize| rec.get(i)?.parse::<f64>().ok();
    let o = |i: usize| match rec.get(i) {
        Some("") => Some(None),
        Some(s) => s.parse::<f64>().ok().map(Some),
        None => None,
    };
    let u = |i: usize| rec.get(i)?.parse::<usize>().ok();
    let model = |b: usize| -> Option<ModelLosses> {
        Some(ModelLosses {
            sup: f(b)?,
            cps: f(b + 1)?,
            cl: o(b + 2)?,
            rs: o(b + 3)?,
            total: f(b + 4)?,
            anchors: u(b + 5)?,
            reg_positives: u(b + 6)?,
        })
    };
    Some(LossRecord {
        iteration: u(0)?,
        w_cps: f(1)?,
        lr_a: f(2)?,
        lr_b: f(3)?,
        a: model(4)?,
        b: model(11)?,
    })
}

pub fn write_losses_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(LOSS_HEADER).map_err(|e| Error::format(path, e.to_string()))?;
    for r in log {
        w.write_record(loss_row(r)).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            parse_loss_row(&rec).ok_or_else(|| Error::format(path, "malformed loss row"))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub iterations: usize,
    pub last: Option<LossRecord>,
    pub pseudo: Vec<PseudoPoint>,
}

fn save_checkpoint(dir: &Path, tr: &Trainer) -> Result<()> {
    mkdir(dir)?;
    write_checkpoint(&dir.join("model_a.xtck"), &tr.state.model_a)?;
    write_checkpoint(&dir.join("model_b.xtck"), &tr.state.model_b)?;
    trainkit::write_state(&dir.join("state.bin"), &tr.state)
}

fn load_checkpoint(dir: &Path, tr: &mut Trainer) -> Result<()> {
    tr.state.model_a = read_checkpoint(&dir.join("model_a.xtck"))?;
    tr.state.model_b = read_checkpoint(&dir.join("model_b.xtck"))?;
    trainkit::read_state(&dir.join("state.bin"), &mut tr.state)
}

/// Trainer for `cfg.train`, with the registered labels and table its flags need.
pub fn build_trainer(cfg: &ExperimentConfig) -> Result<(Trainer, LoadedCohort)> {
    let lay = Layout::new(&cfg.out);
    let cohort = load_cohort(&lay)?;
    let flags = cfg.train.flags;
    let sets = if flags.rsl {
        let dir = lay.rsl(flags.brs).join("rsl_labels");
        need(&dir.join("index.json"), "prepare-rsl")?;
        Some(regsup::read_rsl_labels(&dir)?)
    } else {
        None
    };
    let table = if flags.reps { Some(load_table(&lay)?) } else { None };
    let data = TrainData::new(&cohort.dataset, sets.as_deref())?;
    let train = TrainConfig {
        n_labeled: cohort.dataset.labeled_ids.len(),
        ..cfg.train.clone()
    };
    Ok((Trainer::new(train, cfg.contrast.clone(), data, table)?, cohort))
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainReport> {
    let lay = Layout::new(&cfg.out);
    let (mut tr, _) = build_trainer(cfg)?;
    let run = lay.run(&cfg.train.flags, cfg.train.seed);
    mkdir(&run)?;
    write_json(&run.join("config.json"), &tr.cfg)?;
    write_json(&run.join("experiment.json"), cfg)?;
    let tracker = if tr.cfg.pseudo_every > 0 {
        let oracle = read_oracle(&lay.cohort())?;
        Some(PseudoTracker::new(&tr.data, &oracle, tr.cfg.pseudo_slices, tr.cfg.pseudo_every, cfg.cohort_seed)?)
    } else {
        None
    };
    let ckpt = run.join("checkpoint");
    let mut log = Vec::new();
    let mut pseudo = Vec::new();
    if resume {
        need(&ckpt.join("state.bin"), "train")?;
        load_checkpoint(&ckpt, &mut tr)?;
        let done = tr.state.iteration;
        log = read_losses_csv(&run.join("losses.csv"))?;
        log.retain(|r| r.iteration < done);
        let pq = run.join("pseudo_quality.csv");
        if pq.exists() {
            pseudo = evalkit::read_pseudo_csv(&pq)?;
            pseudo.retain(|p| p.iteration <= done);
        }
        info!("resuming {} at iteration {done}", run.display());
    }
    while tr.state.iteration < tr.cfg.t_total {
        match tr.step() {
            Ok(rec) => log.push(rec),
            Err(e @ Error::Divergence { .. }) => {
                write_losses_csv(&run.join("losses.csv"), &log)?;
                std::fs::write(run.join("divergence.txt"), e.to_string()).map_err(|io| Error::io(&run, io))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        let done = tr.state.iteration;
        if let Some(t) = &tracker {
            if t.due(done) {
                pseudo.push(t.measure(&tr.state.model_a, &tr.state.model_b, done)?);
            }
        }
        if tr.cfg.checkpoint_every > 0 && done % tr.cfg.checkpoint_every == 0 && done < tr.cfg.t_total {
            save_checkpoint(&ckpt, &tr)?;
            write_losses_csv(&run.join("losses.csv"), &log)?;
            evalkit::write_pseudo_csv(&run.join("pseudo_quality.csv"), &pseudo)?;
        }
        if done % 100 == 0 {
            let r = log.last().expect("logged");
            info!("step {done}: loss A {:.4} B {:.4}", r.a.total, r.b.total);
        }
    }
    save_checkpoint(&run, &tr)?;
    write_losses_csv(&run.join("losses.csv"), &log)?;
    if tracker.is_some() {
        evalkit::write_pseudo_csv(&run.join("pseudo_quality.csv"), &pseudo)?;
    }
    Ok(TrainReport {
        run_dir: run,
        iterations: tr.state.iteration,
        last: log.last().copied(),
        pseudo,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cases: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub per_class_dsc: Vec<f64>,
}

fn summarize(reports: &[MetricReport]) -> EvalSummary {
    let n = reports.len().max(1) as f64;
    let classes = reports.first().map_or(0, |r| r.dsc.len());
    let hds: Vec<f64> = reports.iter().filter_map(|r| r.mean_hd95).collect();
    EvalSummary {
        cases: reports.len(),
        mean_dsc: reports.iter().map(|r| r.mean_dsc).sum::<f64>() / n,
        mean_hd95: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
        per_class_dsc: (0..classes)
            .map(|c| reports.iter().map(|r| r.dsc[c]).sum::<f64>() / n)
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub run: Option<EvalSummary>,
    pub reg_only: EvalSummary,
    pub plots: Vec<PathBuf>,
}

fn class_names(n: usize) -> Vec<String> {
    (1..=n).map(|c| format!("class {c}")).collect()
}

/// Test-set metrics of a trained run (the configured one unless `run` is
/// given) and of registration-propagated labels alone.
pub fn cmd_eval(cfg: &ExperimentConfig, run: Option<&Path>) -> Result<EvalReport> {
    let lay = Layout::new(&cfg.out);
    let cohort = load_cohort(&lay)?;
    let mut plots = Vec::new();
    let run_dir = run
        .map(Path::to_path_buf)
        .unwrap_or_else(|| lay.run(&cfg.train.flags, cfg.train.seed));
    let run_summary = if run_dir.join("model_a.xtck").exists() {
        Some(eval_run(cfg, &cohort, &run_dir, &mut plots)?)
    } else if run.is_some() {
        return Err(Error::Lookup(format!("{} has no trained models; run `train` first", run_dir.display())));
    } else {
        warn!("no trained run at {}; evaluating the registration baseline only", run_dir.display());
        None
    };
    let reg_only = eval_reg_only(cfg, &cohort, &lay)?;
    Ok(EvalReport {
        run: run_summary,
        reg_only,
        plots,
    })
}

fn eval_run(cfg: &ExperimentConfig, cohort: &LoadedCohort, run: &Path, plots: &mut Vec<PathBuf>) -> Result<EvalSummary> {
    let a = read_checkpoint(&run.join("model_a.xtck"))?;
    let b = read_checkpoint(&run.join("model_b.xtck"))?;
    let iteration = read_losses_csv(&run.join("losses.csv"))
        .ok()
        .and_then(|l| l.last().map(|r| r.iteration + 1))
        .unwrap_or(0);
    let mut reports = Vec::new();
    for c in &cohort.test {
        let pred = segment_volume(&a, &b, &c.volume)?;
        reports.push(evaluate_case(&pred, c.labels.as_ref().expect("test labels"), iteration, cfg.eval.hd95)?);
    }
    write_metrics_csv(&run.join("metrics.csv"), &reports)?;
    let summary = summarize(&reports);
    if cfg.eval.plots {
        let dir = run.join("plots");
        mkdir(&dir)?;
        let p = dir.join("per_class_dsc.svg");
        plot_bars(&p, "test DSC per class", &class_names(summary.per_class_dsc.len()), &summary.per_class_dsc)?;
        plots.push(p);
        if let Ok(log) = read_losses_csv(&run.join("losses.csv")) {
            let series = |name: &str, f: &dyn Fn(&LossRecord) -> f64| {
                (name.to_string(), log.iter().map(|r| (r.iteration as f64, f(r))).collect::<Vec<_>>())
            };
            let p = dir.join("losses.svg");
            plot_lines(
                &p,
                "training loss",
                "iteration",
                &[
                    series("total A", &|r| r.a.total),
                    series("total B", &|r| r.b.total),
                    series("sup A", &|r| r.a.sup),
                    series("sup B", &|r| r.b.sup),
                ],
            )?;
            plots.push(p);
        }
        let pq = run.join("pseudo_quality.csv");
        if pq.exists() {
            let pts = evalkit::read_pseudo_csv(&pq)?;
            let p = dir.join("pseudo_quality.svg");
            plot_lines(
                &p,
                "pseudo-label DSC on unlabeled slices",
                "iteration",
                &[
                    ("model A".into(), pts.iter().map(|q| (q.iteration as f64, q.dsc_a)).collect()),
                    ("model B".into(), pts.iter().map(|q| (q.iteration as f64, q.dsc_b)).collect()),
                ],
            )?;
            plots.push(p);
        }
    }
    Ok(summary)
}

/// Labels of the labeled volumes propagated onto each test case by affine
/// registration; with several labeled volumes the source is picked by
/// cycle consistency.
fn eval_reg_only(cfg: &ExperimentConfig, cohort: &LoadedCohort, lay: &Layout) -> Result<EvalSummary> {
    let labeled: Vec<&Volume> = cohort
        .dataset
        .labeled_ids
        .iter()
        .map(|id| cohort.dataset.volume(*id))
        .collect::<Result<_>>()?;
    let mut table = TransformTable::new(spatreg::table::config_hash(&cfg.registration));
    for c in &cohort.test {
        let j = &c.volume;
        table.insert(j.id, j.id, SpatialTransform::identity())?;
        for q in &labeled {
            let fwd = register_affine(q, j, &cfg.registration)?.transform;
            table.insert(q.id, j.id, SpatialTransform::Affine(fwd))?;
            if labeled.len() > 1 {
                let back = register_affine(j, q, &cfg.registration)?.transform;
                table.insert(j.id, q.id, SpatialTransform::Affine(back))?;
            }
        }
    }
    let mut reports = Vec::new();
    for c in &cohort.test {
        let sel = regsup::select_best_labeled(&c.volume, &labeled, &table, &cfg.brs_weights)?;
        let prop = regsup::make_registered_labels(
            cohort.dataset.labels(sel.chosen)?,
            table.get(sel.chosen, c.volume.id)?,
            &c.volume.grid,
            c.volume.id,
        );
        reports.push(evaluate_case(&prop.labels, c.labels.as_ref().expect("test labels"), 0, cfg.eval.hd95)?);
    }
    let dir = lay.reg_only();
    mkdir(&dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &reports)?;
    Ok(summarize(&reports))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateReport {
    pub rows: Vec<AblationRow>,
    pub run_dirs: Vec<PathBuf>,
    pub csv: PathBuf,
}

/// Trains and evaluates every flag set under every seed, then tabulates.
/// Runs whose stored config and metrics already match are not repeated.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblateReport> {
    let lay = Layout::new(&cfg.out);
    load_cohort(&lay)?;
    for brs in [false, true] {
        let wanted = cfg.ablation.flag_sets.iter().any(|f| f.rsl && f.brs == brs);
        if wanted && !lay.rsl(brs).join("rsl_labels").join("index.json").exists() {
            prepare_rsl_mode(cfg, brs)?;
        }
    }
    let mut dirs = Vec::new();
    for flags in &cfg.ablation.flag_sets {
        for &seed in &cfg.ablation.seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.train.flags = *flags;
            run_cfg.train.seed = seed;
            let dir = lay.run(flags, seed);
            if !run_is_current(&run_cfg, &dir) {
                info!("training {}", dir.display());
                cmd_train(&run_cfg, false)?;
                let mut plots = Vec::new();
                let cohort = load_cohort(&lay)?;
                eval_run(&run_cfg, &cohort, &dir, &mut plots)?;
            }
            dirs.push(dir);
        }
    }
    let rows = ablation_table(&dirs)?;
    let csv = cfg.out.join("ablation.csv");
    write_ablation_csv(&csv, &rows)?;
    if cfg.eval.plots {
        let labels: Vec<String> = rows.iter().map(|r| r.flags.label()).collect();
        let values: Vec<f64> = rows.iter().map(|r| r.mean_dsc).collect();
        plot_bars(&cfg.out.join("ablation.svg"), "mean test DSC", &labels, &values)?;
    }
    Ok(AblateReport {
        rows,
        run_dirs: dirs,
        csv,
    })
}

fn run_is_current(cfg: &ExperimentConfig, dir: &Path) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join("experiment.json")) else {
        return false;
    };
    let Ok(stored) = serde_json::from_str::<ExperimentConfig>(&text) else {
        return false;
    };
    stored == *cfg && dir.join("metrics.csv").exists() && dir.join("model_b.xtck").exists()
}
