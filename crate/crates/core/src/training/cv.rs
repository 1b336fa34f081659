//! k-fold cross-validation runs and their on-disk reports.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_fold, Cohort, FoldData, FoldResult, Monitor, TrainConfig};
use crate::canon::{canonical_json_pretty, config_hash};
use crate::dataio::{kfold_split, FoldPlan};
use crate::error::{HcvtError, Result};
use crate::metrics::{self, Confusion, FoldMetrics, MeanStd};
use crate::model::{Model, ModelConfig, Variant};
use crate::preprocess::NormStats;

pub const PAIRED_TEST: &str = "paired-t";

/// Worker threads: `HCVT_THREADS` when set, else the logical core count.
pub fn thread_count() -> usize {
    std::env::var("HCVT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Splits `ids` into (train, validation), taking `fraction` of each class
/// (at least one) after a seeded shuffle.
pub fn carve_validation(
    ids: &[(String, u8)],
    fraction: f64,
    seed: u64,
    stream: u64,
) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [1u8, 0] {
        let mut members: Vec<String> = ids
            .iter()
            .filter(|(_, y)| *y == class)
            .map(|(id, _)| id.clone())
            .collect();
        members.sort();
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(members.len().saturating_sub(1));
        val.extend(members.drain(..n_val));
        train.extend(members);
    }
    train.sort();
    val.sort();
    (train, val)
}

/// Patient ids and clinical normalization of one fold, persisted as
/// `fold{i}/split.json` so a fold can be re-evaluated from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub norm_stats: NormStats,
}

impl FoldSplit {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HcvtError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HcvtError::format(path, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub status: FoldStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub first_epoch_loss: Option<f64>,
    pub confusion: Option<Confusion>,
    pub checkpoint_hash: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl FoldEntry {
    pub fn metrics(&self) -> Option<FoldMetrics> {
        Some(FoldMetrics {
            auc: self.auc?,
            precision: self.precision,
            recall: self.recall,
        })
    }
}

/// Summary in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFlat {
    pub auc_mean: f64,
    pub auc_std: f64,
    pub precision_mean: Option<f64>,
    pub precision_std: Option<f64>,
    pub recall_mean: Option<f64>,
    pub recall_std: Option<f64>,
    pub n_folds: usize,
}

impl SummaryFlat {
    fn from(s: &metrics::MetricSummary) -> Self {
        SummaryFlat {
            auc_mean: s.auc.mean,
            auc_std: s.auc.std,
            precision_mean: s.precision.map(|m| m.mean),
            precision_std: s.precision.map(|m| m.std),
            recall_mean: s.recall.map(|m| m.mean),
            recall_std: s.recall.map(|m| m.std),
            n_folds: s.n_folds,
        }
    }

    pub fn line(&self) -> String {
        let ms = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => MeanStd { mean: m, std: s }.to_string(),
            _ => "undefined".into(),
        };
        format!(
            "AUC {} | Precision {} | Recall {} ({} folds)",
            MeanStd {
                mean: self.auc_mean,
                std: self.auc_std
            },
            ms(self.precision_mean, self.precision_std),
            ms(self.recall_mean, self.recall_std),
            self.n_folds
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_run: String,
    pub p_value: f64,
    pub t_statistic: Option<f64>,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub val_fraction: f64,
    pub monitor: Monitor,
    pub per_fold: Vec<FoldEntry>,
    pub summary: Option<SummaryFlat>,
    pub comparisons: Vec<Comparison>,
    pub config_hash: String,
    pub fold_plan_hash: String,
}

impl RunReport {
    pub fn failed_folds(&self) -> Vec<&FoldEntry> {
        self.per_fold
            .iter()
            .filter(|f| f.status == FoldStatus::Failed)
            .collect()
    }

    pub fn fold_aucs(&self) -> Option<Vec<f64>> {
        self.per_fold.iter().map(|f| f.auc).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("report.json");
        fs::write(&path, canonical_json_pretty(self)? + "\n").map_err(|e| HcvtError::io(&path, e))
    }
}

pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| HcvtError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HcvtError::format(&path, e.to_string()))
}

fn load_plan(dir: &Path) -> Result<FoldPlan> {
    let path = dir.join("folds.json");
    let text = fs::read_to_string(&path).map_err(|e| HcvtError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HcvtError::format(&path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, canonical_json_pretty(value)? + "\n").map_err(|e| HcvtError::io(path, e))
}

fn fold_model_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

fn run_fold(
    cohort: &Cohort,
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(FoldSplit, FoldResult)> {
    let labels = cohort.dataset.manifest.labels();
    let (train_all, test) = plan.split(fold);
    let tagged: Vec<(String, u8)> = train_all.iter().map(|id| (id.clone(), labels[id])).collect();
    let (train, val) = carve_validation(&tagged, train_cfg.val_fraction, train_cfg.seed, fold as u64);
    let stats = cohort.norm_stats(&train)?;
    let split = FoldSplit {
        fold,
        train,
        val,
        test,
        norm_stats: stats,
    };
    let data = FoldData {
        train: cohort.samples(&split.train, &split.norm_stats)?,
        val: cohort.samples(&split.val, &split.norm_stats)?,
        test: cohort.samples(&split.test, &split.norm_stats)?,
    };
    data.check()?;
    let dir = out.map(|o| o.join(format!("fold{fold}")));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| HcvtError::io(d, e))?;
        write_json(&d.join("split.json"), &split)?;
    }
    let model = Model::init(model_cfg.clone(), fold_model_seed(train_cfg.seed, fold))?;
    log::info!(
        "fold {fold}: {} train / {} val / {} test patients",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let result = train_fold(model, &data, train_cfg, fold as u64, dir.as_deref())?;
    Ok((split, result))
}

/// Stratified k-fold run. Each fold trains a fresh model on its training
/// patients minus a validation carve-out and is scored on its test fold.
/// A failing fold is recorded as failed; the others still run. With `out`
/// set, writes `config.json`, `folds.json`, `fold{i}/{ckpt,history.csv,split.json}`
/// and `report.json`.
pub fn run_cv(
    cohort: &Cohort,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
    out: Option<&Path>,
) -> Result<RunReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if cohort.input != model_cfg.input {
        return Err(HcvtError::Config(
            "cohort was prepared for a different input geometry".into(),
        ));
    }
    let plan = kfold_split(&cohort.dataset.manifest, k, train_cfg.seed)?;
    let run_cfg = RunConfig {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        k,
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| HcvtError::io(o, e))?;
        write_json(&o.join("config.json"), &run_cfg)?;
        write_json(&o.join("folds.json"), &plan)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count().min(k))
        .build()
        .map_err(|e| HcvtError::Config(e.to_string()))?;
    let results: Vec<Result<(FoldSplit, FoldResult)>> = pool.install(|| {
        (0..k)
            .into_par_iter()
            .map(|i| run_fold(cohort, &plan, i, model_cfg, train_cfg, out))
            .collect()
    });
    let per_fold: Vec<FoldEntry> = results
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok((split, f)) => FoldEntry {
                fold: i,
                status: FoldStatus::Ok,
                error: None,
                auc: Some(f.test.metrics.auc).filter(|a| a.is_finite()),
                precision: f.test.metrics.precision,
                recall: f.test.metrics.recall,
                epochs: f.epochs_run,
                best_epoch: f.best_epoch,
                best_val_auc: Some(f.best_val_auc),
                best_val_loss: Some(f.best_val_loss),
                first_epoch_loss: f.history.first().map(|h| h.train_loss),
                confusion: Some(f.test.confusion),
                checkpoint_hash: f.checkpoint_hash.clone(),
                n_train: split.train.len(),
                n_val: split.val.len(),
                n_test: split.test.len(),
            },
            Err(e) => {
                log::error!("fold {i} failed: {e}");
                FoldEntry {
                    fold: i,
                    status: FoldStatus::Failed,
                    error: Some(e.to_string()),
                    auc: None,
                    precision: None,
                    recall: None,
                    epochs: 0,
                    best_epoch: 0,
                    best_val_auc: None,
                    best_val_loss: None,
                    first_epoch_loss: None,
                    confusion: None,
                    checkpoint_hash: None,
                    n_train: 0,
                    n_val: 0,
                    n_test: plan.folds[i].len(),
                }
            }
        })
        .collect();
    let ok: Vec<FoldMetrics> = per_fold.iter().filter_map(|f| f.metrics()).collect();
    let summary = if ok.is_empty() {
        None
    } else {
        Some(SummaryFlat::from(&metrics::aggregate(&ok)?))
    };
    let report = RunReport {
        variant: model_cfg.variant,
        k,
        seed: train_cfg.seed,
        stratified: plan.stratified,
        val_fraction: train_cfg.val_fraction,
        monitor: train_cfg.monitor,
        per_fold,
        summary,
        comparisons: Vec::new(),
        config_hash: config_hash(&run_cfg)?,
        fold_plan_hash: config_hash(&plan)?,
    };
    if let Some(o) = out {
        report.save(o)?;
    }
    Ok(report)
}

/// Paired test of run `a` against baseline run `b`. Both runs must share
/// one fold plan and have every fold scored.
pub fn compare_runs(a: &Path, b: &Path) -> Result<(RunReport, RunReport, Comparison)> {
    let (ra, rb) = (load_report(a)?, load_report(b)?);
    if load_plan(a)? != load_plan(b)? || ra.fold_plan_hash != rb.fold_plan_hash {
        return Err(HcvtError::Validation(format!(
            "runs {} and {} use different fold plans; a paired comparison needs the same folds",
            a.display(),
            b.display()
        )));
    }
    let aucs = |r: &RunReport, p: &Path| {
        r.fold_aucs().ok_or_else(|| {
            HcvtError::Validation(format!("run {} has folds without a test AUC", p.display()))
        })
    };
    let (xa, xb) = (aucs(&ra, a)?, aucs(&rb, b)?);
    let cmp = Comparison {
        baseline_run: run_name(b),
        p_value: metrics::paired_pvalue(&xa, &xb)?,
        t_statistic: metrics::paired_t(&xa, &xb),
        test: PAIRED_TEST.into(),
    };
    Ok((ra, rb, cmp))
}

fn run_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}
