//! Single-fold training loop and k-fold orchestration.

mod cv;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cv::{
    carve_validation, compare_runs, load_report, run_cv, thread_count, Comparison, FoldEntry,
    FoldSplit, FoldStatus, RunReport, SummaryFlat,
};

use crate::autograd::{Graph, ParamStore};
use crate::dataio::Dataset;
use crate::error::{HcvtError, Result};
use crate::metrics::{self, Confusion, FoldMetrics};
use crate::model::{save_checkpoint, InputConfig, Model, Sample};
use crate::preprocess::{self, NormStats};
use crate::real::Real;
use crate::volume::Volume;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Highest validation AUC, ties broken by lower validation loss.
    ValAuc,
    /// Lowest validation loss.
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Beta(alpha, alpha) mixing; 0 disables mixup.
    pub mixup_alpha: f64,
    /// Random in-plane rotation of every training volume.
    pub rotate: bool,
    pub monitor: Monitor,
    /// Share of each fold's training patients held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            max_epochs: 400,
            patience: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mixup_alpha: 0.2,
            rotate: true,
            monitor: Monitor::ValAuc,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk-scale model. Its validation split is a
    /// dozen patients, too few for a stable AUC, so it monitors the loss.
    pub fn tiny() -> Self {
        TrainConfig {
            lr: 5e-4,
            max_epochs: 40,
            patience: 15,
            monitor: Monitor::ValLoss,
            ..TrainConfig::default()
        }
    }

    /// No rotation, no mixup.
    pub fn without_augmentation(mut self) -> Self {
        self.rotate = false;
        self.mixup_alpha = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HcvtError::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.mixup_alpha >= 0.0) {
            return bad(format!("mixup_alpha must be >= 0, got {}", self.mixup_alpha));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return bad(format!("val_fraction must lie in (0, 0.5), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of probabilities against (soft) labels.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    crate::error::contract!(
        p.len() == y.len() && !p.is_empty(),
        "bce_loss: {} probabilities, {} labels",
        p.len(),
        y.len()
    );
    let mut clamped = 0;
    let mut total = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        crate::error::contract!((0.0..=1.0).contains(&y), "bce_loss: label {y} outside [0, 1]");
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        if q != p {
            clamped += 1;
        }
        total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
    }
    if clamped > 0 {
        log::debug!("bce_loss: clamped {clamped} probabilities");
    }
    Ok(total / p.len() as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Array2<F>>>,
    v: Vec<Option<Array2<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Applies one step. `grads[i]` is the gradient of parameter `i`;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<Array2<F>>]) {
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.t));
        let c2 = F::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (F::one() - b1) * g);
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (F::one() - b2) * g * g);
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p = *p - lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// A preprocessed patient with its hard label.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub sample: Sample,
    pub label: u8,
}

/// Volumes of a whole dataset after the deterministic pipeline (SIZ depth
/// resampling, slice resize, min-max scaling), ready to be paired with
/// fold-specific clinical normalization.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub dataset: Dataset,
    pub input: InputConfig,
    volumes: HashMap<String, Vec<Volume>>,
}

impl Cohort {
    pub fn prepare(dataset: Dataset, input: &InputConfig) -> Result<Self> {
        let ids = dataset.manifest.ids();
        Self::prepare_ids(dataset, input, &ids)
    }

    /// Like [`Cohort::prepare`] but only for `ids`.
    pub fn prepare_ids(dataset: Dataset, input: &InputConfig, ids: &[String]) -> Result<Self> {
        use rayon::prelude::*;
        let prepared: Vec<(String, Vec<Volume>)> = ids
            .par_iter()
            .map(|id| {
                let vols = dataset
                    .load_volumes(id)?
                    .iter()
                    .map(|v| preprocess::prepare_volume(v, input.depth, input.size))
                    .collect::<Result<Vec<_>>>()?;
                Ok((id.clone(), vols))
            })
            .collect::<Result<_>>()?;
        Ok(Cohort {
            dataset,
            input: input.clone(),
            volumes: prepared.into_iter().collect(),
        })
    }

    /// Clinical normalization fit on `train_ids` only.
    pub fn norm_stats(&self, train_ids: &[String]) -> Result<NormStats> {
        let recs = train_ids
            .iter()
            .map(|id| self.dataset.record(id))
            .collect::<Result<Vec<_>>>()?;
        NormStats::fit(&recs)
    }

    pub fn samples(&self, ids: &[String], stats: &NormStats) -> Result<Vec<Labeled>> {
        ids.iter()
            .map(|id| {
                let rec = self.dataset.record(id)?;
                let volumes = self
                    .volumes
                    .get(id)
                    .ok_or_else(|| HcvtError::Validation(format!("unknown patient {id}")))?
                    .clone();
                Ok(Labeled {
                    sample: Sample {
                        patient_id: id.clone(),
                        volumes,
                        clinical: preprocess::normalize_clinical(rec, stats)?,
                    },
                    label: rec.label,
                })
            })
            .collect()
    }
}

/// Train / validation / test samples of one fold.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub train: Vec<Labeled>,
    pub val: Vec<Labeled>,
    pub test: Vec<Labeled>,
}

impl FoldData {
    /// Errors when any patient appears in two splits or a split is empty.
    pub fn check(&self) -> Result<()> {
        for (name, s) in [("train", &self.train), ("validation", &self.val), ("test", &self.test)] {
            if s.is_empty() {
                return Err(HcvtError::Config(format!("{name} split is empty")));
            }
        }
        let ids = |s: &[Labeled]| -> HashSet<String> {
            s.iter().map(|l| l.sample.patient_id.clone()).collect()
        };
        let (tr, va, te) = (ids(&self.train), ids(&self.val), ids(&self.test));
        for (a, b, what) in [(&tr, &te, "train/test"), (&tr, &va, "train/validation"), (&va, &te, "validation/test")] {
            if let Some(id) = a.intersection(b).next() {
                return Err(HcvtError::Contract(format!("patient {id} leaks across {what}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

/// Held-out predictions and metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
    pub loss: f64,
    pub metrics: FoldMetrics,
    pub confusion: Confusion,
}

/// Predictions of `model` on `data` with dropout off. AUC is NaN when the
/// split holds a single class.
pub fn evaluate<F: Real>(model: &Model<F>, data: &[Labeled]) -> Result<Evaluation> {
    let mut probabilities = Vec::with_capacity(data.len());
    for l in data {
        let p = model.predict(&l.sample)?.probability;
        if !p.is_finite() {
            return Err(HcvtError::Diverged(format!(
                "non-finite prediction for patient {}",
                l.sample.patient_id
            )));
        }
        probabilities.push(p);
    }
    let labels: Vec<u8> = data.iter().map(|l| l.label).collect();
    let soft: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let loss = bce_loss(&probabilities, &soft)?;
    let auc = match metrics::auc(&probabilities, &labels) {
        Ok(a) => a,
        Err(HcvtError::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let confusion = Confusion::at(&probabilities, &labels, metrics::DEFAULT_THRESHOLD)?;
    Ok(Evaluation {
        ids: data.iter().map(|l| l.sample.patient_id.clone()).collect(),
        probabilities,
        labels,
        loss,
        metrics: FoldMetrics {
            auc,
            precision: confusion.precision(),
            recall: confusion.recall(),
        },
        confusion,
    })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation AUC of the best epoch.
    pub best_val_auc: f64,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub test: Evaluation,
    /// Set when an output directory was given.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
}

/// Loss and gradients of one batch, each sample on its own training graph.
fn batch_step(
    model: &Model<f32>,
    batch: &[(Sample, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Option<Array2<f32>>>)> {
    let n = model.params().len();
    let mut acc: Vec<Option<Array2<f32>>> = vec![None; n];
    let scale = 1.0 / batch.len() as f32;
    let mut loss = 0.0;
    for (sample, y) in batch {
        let mut g = Graph::training(model.params(), ChaCha8Rng::seed_from_u64(rng.random()));
        let t = model.forward(&mut g, sample)?;
        let l = g.bce_with_logits(t.logit, *y as f32);
        loss += g.scalar(l) as f64;
        let grads = g.backward(l);
        for (id, gr) in grads.params() {
            match &mut acc[id.index()] {
                Some(a) => a.scaled_add(scale, gr),
                slot => *slot = Some(gr * scale),
            }
        }
    }
    Ok((loss / batch.len() as f64, acc))
}

/// Trains `model` on `data.train`, keeping the parameters of the epoch that
/// scores best on the configured monitor, and evaluates that state on
/// `data.test`. Stops once `patience` epochs pass
/// without improvement.
pub fn train_fold(
    mut model: Model<f32>,
    data: &FoldData,
    cfg: &TrainConfig,
    stream: u64,
    out_dir: Option<&Path>,
) -> Result<FoldResult> {
    cfg.validate()?;
    data.check()?;
    let test_ids: HashSet<&str> = data.test.iter().map(|l| l.sample.patient_id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut adam = Adam::new(cfg, model.params().len());
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<(Sample, f64)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let l = &data.train[i];
                if test_ids.contains(l.sample.patient_id.as_str()) {
                    return Err(HcvtError::Contract(format!(
                        "test patient {} reached a training batch",
                        l.sample.patient_id
                    )));
                }
                let mut s = l.sample.clone();
                if cfg.rotate {
                    let angle = preprocess::sample_angle(&mut rng);
                    for v in s.volumes.iter_mut() {
                        *v = preprocess::rotate(v, angle);
                    }
                }
                batch.push((s, l.label as f64));
            }
            if cfg.mixup_alpha > 0.0 && batch.len() > 1 {
                let mut partner = batch.clone();
                partner.shuffle(&mut rng);
                batch = preprocess::mixup(&batch, &partner, cfg.mixup_alpha, &mut rng)?.0;
            }
            let (loss, grads) = batch_step(&model, &batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(HcvtError::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (lr {})",
                    cfg.lr
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            adam.step(model.params_mut(), &grads);
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val = evaluate(&model, &data.val).map_err(|e| match e {
            HcvtError::Diverged(m) => {
                HcvtError::Diverged(format!("{m} after epoch {epoch} (lr {})", cfg.lr))
            }
            other => other,
        })?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_auc: val.metrics.auc,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, val loss {:.4}, val AUC {:.4}",
            val.loss,
            val.metrics.auc
        );
        history.push(rec);
        let auc = if val.metrics.auc.is_nan() { 0.0 } else { val.metrics.auc };
        let improved = match (&best, cfg.monitor) {
            (None, _) => true,
            (Some((b_auc, b_loss, _, _)), Monitor::ValAuc) => {
                auc > *b_auc || (auc == *b_auc && val.loss < *b_loss)
            }
            (Some((_, b_loss, _, _)), Monitor::ValLoss) => val.loss < *b_loss,
        };
        if improved {
            best = Some((auc, val.loss, epoch, model.params().clone()));
        }
        let best_epoch = best.as_ref().unwrap().2;
        if epoch - best_epoch >= cfg.patience {
            log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }

    let (best_val_auc, best_val_loss, best_epoch, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    let test = evaluate(&model, &data.test)?;
    let (checkpoint, checkpoint_hash) = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| HcvtError::io(dir, e))?;
            let path = dir.join("ckpt");
            let hash = save_checkpoint(&model, &path)?;
            write_history(&dir.join("history.csv"), &history)?;
            (Some(path), Some(hash))
        }
        None => (None, None),
    };
    Ok(FoldResult {
        model,
        history,
        best_epoch,
        best_val_auc,
        best_val_loss,
        epochs_run,
        test,
        checkpoint,
        checkpoint_hash,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HcvtError::format(path, e.to_string()))?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HcvtError::io(path, e))?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HcvtError::format(path, e.to_string()))?;
    r.deserialize().map(|x| x.map_err(HcvtError::from)).collect()
}

#[cfg(test)]
mod tests;
