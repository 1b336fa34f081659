//! Synthetic dataset with the shape of a bladder MRI cohort.
//!
//! Each patient gets three unregistered sequences with independent slice
//! counts. Positives carry a lesion at a shared in-plane location, drawn at
//! an independent depth in every sequence and with sequence-specific
//! contrast: bright on DWI, dark on ADC, faint on T2. Clinical attributes
//! shift mildly with the label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{
    patient_dir, write_clinical, write_volume, ClassCounts, DatasetManifest, PatientEntry,
    MANIFEST_VERSION,
};
use crate::canon::canonical_json_pretty;
use crate::error::{HcvtError, Result};
use crate::preprocess::{ClinicalRecord, Sex};
use crate::volume::{Sequence, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n_patients: usize,
    pub prevalence: f64,
    pub seed: u64,
    /// 64x64 slices with 8..=24 slices instead of 280x280 with 13..=60.
    pub tiny: bool,
    pub force: bool,
}

impl SynthOptions {
    pub fn new(n_patients: usize, seed: u64) -> Self {
        SynthOptions {
            n_patients,
            prevalence: 0.62,
            seed,
            tiny: false,
            force: false,
        }
    }

    pub fn tiny(mut self) -> Self {
        self.tiny = true;
        self
    }

    pub fn native_size(&self) -> usize {
        if self.tiny {
            64
        } else {
            280
        }
    }

    pub fn depth_range(&self) -> [usize; 2] {
        if self.tiny {
            [8, 24]
        } else {
            [13, 60]
        }
    }

    pub fn positives(&self) -> usize {
        (self.n_patients as f64 * self.prevalence).round() as usize
    }
}

/// Where the lesion of one sequence sits along depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceLesion {
    pub depth: usize,
    pub z_center: f64,
    pub z_radius: f64,
}

/// Ground truth of a planted lesion, in native pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionTruth {
    pub native_size: usize,
    pub center_yx: [f64; 2],
    pub radius: f64,
    pub sequences: BTreeMap<Sequence, SequenceLesion>,
}

impl LesionTruth {
    /// In-plane bounding box `[y0, x0, y1, x1]` (inclusive) after resizing to
    /// `size x size`.
    pub fn bbox(&self, size: usize) -> [f64; 4] {
        let s = size as f64 / self.native_size as f64;
        let [cy, cx] = self.center_yx;
        let r = self.radius;
        [(cy - r) * s, (cx - r) * s, (cy + r) * s, (cx + r) * s]
    }

    /// Slice nearest to the lesion center once the sequence is resampled to
    /// `target_depth` slices.
    pub fn slice_after_siz(&self, seq: Sequence, target_depth: usize) -> Option<usize> {
        let l = self.sequences.get(&seq)?;
        if l.depth <= 1 || target_depth <= 1 {
            return Some(0);
        }
        let z = l.z_center * (target_depth - 1) as f64 / (l.depth - 1) as f64;
        Some((z.round() as usize).min(target_depth - 1))
    }
}

fn labels_for(n: usize, positives: usize, seed: u64) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| (i < positives) as u8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    labels.shuffle(&mut rng);
    labels
}

fn patient_id(i: usize) -> String {
    format!("P{i:04}")
}

fn clinical_for(labels: &[u8], seed: u64) -> Vec<ClinicalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let stage_neg = WeightedIndex::new([0.10, 0.40, 0.25, 0.15, 0.07, 0.03]).unwrap();
    let stage_pos = WeightedIndex::new([0.05, 0.25, 0.25, 0.22, 0.15, 0.08]).unwrap();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let pos = y == 1;
            let yf = y as f64;
            let age = Normal::new(63.0 + 3.0 * yf, 9.0).unwrap().sample(&mut rng);
            let sex = if rng.random::<f64>() < 0.78 {
                Sex::Male
            } else {
                Sex::Female
            };
            let hosp_mean: f64 = if pos { 5.0 } else { 3.0 };
            let hosp = Exp::new(1.0 / hosp_mean).unwrap().sample(&mut rng);
            let size = LogNormal::new(1.8f64.ln() + 0.35 * yf, 0.5)
                .unwrap()
                .sample(&mut rng);
            let multiple = rng.random::<f64>() < 0.30 + 0.15 * yf;
            let t_stage = if pos {
                stage_pos.sample(&mut rng)
            } else {
                stage_neg.sample(&mut rng)
            };
            let grade = rng.random::<f64>() < 0.45 + 0.20 * yf;
            ClinicalRecord {
                patient_id: patient_id(i),
                age: age.round().clamp(38.0, 83.0) as u32,
                sex,
                hospitalizations: (1.0 + hosp.floor()).min(42.0) as u32,
                tumor_size_cm: (size.clamp(0.3, 8.3) * 100.0).round() / 100.0,
                multiple_lesions: multiple as u8,
                t_stage: t_stage as u8,
                grade: grade as u8,
                label: y,
            }
        })
        .collect()
}

/// Clinical table of the cohort `generate_synthetic` would write, without
/// rendering any volume.
pub fn generate_clinical(n_patients: usize, prevalence: f64, seed: u64) -> Vec<ClinicalRecord> {
    let positives = (n_patients as f64 * prevalence).round() as usize;
    clinical_for(&labels_for(n_patients, positives, seed), seed)
}

/// Smooth noise: a coarse Gaussian grid bilinearly upsampled to `n x n`.
fn smooth_noise(rng: &mut ChaCha8Rng, n: usize, cell: usize) -> Vec<f32> {
    let g = n / cell + 2;
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let coarse: Vec<f32> = (0..g * g).map(|_| normal.sample(rng)).collect();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..n {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let a = coarse[y0 * g + x0] * (1.0 - tx) + coarse[y0 * g + x0 + 1] * tx;
            let b = coarse[(y0 + 1) * g + x0] * (1.0 - tx) + coarse[(y0 + 1) * g + x0 + 1] * tx;
            out[y * n + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

struct Anatomy {
    center: (f64, f64),
    axes: (f64, f64),
    lesion: Option<((f64, f64), f64, f64)>,
}

/// Intensities per sequence: (body, urine, lesion contrast).
fn contrast(seq: Sequence) -> (f32, f32, f32) {
    match seq {
        Sequence::Adc => (0.35, 0.72, -0.42),
        Sequence::T2 => (0.30, 0.78, -0.12),
        Sequence::Dwi => (0.22, 0.12, 0.70),
    }
}

fn render(
    rng: &mut ChaCha8Rng,
    seq: Sequence,
    depth: usize,
    n: usize,
    anatomy: &Anatomy,
    lesion_z: Option<(f64, f64)>,
) -> Array3<f32> {
    let (body, urine, lesion_c) = contrast(seq);
    let nf = n as f64;
    let (cy, cx) = anatomy.center;
    let (ay, ax) = anatomy.axes;
    let bladder_z = depth as f64 / 2.0 + rng.random_range(-0.1..0.1) * depth as f64;
    let cell = (n / 8).max(2);
    let white = Normal::new(0.0f32, 0.02).unwrap();
    let mut vol = Array3::<f32>::zeros((depth, n, n));
    for z in 0..depth {
        let noise = smooth_noise(rng, n, cell);
        let t = (z as f64 - bladder_z) / (0.55 * depth as f64);
        let shrink = (1.0 - t * t).max(0.15).sqrt();
        let (sy, sx) = (ay * shrink, ax * shrink);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64, x as f64);
                let by = (fy - nf / 2.0) / (0.45 * nf);
                let bx = (fx - nf / 2.0) / (0.47 * nf);
                if by * by + bx * bx > 1.0 {
                    continue;
                }
                let ey = (fy - cy) / sy;
                let ex = (fx - cx) / sx;
                let inside = ey * ey + ex * ex <= 1.0;
                let mut v = if inside { urine } else { body };
                v += 0.06 * noise[y * n + x] + white.sample(rng);
                if let (Some(((ly, lx), r, rz)), Some((zc, _))) = (anatomy.lesion, lesion_z) {
                    let d2 = ((fy - ly) / r).powi(2)
                        + ((fx - lx) / r).powi(2)
                        + ((z as f64 - zc) / rz).powi(2);
                    let d = d2.sqrt();
                    let w = ((1.0 - d) / 0.25).clamp(0.0, 1.0) as f32;
                    v += lesion_c * w;
                }
                vol[[z, y, x]] = v.clamp(0.0, 0.95);
            }
        }
        // fixed bright landmark so min-max scaling does not depend on the lesion
        let (r0, r1) = ((0.84 * nf) as usize, (0.88 * nf) as usize);
        let (c0, c1) = ((0.42 * nf) as usize, (0.58 * nf) as usize);
        for y in r0..r1 {
            for x in c0..c1 {
                vol[[z, y, x]] = 1.0;
            }
        }
    }
    vol
}

fn synth_patient(
    opts: &SynthOptions,
    index: usize,
    label: u8,
) -> (Vec<Volume>, Option<LesionTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1000 + index as u64);
    let n = opts.native_size();
    let nf = n as f64;
    let [dmin, dmax] = opts.depth_range();
    let center = (
        nf / 2.0 + rng.random_range(-0.05..0.05) * nf,
        nf / 2.0 + rng.random_range(-0.05..0.05) * nf,
    );
    let axes = (
        rng.random_range(0.26..0.32) * nf,
        rng.random_range(0.30..0.36) * nf,
    );
    let lesion = (label == 1).then(|| {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let at = (
            center.0 + 0.7 * axes.0 * phi.sin(),
            center.1 + 0.7 * axes.1 * phi.cos(),
        );
        (at, rng.random_range(0.15..0.19) * nf, 0.0)
    });
    let id = patient_id(index);
    let mut volumes = Vec::with_capacity(3);
    let mut seq_truth = BTreeMap::new();
    for seq in Sequence::ALL {
        let depth = rng.random_range(dmin..=dmax);
        let mut anatomy = Anatomy {
            center,
            axes,
            lesion,
        };
        let lesion_z = lesion.map(|_| {
            let zc = rng.random_range(0.3..0.7) * (depth - 1) as f64;
            let rz = (0.22 * depth as f64).max(2.0);
            (zc, rz)
        });
        if let (Some((at, r, _)), Some((zc, rz))) = (lesion, lesion_z) {
            anatomy.lesion = Some((at, r, rz));
            seq_truth.insert(
                seq,
                SequenceLesion {
                    depth,
                    z_center: zc,
                    z_radius: rz,
                },
            );
        }
        let vox = render(&mut rng, seq, depth, n, &anatomy, lesion_z);
        volumes.push(Volume::new(vox, seq, id.clone()));
    }
    let truth = lesion.map(|(at, r, _)| LesionTruth {
        native_size: n,
        center_yx: [at.0, at.1],
        radius: r,
        sequences: seq_truth,
    });
    (volumes, truth)
}

/// Renders one patient in memory (volumes plus lesion ground truth).
pub fn synthesize_patient(
    opts: &SynthOptions,
    index: usize,
) -> (Vec<Volume>, Option<LesionTruth>, ClinicalRecord) {
    let labels = labels_for(opts.n_patients, opts.positives(), opts.seed);
    let clinical = clinical_for(&labels, opts.seed);
    let (v, t) = synth_patient(opts, index, labels[index]);
    (v, t, clinical[index].clone())
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| HcvtError::io(out, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(HcvtError::Validation(format!(
                    "output directory {} exists and is not empty (use --force to overwrite)",
                    out.display()
                )));
            }
            if !out.join("manifest.json").exists() {
                return Err(HcvtError::Validation(format!(
                    "refusing to overwrite {}: it does not look like a generated dataset",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| HcvtError::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| HcvtError::io(out, e))
}

/// Writes a synthetic cohort to `out` and returns its manifest. The manifest
/// is written last.
pub fn generate_synthetic(opts: &SynthOptions, out: &Path) -> Result<DatasetManifest> {
    if opts.n_patients < 10 {
        return Err(HcvtError::Validation(format!(
            "need at least 10 patients, got {}",
            opts.n_patients
        )));
    }
    if !(0.0..=1.0).contains(&opts.prevalence) {
        return Err(HcvtError::Validation(format!(
            "prevalence {} outside [0, 1]",
            opts.prevalence
        )));
    }
    prepare_out_dir(out, opts.force)?;
    let positives = opts.positives();
    let labels = labels_for(opts.n_patients, positives, opts.seed);
    let clinical = clinical_for(&labels, opts.seed);
    let mut patients = Vec::with_capacity(opts.n_patients);
    let mut lesions = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let (volumes, truth) = synth_patient(opts, i, label);
        let id = patient_id(i);
        let dir = patient_dir(out, &id);
        let mut shapes = BTreeMap::new();
        for v in &volumes {
            write_volume(&dir, v)?;
            let (d, h, w) = v.voxels.dim();
            shapes.insert(v.sequence, [d, h, w]);
        }
        if let Some(t) = truth {
            lesions.insert(id.clone(), t);
        }
        patients.push(PatientEntry { id, label, shapes });
    }
    write_clinical(&out.join("clinical.csv"), &clinical)?;
    let lp = out.join("lesions.json");
    fs::write(&lp, canonical_json_pretty(&lesions)? + "\n").map_err(|e| HcvtError::io(&lp, e))?;
    let n = opts.native_size();
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        format_version: MANIFEST_VERSION.into(),
        n_patients: opts.n_patients,
        class_counts: ClassCounts {
            negative: opts.n_patients - positives,
            positive: positives,
        },
        native_size: [n, n],
        depth_range: opts.depth_range(),
        seed: opts.seed,
        patients,
    };
    let mp = out.join("manifest.json");
    fs::write(&mp, canonical_json_pretty(&manifest)? + "\n").map_err(|e| HcvtError::io(&mp, e))?;
    Ok(manifest)
}
