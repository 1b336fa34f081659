//! Volume and clinical preprocessing.
//!
//! Evaluation path: [`siz_resample`] → [`resize_slices`] → [`min_max`].
//! Training adds [`random_rotate`] per volume and [`mixup`] per batch.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{contract, HcvtError, Result};
use crate::model::{Sample, CLINICAL_FEATURES};
use crate::volume::Volume;

/// Cubic B-spline coefficients of `f` under mirror (whole-sample symmetric)
/// extension. Solves the tridiagonal interpolation system exactly.
fn spline_coefficients(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n == 1 {
        return f.to_vec();
    }
    // rows: (c[k-1] + 4 c[k] + c[k+1]) / 6 = f[k]; mirror folds the ends
    let mut sub = vec![1.0; n];
    let mut sup = vec![1.0; n];
    let diag = vec![4.0; n];
    sup[0] = 2.0;
    sub[n - 1] = 2.0;
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = sup[0] / diag[0];
    dp[0] = 6.0 * f[0] / diag[0];
    for k in 1..n {
        let m = diag[k] - sub[k] * cp[k - 1];
        cp[k] = if k + 1 < n { sup[k] / m } else { 0.0 };
        dp[k] = (6.0 * f[k] - sub[k] * dp[k - 1]) / m;
    }
    let mut c = vec![0.0; n];
    c[n - 1] = dp[n - 1];
    for k in (0..n - 1).rev() {
        c[k] = dp[k] - cp[k] * c[k + 1];
    }
    c
}

fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Evaluates the cubic spline with coefficients `c` at `x`.
fn spline_eval(c: &[f64], x: f64) -> f64 {
    let n = c.len();
    let base = x.floor() as isize;
    (base - 1..=base + 2)
        .map(|k| c[mirror(k, n)] * bspline3(x - k as f64))
        .sum()
}

/// Resamples `f` to `m` points, sample `i` taken at `i (n-1)/(m-1)`.
pub fn spline_zoom_1d(f: &[f64], m: usize) -> Vec<f64> {
    let n = f.len();
    if m == 1 {
        return vec![f[0]];
    }
    let c = spline_coefficients(f);
    let step = if n > 1 {
        (n - 1) as f64 / (m - 1) as f64
    } else {
        0.0
    };
    (0..m).map(|i| spline_eval(&c, i as f64 * step)).collect()
}

/// Spline-interpolated zoom along depth to `target_depth` slices.
pub fn siz_resample(v: &Volume, target_depth: usize) -> Result<Volume> {
    contract!(target_depth >= 1, "target depth must be at least 1");
    contract!(v.depth() >= 1, "volume {} {} has no slices", v.patient_id, v.sequence);
    if v.depth() == target_depth {
        return Ok(v.clone());
    }
    let (d, h, w) = v.voxels.dim();
    let mut out = Array3::<f32>::zeros((target_depth, h, w));
    let mut column = vec![0.0; d];
    for y in 0..h {
        for x in 0..w {
            for (z, c) in column.iter_mut().enumerate() {
                *c = v.voxels[[z, y, x]] as f64;
            }
            for (z, val) in spline_zoom_1d(&column, target_depth).into_iter().enumerate() {
                out[[z, y, x]] = val as f32;
            }
        }
    }
    Ok(v.with_voxels(out))
}

/// Bilinear per-slice resize to `size x size` with half-pixel centers.
pub fn resize_slices(v: &Volume, size: usize) -> Result<Volume> {
    let (d, h, w) = v.voxels.dim();
    contract!(
        h >= 16 && w >= 16,
        "slices of {} {} are {h}x{w}, need at least 16x16",
        v.patient_id,
        v.sequence
    );
    if h == size && w == size {
        return Ok(v.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, size), taps(w, size));
    let mut out = Array3::<f32>::zeros((d, size, size));
    for z in 0..d {
        let src = v.voxels.index_axis(Axis(0), z);
        let mut dst = out.index_axis_mut(Axis(0), z);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(v.with_voxels(out))
}

/// Per-volume min-max scaling to `[0, 1]`; constant volumes become zeros.
pub fn min_max(v: &Volume) -> Volume {
    let lo = v.voxels.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return v.with_voxels(Array3::zeros(v.voxels.dim()));
    }
    v.with_voxels(v.voxels.mapv(|x| ((x - lo) / range).clamp(0.0, 1.0)))
}

/// Deterministic evaluation-time pipeline.
pub fn prepare_volume(v: &Volume, depth: usize, size: usize) -> Result<Volume> {
    let v = siz_resample(v, depth)?;
    let v = resize_slices(&v, size)?;
    Ok(min_max(&v))
}

pub const MAX_ROTATION_DEG: f64 = 30.0;

/// Rotates every slice by `degrees` about the slice center (bilinear,
/// zero fill).
pub fn rotate(v: &Volume, degrees: f64) -> Volume {
    if degrees == 0.0 {
        return v.clone();
    }
    let (d, h, w) = v.voxels.dim();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::<f32>::zeros((d, h, w));
    let at = |z: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            v.voxels[[z, y as usize, x as usize]]
        }
    };
    for oy in 0..h {
        for ox in 0..w {
            let (dy, dx) = (oy as f64 - cy, ox as f64 - cx);
            // inverse map: rotate the output coordinate by -theta
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as isize, sy.floor() as isize);
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for z in 0..d {
                let top = at(z, y0, x0) * (1.0 - fx) + at(z, y0, x0 + 1) * fx;
                let bot = at(z, y0 + 1, x0) * (1.0 - fx) + at(z, y0 + 1, x0 + 1) * fx;
                out[[z, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    v.with_voxels(out)
}

pub fn sample_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)
}

/// One uniform angle in `[-30, 30]` degrees for the whole volume.
pub fn random_rotate<R: Rng + ?Sized>(v: &Volume, rng: &mut R) -> Volume {
    rotate(v, sample_angle(rng))
}

/// `lambda * a + (1 - lambda) * b` for every volume and the clinical vector.
pub fn mixup_pair(a: &Sample, ya: f64, b: &Sample, yb: f64, lambda: f64) -> Result<(Sample, f64)> {
    contract!(
        a.volumes.len() == b.volumes.len(),
        "mixup: {} vs {} volumes",
        a.volumes.len(),
        b.volumes.len()
    );
    let l = lambda as f32;
    let mut volumes = Vec::with_capacity(a.volumes.len());
    for va in &a.volumes {
        let vb = b.volume(va.sequence)?;
        contract!(
            va.voxels.dim() == vb.voxels.dim(),
            "mixup: {} shapes {:?} and {:?} differ",
            va.sequence,
            va.voxels.dim(),
            vb.voxels.dim()
        );
        let mixed = if lambda == 1.0 {
            va.voxels.clone()
        } else {
            &va.voxels * l + &vb.voxels * (1.0 - l)
        };
        volumes.push(va.with_voxels(mixed));
    }
    let mut clinical = [0.0; CLINICAL_FEATURES];
    for (k, c) in clinical.iter_mut().enumerate() {
        *c = lambda * a.clinical[k] + (1.0 - lambda) * b.clinical[k];
    }
    let sample = Sample {
        patient_id: a.patient_id.clone(),
        volumes,
        clinical,
    };
    Ok((sample, lambda * ya + (1.0 - lambda) * yb))
}

/// Mixes `batch_a[i]` with `batch_b[i]`, drawing one `lambda ~ Beta(alpha,
/// alpha)` per pair. Returns the mixed batch and the lambdas used.
pub fn mixup<R: Rng + ?Sized>(
    batch_a: &[(Sample, f64)],
    batch_b: &[(Sample, f64)],
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<(Sample, f64)>, Vec<f64>)> {
    contract!(
        batch_a.len() == batch_b.len(),
        "mixup: batch sizes {} and {} differ",
        batch_a.len(),
        batch_b.len()
    );
    contract!(alpha > 0.0, "mixup alpha must be positive, got {alpha}");
    let beta = Beta::new(alpha, alpha).map_err(|e| HcvtError::Contract(e.to_string()))?;
    let mut out = Vec::with_capacity(batch_a.len());
    let mut lambdas = Vec::with_capacity(batch_a.len());
    for ((a, ya), (b, yb)) in batch_a.iter().zip(batch_b) {
        let lambda = beta.sample(rng);
        out.push(mixup_pair(a, *ya, b, *yb, lambda)?);
        lambdas.push(lambda);
    }
    Ok((out, lambdas))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl FromStr for Sex {
    type Err = HcvtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" => Ok(Sex::Male),
            "F" => Ok(Sex::Female),
            _ => Err(HcvtError::Validation(format!("unknown sex `{s}` (expected M or F)"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "M",
            Sex::Female => "F",
        })
    }
}

/// Tabular attributes of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub age: u32,
    pub sex: Sex,
    pub hospitalizations: u32,
    pub tumor_size_cm: f64,
    pub multiple_lesions: u8,
    pub t_stage: u8,
    pub grade: u8,
    pub label: u8,
}

impl ClinicalRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HcvtError::Validation(format!("patient {}: {m}", self.patient_id)));
        if !(18..=100).contains(&self.age) {
            return bad(format!("age {} outside [18, 100]", self.age));
        }
        if !(self.tumor_size_cm > 0.0 && self.tumor_size_cm <= 15.0) {
            return bad(format!("tumor_size_cm {} outside (0, 15]", self.tumor_size_cm));
        }
        if self.t_stage > 5 {
            return bad(format!("t_stage {} outside 0..=5", self.t_stage));
        }
        if self.hospitalizations < 1 {
            return bad("hospitalizations must be at least 1".into());
        }
        for (name, v) in [
            ("multiple_lesions", self.multiple_lesions),
            ("grade", self.grade),
            ("label", self.label),
        ] {
            if v > 1 {
                return bad(format!("{name} {v} is not binary"));
            }
        }
        Ok(())
    }
}

/// Mean and standard deviation of the continuous clinical features (age,
/// hospitalizations, tumor size), fit on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn fit(records: &[&ClinicalRecord]) -> Result<Self> {
        contract!(!records.is_empty(), "cannot fit normalization on an empty split");
        let n = records.len() as f64;
        let cols = |r: &ClinicalRecord| [r.age as f64, r.hospitalizations as f64, r.tumor_size_cm];
        let mut mean = [0.0; 3];
        for r in records {
            for (m, v) in mean.iter_mut().zip(cols(r)) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 3];
        for r in records {
            for k in 0..3 {
                std[k] += (cols(r)[k] - mean[k]).powi(2) / n;
            }
        }
        for (k, s) in std.iter_mut().enumerate() {
            *s = s.sqrt();
            if !(*s > 0.0) || !s.is_finite() {
                log::warn!("clinical feature {k} has zero spread on the training split; using std 1");
                *s = 1.0;
            }
        }
        Ok(NormStats { mean, std })
    }
}

/// Feature order: age_z, sex (male = 1), hospitalizations_z, tumor_size_z,
/// multiple_lesions, t_stage / 5, grade.
pub fn normalize_clinical(c: &ClinicalRecord, stats: &NormStats) -> Result<[f64; CLINICAL_FEATURES]> {
    c.validate()?;
    let z = |v: f64, k: usize| (v - stats.mean[k]) / stats.std[k];
    Ok([
        z(c.age as f64, 0),
        if c.sex == Sex::Male { 1.0 } else { 0.0 },
        z(c.hospitalizations as f64, 1),
        z(c.tumor_size_cm, 2),
        c.multiple_lesions as f64,
        c.t_stage as f64 / 5.0,
        c.grade as f64,
    ])
}
