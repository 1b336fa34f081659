//! On-disk dataset layout, loaders and fold planning.
//!
//! ```text
//! <root>/manifest.json
//! <root>/clinical.csv
//! <root>/lesions.json          ground-truth lesion boxes (synthetic data only)
//! <root>/<patient>/{adc,t2,dwi}.{json,raw}
//! ```

mod mvol;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mvol::{read_volume, write_volume, VolumeHeader};
pub use synth::{
    generate_clinical, generate_synthetic, synthesize_patient, LesionTruth, SequenceLesion,
    SynthOptions,
};

use crate::error::{HcvtError, Result};
use crate::preprocess::{ClinicalRecord, Sex};
use crate::volume::{Sequence, Volume};

pub const CLINICAL_HEADER: [&str; 9] = [
    "patient_id",
    "age",
    "sex",
    "hospitalizations",
    "tumor_size_cm",
    "multiple_lesions",
    "t_stage",
    "grade",
    "label",
];

pub const MANIFEST_VERSION: &str = "hcvt-dataset-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negative: usize,
    pub positive: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub label: u8,
    /// Native `[depth, height, width]` per sequence.
    pub shapes: BTreeMap<Sequence, [usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub format_version: String,
    pub n_patients: usize,
    pub class_counts: ClassCounts,
    pub native_size: [usize; 2],
    pub depth_range: [usize; 2],
    pub seed: u64,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn labels(&self) -> HashMap<String, u8> {
        self.patients.iter().map(|p| (p.id.clone(), p.label)).collect()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| HcvtError::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| HcvtError::format(&path, format!("invalid manifest: {e}")))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(HcvtError::format(
                &path,
                format!("unsupported dataset version `{}`", m.format_version),
            ));
        }
        if m.patients.len() != m.n_patients {
            return Err(HcvtError::format(&path, "n_patients disagrees with patient list"));
        }
        m.root = root.to_path_buf();
        Ok(m)
    }
}

pub fn patient_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

/// Reads `clinical.csv`. The header must match [`CLINICAL_HEADER`] exactly;
/// range violations are reported with their 1-based line number.
pub fn load_clinical(path: &Path) -> Result<Vec<ClinicalRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| HcvtError::format(path, e.to_string()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != CLINICAL_HEADER {
        return Err(HcvtError::format(
            path,
            format!(
                "clinical header must be `{}`, found `{}`",
                CLINICAL_HEADER.join(","),
                header.join(",")
            ),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let err = |m: String| HcvtError::Validation(format!("{}:{line}: {m}", path.display()));
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        fn num<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
            s.parse::<T>().map_err(|_| format!("{name} `{s}` is not a valid number"))
        }
        let rec = (|| -> std::result::Result<ClinicalRecord, String> {
            Ok(ClinicalRecord {
                patient_id: field(0).to_string(),
                age: num(field(1), "age")?,
                sex: field(2).parse::<Sex>().map_err(|e| e.to_string())?,
                hospitalizations: num(field(3), "hospitalizations")?,
                tumor_size_cm: num(field(4), "tumor_size_cm")?,
                multiple_lesions: num(field(5), "multiple_lesions")?,
                t_stage: num(field(6), "t_stage")?,
                grade: num(field(7), "grade")?,
                label: num(field(8), "label")?,
            })
        })()
        .map_err(err)?;
        if rec.patient_id.is_empty() {
            return Err(err("empty patient_id".into()));
        }
        rec.validate().map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_clinical(path: &Path, records: &[ClinicalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HcvtError::format(path, e.to_string()))?;
    w.write_record(CLINICAL_HEADER)?;
    for r in records {
        w.write_record([
            r.patient_id.clone(),
            r.age.to_string(),
            r.sex.to_string(),
            r.hospitalizations.to_string(),
            format!("{:.2}", r.tumor_size_cm),
            r.multiple_lesions.to_string(),
            r.t_stage.to_string(),
            r.grade.to_string(),
            r.label.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HcvtError::io(path, e))?;
    Ok(())
}

/// A dataset opened from disk: manifest plus clinical table.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clinical: HashMap<String, ClinicalRecord>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let records = load_clinical(&root.join("clinical.csv"))?;
        let clinical: HashMap<String, ClinicalRecord> =
            records.into_iter().map(|r| (r.patient_id.clone(), r)).collect();
        for p in &manifest.patients {
            let rec = clinical.get(&p.id).ok_or_else(|| {
                HcvtError::Validation(format!("patient {} has no clinical row", p.id))
            })?;
            if rec.label != p.label {
                return Err(HcvtError::Validation(format!(
                    "patient {}: manifest label {} disagrees with clinical label {}",
                    p.id, p.label, rec.label
                )));
            }
            if p.shapes.len() != 3 {
                return Err(HcvtError::Validation(format!(
                    "patient {} must have exactly 3 sequences",
                    p.id
                )));
            }
        }
        Ok(Dataset { manifest, clinical })
    }

    pub fn root(&self) -> &Path {
        &self.manifest.root
    }

    pub fn record(&self, id: &str) -> Result<&ClinicalRecord> {
        self.clinical
            .get(id)
            .ok_or_else(|| HcvtError::Validation(format!("unknown patient {id}")))
    }

    pub fn label(&self, id: &str) -> Result<u8> {
        Ok(self.record(id)?.label)
    }

    pub fn load_volumes(&self, id: &str) -> Result<Vec<Volume>> {
        let dir = patient_dir(self.root(), id);
        Sequence::ALL
            .iter()
            .map(|s| read_volume(&dir, *s, id))
            .collect()
    }

    /// Ground-truth lesion boxes, when the dataset is synthetic.
    pub fn lesions(&self) -> Result<Option<BTreeMap<String, LesionTruth>>> {
        let path = self.root().join("lesions.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| HcvtError::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

/// Patient-level k-fold partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// `(train, test)` ids of fold `i`.
    pub fn split(&self, i: usize) -> (Vec<String>, Vec<String>) {
        let test = self.folds[i].clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        (train, test)
    }
}

/// Stratified split of `ids` into `k` folds. Each class is shuffled with the
/// seed and dealt round-robin, the second class continuing where the first
/// stopped, so fold sizes differ by at most one.
pub fn stratified_folds(ids: &[(String, u8)], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(HcvtError::Config(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (id, y) in ids {
        by_class[(*y as usize).min(1)].push(id.clone());
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(HcvtError::Config(format!(
                "class {c} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    // positives first, then negatives
    for members in by_class.iter_mut().rev() {
        members.sort();
        members.shuffle(&mut rng);
        for id in members.iter() {
            folds[slot % k].push(id.clone());
            slot += 1;
        }
    }
    Ok(folds)
}

pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    let ids: Vec<(String, u8)> = manifest
        .patients
        .iter()
        .map(|p| (p.id.clone(), p.label))
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        stratified: true,
        folds: stratified_folds(&ids, k, seed)?,
    })
}
