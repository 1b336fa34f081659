//! Run configuration: a profile default, overlaid by an optional JSON file,
//! overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use hcvt_core::model::ModelConfig;
use hcvt_core::training::TrainConfig;
use hcvt_core::{HcvtError, Result};
use serde::Deserialize;
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-size model and the long training schedule.
    Paper,
    /// 64x64 slices, depth 8 and a short schedule.
    Tiny,
}

/// Top level of a `--config` file. `model` and `train` are partial
/// documents laid over the profile defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<Profile>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub folds: Option<usize>,
    #[serde(default)]
    pub model: Value,
    #[serde(default)]
    pub train: Value,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HcvtError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HcvtError::Config(format!("{}: {e}", path.display())))
    }
}

/// Recursive merge: objects merge key by key, anything else replaces.
fn overlay(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                overlay(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (_, Value::Null) => {}
        (b, p) => *b = p.clone(),
    }
}

fn layered<T>(base: &T, patch: &Value, what: &str) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(base)?;
    overlay(&mut v, patch);
    serde_json::from_value(v).map_err(|e| HcvtError::Config(format!("{what}: {e}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn resolve(file: Option<&ConfigFile>, tiny_flag: bool) -> Result<Resolved> {
    let empty = ConfigFile::default();
    let file = file.unwrap_or(&empty);
    let profile = if tiny_flag {
        Profile::Tiny
    } else {
        file.profile.unwrap_or(Profile::Paper)
    };
    let (model, train) = match profile {
        Profile::Paper => (ModelConfig::default(), TrainConfig::default()),
        Profile::Tiny => (ModelConfig::tiny(), TrainConfig::tiny()),
    };
    Ok(Resolved {
        model: layered(&model, &file.model, "model")?,
        train: layered(&train, &file.train, "train")?,
        folds: file.folds.unwrap_or(5),
        data: file.data.clone(),
        out: file.out.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ConfigFile> {
        serde_json::from_str(s).map_err(|e| HcvtError::Config(e.to_string()))
    }

    #[test]
    fn partial_sections_keep_profile_defaults() {
        let f = parse(r#"{"profile": "tiny", "model": {"vit": {"depth": 3}}, "train": {"lr": 0.01}}"#).unwrap();
        let r = resolve(Some(&f), false).unwrap();
        assert_eq!(r.model.vit.depth, 3);
        assert_eq!(r.model.vit.embed_dim, ModelConfig::tiny().vit.embed_dim);
        assert_eq!(r.model.input, ModelConfig::tiny().input);
        assert_eq!(r.train.lr, 0.01);
        assert_eq!(r.train.patience, TrainConfig::tiny().patience);
        assert_eq!(r.folds, 5);
    }

    #[test]
    fn tiny_flag_wins_and_paper_is_default() {
        assert_eq!(resolve(None, false).unwrap().model, ModelConfig::default());
        let f = parse(r#"{"profile": "paper"}"#).unwrap();
        assert_eq!(resolve(Some(&f), true).unwrap().model, ModelConfig::tiny());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"epochs": 3}"#).is_err());
        let f = parse(r#"{"model": {"vit": {"depht": 3}}}"#).unwrap();
        let e = resolve(Some(&f), false).unwrap_err().to_string();
        assert!(e.contains("depht"), "{e}");
        let f = parse(r#"{"train": {"learning_rate": 3}}"#).unwrap();
        assert!(resolve(Some(&f), false).is_err());
    }
}
