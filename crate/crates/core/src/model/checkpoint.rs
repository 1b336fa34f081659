//! Single-file checkpoint archive.
//!
//! Layout: the 12-byte magic `hcvt-ckpt-1\n`, a little-endian `u64` header
//! length, a canonical JSON header, then the concatenated little-endian
//! tensor payloads described by the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autograd::ParamStore;
use crate::canon::{canonical_json, sha256_hex};
use crate::error::{HcvtError, Result};
use crate::real::Real;

pub const CHECKPOINT_FORMAT: &str = "hcvt-ckpt-1";
const MAGIC: &[u8] = b"hcvt-ckpt-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

/// Writes the model to `path`, returning the SHA-256 of the file bytes.
pub fn save_checkpoint<F: Real>(model: &Model<F>, path: &Path) -> Result<String> {
    let w = width(F::DTYPE).unwrap();
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::with_capacity(model.params().num_scalars() * w);
    for (_, name, value) in model.params().iter() {
        let offset = payload.len() as u64;
        for x in value.iter() {
            if w == 4 {
                payload.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            } else {
                payload.extend_from_slice(&x.f64().to_le_bytes());
            }
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        dtype: F::DTYPE.into(),
        config: model.config().clone(),
        tensors,
    };
    let header = canonical_json(&header)?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| HcvtError::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| HcvtError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HcvtError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn split(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let bad = |m: &str| HcvtError::format(path, m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not an hcvt-ckpt-1 checkpoint"));
    }
    let mut n = [0u8; 8];
    n.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let hlen = u64::from_le_bytes(n) as usize;
    let start = MAGIC.len() + 8;
    if bytes.len() < start + hlen {
        return Err(bad("truncated checkpoint header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[start..start + hlen])
        .map_err(|e| bad(&format!("corrupt checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(&format!("unsupported checkpoint format `{}`", header.format)));
    }
    Ok((header, start + hlen))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| HcvtError::io(path, e))?;
    Ok(split(path, &bytes)?.0)
}

/// Loads a checkpoint into a model of element type `F` and returns it with
/// the SHA-256 of the file.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Model<F>, String)> {
    let bytes = fs::read(path).map_err(|e| HcvtError::io(path, e))?;
    let (header, base) = split(path, &bytes)?;
    let w = width(&header.dtype).ok_or_else(|| {
        HcvtError::format(path, format!("unsupported dtype `{}`", header.dtype))
    })?;
    let mut params = ParamStore::<F>::new();
    for t in &header.tensors {
        let count = t.shape[0] * t.shape[1];
        if t.len as usize != count * w {
            return Err(HcvtError::format(
                path,
                format!("tensor `{}`: length does not match shape", t.name),
            ));
        }
        let start = base + t.offset as usize;
        let end = start + t.len as usize;
        if end > bytes.len() {
            return Err(HcvtError::format(path, format!("tensor `{}` truncated", t.name)));
        }
        let data: Vec<F> = bytes[start..end]
            .chunks_exact(w)
            .map(|c| {
                if w == 4 {
                    F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    F::of(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        params.insert(
            t.name.clone(),
            Array2::from_shape_vec((t.shape[0], t.shape[1]), data).unwrap(),
        )?;
    }
    let model = Model::from_params(header.config, params)?;
    Ok((model, sha256_hex(&bytes)))
}
