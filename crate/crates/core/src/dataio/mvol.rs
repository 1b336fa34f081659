//! MVOL1: a JSON sidecar plus raw little-endian `f32` voxels in
//! `[slice][row][col]` order.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::canon::canonical_json_pretty;
use crate::error::{HcvtError, Result};
use crate::volume::{Sequence, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    pub sequence: Sequence,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub byte_order: String,
}

pub fn write_volume(dir: &Path, v: &Volume) -> Result<()> {
    if !v.voxels.iter().all(|x| x.is_finite()) {
        return Err(HcvtError::Validation(format!(
            "patient {} {}: refusing to write non-finite voxels",
            v.patient_id, v.sequence
        )));
    }
    fs::create_dir_all(dir).map_err(|e| HcvtError::io(dir, e))?;
    let (depth, height, width) = v.voxels.dim();
    let header = VolumeHeader {
        format: "MVOL1".into(),
        sequence: v.sequence,
        depth,
        height,
        width,
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let json = dir.join(format!("{}.json", v.sequence));
    fs::write(&json, canonical_json_pretty(&header)? + "\n").map_err(|e| HcvtError::io(&json, e))?;
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for x in v.voxels.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw = dir.join(format!("{}.raw", v.sequence));
    fs::write(&raw, bytes).map_err(|e| HcvtError::io(&raw, e))
}

pub fn read_volume(dir: &Path, sequence: Sequence, patient_id: &str) -> Result<Volume> {
    let json = dir.join(format!("{sequence}.json"));
    let text = fs::read_to_string(&json).map_err(|e| HcvtError::io(&json, e))?;
    let h: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| HcvtError::format(&json, format!("corrupt MVOL1 sidecar: {e}")))?;
    if h.format != "MVOL1" {
        return Err(HcvtError::format(&json, format!("unsupported format `{}`", h.format)));
    }
    if h.dtype != "float32" {
        return Err(HcvtError::format(&json, format!("unsupported dtype `{}`", h.dtype)));
    }
    if h.byte_order != "little" {
        return Err(HcvtError::format(
            &json,
            format!("unsupported byte order `{}`", h.byte_order),
        ));
    }
    if h.sequence != sequence {
        return Err(HcvtError::format(
            &json,
            format!("sidecar describes {} but {sequence} was requested", h.sequence),
        ));
    }
    let raw = dir.join(format!("{sequence}.raw"));
    let bytes = fs::read(&raw).map_err(|e| HcvtError::io(&raw, e))?;
    let expected = h.depth * h.height * h.width * 4;
    if bytes.len() != expected {
        return Err(HcvtError::format(
            &raw,
            format!(
                "size mismatch: header {}x{}x{} needs {expected} bytes, file has {}",
                h.depth,
                h.height,
                h.width,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec((h.depth, h.height, h.width), data).unwrap();
    Ok(Volume::new(voxels, sequence, patient_id))
}
