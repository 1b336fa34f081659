use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::HcvtError;

/// MRI sequence tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    Adc,
    T2,
    Dwi,
}

impl Sequence {
    /// Canonical branch order.
    pub const ALL: [Sequence; 3] = [Sequence::Adc, Sequence::T2, Sequence::Dwi];

    pub fn as_str(self) -> &'static str {
        match self {
            Sequence::Adc => "adc",
            Sequence::T2 => "t2",
            Sequence::Dwi => "dwi",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sequence {
    type Err = HcvtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adc" => Ok(Sequence::Adc),
            "t2" => Ok(Sequence::T2),
            "dwi" => Ok(Sequence::Dwi),
            _ => Err(HcvtError::Validation(format!(
                "unknown sequence `{s}` (expected adc, t2 or dwi)"
            ))),
        }
    }
}

/// One sequence of one patient, voxels indexed `[depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub sequence: Sequence,
    pub patient_id: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, sequence: Sequence, patient_id: impl Into<String>) -> Self {
        Volume {
            voxels,
            sequence,
            patient_id: patient_id.into(),
        }
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn height(&self) -> usize {
        self.voxels.dim().1
    }

    pub fn width(&self) -> usize {
        self.voxels.dim().2
    }

    /// Copy of slice `z`, `[height, width]`.
    pub fn slice(&self, z: usize) -> Option<Array2<f32>> {
        (z < self.depth()).then(|| self.voxels.index_axis(Axis(0), z).to_owned())
    }

    pub fn with_voxels(&self, voxels: Array3<f32>) -> Volume {
        Volume {
            voxels,
            sequence: self.sequence,
            patient_id: self.patient_id.clone(),
        }
    }
}
