use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HcvtError, Result};
use crate::gam::GatingMode;

/// Architecture variant. `Full` is the reference model; the others are the
/// ablation rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoLocalGam,
    NoGlobalGam,
    NoGam,
    SingleBranch,
    ConditionalSingleBranch,
    MriOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoLocalGam,
        Variant::NoGlobalGam,
        Variant::NoGam,
        Variant::SingleBranch,
        Variant::ConditionalSingleBranch,
        Variant::MriOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocalGam => "no_local_gam",
            Variant::NoGlobalGam => "no_global_gam",
            Variant::NoGam => "no_gam",
            Variant::SingleBranch => "single_branch",
            Variant::ConditionalSingleBranch => "conditional_single_branch",
            Variant::MriOnly => "mri_only",
        }
    }

    pub fn local_gated(self) -> bool {
        !matches!(self, Variant::NoLocalGam | Variant::NoGam)
    }

    pub fn global_gated(self) -> bool {
        !matches!(self, Variant::NoGlobalGam | Variant::NoGam)
    }

    pub fn uses_clinical(self) -> bool {
        self != Variant::MriOnly
    }

    /// Number of inputs to the global fusion.
    pub fn num_global_inputs(self) -> usize {
        match self {
            Variant::SingleBranch => 2,
            Variant::MriOnly => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = HcvtError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                HcvtError::Config(format!(
                    "unknown variant `{s}`; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub patch_size: usize,
    pub frame_patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub emb_dropout: f64,
    /// Output channels of the 1x1 convolution in front of the ViT path.
    pub in_channels: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 16,
            frame_patch_size: 1,
            embed_dim: 1024,
            depth: 6,
            heads: 8,
            mlp_dim: 2048,
            dropout: 0.2,
            emb_dropout: 0.1,
            in_channels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Output channels of the 1x1 convolution in front of the CNN path.
    pub in_channels: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            channels: vec![32, 64, 128],
            leaky_slope: 0.01,
            in_channels: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClinicalConfig {
    pub hidden: Vec<usize>,
}

impl Default for ClinicalConfig {
    fn default() -> Self {
        ClinicalConfig { hidden: vec![128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: vec![256],
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub depth: usize,
    pub size: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig { depth: 13, size: 256 }
    }
}

/// Number of clinical features fed to the MLP encoder.
pub const CLINICAL_FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion_dim: usize,
    pub vit: VitConfig,
    pub cnn: CnnConfig,
    pub clinical: ClinicalConfig,
    pub head: HeadConfig,
    pub gating: GatingMode,
    pub variant: Variant,
    pub input: InputConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion_dim: 1024,
            vit: VitConfig::default(),
            cnn: CnnConfig::default(),
            clinical: ClinicalConfig::default(),
            head: HeadConfig::default(),
            gating: GatingMode::default(),
            variant: Variant::Full,
            input: InputConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile: 64x64 slices, depth 8, embed 128, two ViT blocks.
    pub fn tiny() -> Self {
        ModelConfig {
            fusion_dim: 128,
            vit: VitConfig {
                embed_dim: 128,
                depth: 2,
                mlp_dim: 256,
                dropout: 0.1,
                emb_dropout: 0.05,
                ..VitConfig::default()
            },
            cnn: CnnConfig {
                channels: vec![8, 16, 32],
                ..CnnConfig::default()
            },
            input: InputConfig { depth: 8, size: 64 },
            head: HeadConfig {
                dropout: 0.1,
                ..HeadConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Channels of the image fed to each branch (3 when sequences are stacked).
    pub fn branch_in_channels(&self) -> usize {
        if self.variant == Variant::SingleBranch {
            3
        } else {
            1
        }
    }

    pub fn patch_grid(&self) -> (usize, usize, usize) {
        let p = self.vit.patch_size;
        (
            self.input.depth / self.vit.frame_patch_size,
            self.input.size / p,
            self.input.size / p,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (f, h, w) = self.patch_grid();
        f * h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.vit.in_channels * self.vit.frame_patch_size * self.vit.patch_size * self.vit.patch_size
    }

    /// Spatial side after `i` stride-2 convolutions.
    pub fn cnn_side(&self, stages: usize) -> usize {
        (0..stages).fold(self.input.size, |s, _| (s + 2 - 3) / 2 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(HcvtError::Config(msg));
        let (d, s) = (self.input.depth, self.input.size);
        if d == 0 || s == 0 {
            return cfg(format!("input dims must be positive, got depth {d} size {s}"));
        }
        if self.fusion_dim == 0 {
            return cfg("fusion_dim must be positive".into());
        }
        let v = &self.vit;
        if v.patch_size == 0 || s % v.patch_size != 0 {
            return cfg(format!(
                "patch_size {} does not divide input size {s}",
                v.patch_size
            ));
        }
        if v.frame_patch_size == 0 || d % v.frame_patch_size != 0 {
            return cfg(format!(
                "frame_patch_size {} does not divide input depth {d}",
                v.frame_patch_size
            ));
        }
        if v.heads == 0 || v.embed_dim % v.heads != 0 {
            return cfg(format!(
                "heads {} does not divide embed_dim {}",
                v.heads, v.embed_dim
            ));
        }
        if v.depth == 0 || v.mlp_dim == 0 || v.in_channels == 0 {
            return cfg("vit depth, mlp_dim and in_channels must be positive".into());
        }
        for p in [v.dropout, v.emb_dropout, self.head.dropout] {
            if !(0.0..1.0).contains(&p) {
                return cfg(format!("dropout {p} outside [0, 1)"));
            }
        }
        if self.cnn.channels.len() != 3 || self.cnn.channels.contains(&0) {
            return cfg(format!(
                "cnn.channels must list three positive widths, got {:?}",
                self.cnn.channels
            ));
        }
        if self.cnn.in_channels == 0 {
            return cfg("cnn.in_channels must be positive".into());
        }
        if self.cnn_side(3) < 8 {
            return cfg(format!(
                "input size {s} leaves {} px after three stride-2 stages (needs >= 8)",
                self.cnn_side(3)
            ));
        }
        if self.clinical.hidden.contains(&0) || self.head.hidden.contains(&0) {
            return cfg("hidden widths must be positive".into());
        }
        Ok(())
    }
}
