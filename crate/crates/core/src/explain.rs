//! Saliency maps for one slice of one sequence: a gradient-weighted
//! activation map at the last CNN stage and a block-2 ViT attention map.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{HcvtError, Result};
use crate::model::{BranchTrace, ForwardTrace, Model, Sample, Variant};
use crate::real::Real;
use crate::volume::Sequence;

pub const OVERLAY_OPACITY: f32 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    CnnLayer3,
    VitBlock2,
}

impl HeatmapSource {
    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapSource::CnnLayer3 => "cnn_layer3",
            HeatmapSource::VitBlock2 => "vit_block2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[height, width]`, min 0 and max 1 unless the map was constant.
    pub values: Array2<f64>,
    pub source: HeatmapSource,
    pub method: String,
    pub patient_id: String,
    pub sequence: Sequence,
    pub slice_index: usize,
}

impl Heatmap {
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut v = f64::NEG_INFINITY;
        for ((y, x), &h) in self.values.indexed_iter() {
            if h > v {
                v = h;
                best = (y, x);
            }
        }
        best
    }
}

/// Bilinear resize with half-pixel centers.
pub fn upsample(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, ty) = sample((y as f64 + 0.5) * h as f64 / height as f64 - 0.5, h);
        let (x0, x1, tx) = sample((x as f64 + 0.5) * w as f64 / width as f64 - 0.5, w);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bot = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(1.0)) {
        log::warn!("saliency map is constant; normalized to zeros");
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

fn branch_for<'t>(
    model_variant: Variant,
    trace: &'t ForwardTrace,
    seq: Sequence,
) -> Result<&'t BranchTrace> {
    if model_variant == Variant::SingleBranch {
        return Ok(&trace.branches[0]);
    }
    trace
        .branches
        .iter()
        .find(|b| b.sequence == Some(seq))
        .ok_or_else(|| HcvtError::Validation(format!("no branch for sequence {seq}")))
}

fn check_slice<F: Real>(model: &Model<F>, slice: usize) -> Result<()> {
    let d = model.config().input.depth;
    if slice >= d {
        return Err(HcvtError::Validation(format!(
            "slice index {slice} out of range for depth {d}"
        )));
    }
    Ok(())
}

/// Gradient-weighted class activation map at the third CNN stage of the
/// `seq` branch: channel weights are the gradients of the logit averaged
/// over every position of the stage output, the map is
/// `ReLU(sum_c w_c A_c)` on slice `slice`, upsampled to the input size and
/// min-max normalized.
pub fn cnn_cam<F: Real>(model: &Model<F>, sample: &Sample, seq: Sequence, slice: usize) -> Result<Heatmap> {
    check_slice(model, slice)?;
    let cfg = model.config();
    let mut g = Graph::new(model.params());
    let trace = model.forward(&mut g, sample)?;
    let branch = branch_for(cfg.variant, &trace, seq)?;
    let act: Var = *branch
        .cnn_activations
        .last()
        .ok_or_else(|| HcvtError::Config("CNN has no stages".into()))?;
    let grads = g.backward(trace.logit);
    let a = g.value(act);
    let (c, n) = a.dim();
    let side = cfg.cnn_side(cfg.cnn.channels.len());
    let depth = cfg.input.depth;
    debug_assert_eq!(n, depth * side * side);
    let weights: Vec<f64> = match grads.get(act) {
        Some(gr) => gr
            .mean_axis(Axis(1))
            .unwrap()
            .iter()
            .map(|v| v.f64())
            .collect(),
        None => vec![0.0; c],
    };
    let offset = slice * side * side;
    let cam = Array2::from_shape_fn((side, side), |(y, x)| {
        let k = offset + y * side + x;
        let s: f64 = (0..c).map(|ch| weights[ch] * a[[ch, k]].f64()).sum();
        s.max(0.0)
    });
    let size = cfg.input.size;
    Ok(Heatmap {
        values: normalize(&upsample(&cam, size, size)),
        source: HeatmapSource::CnnLayer3,
        method: "grad-weighted-cam".into(),
        patient_id: sample.patient_id.clone(),
        sequence: seq,
        slice_index: slice,
    })
}

/// Head-averaged attention of every block, `[T, T]`.
fn block_attention<F: Real>(g: &Graph<F>, branch: &BranchTrace) -> Result<Vec<Array2<f64>>> {
    branch
        .attention
        .iter()
        .map(|&v| {
            let probs = g
                .attention_probs(v)
                .ok_or_else(|| HcvtError::Contract("node is not an attention op".into()))?;
            let mut avg = Array2::<f64>::zeros(probs[0].raw_dim());
            for p in probs {
                avg.zip_mut_with(p, |a, &b| *a += b.f64());
            }
            avg /= probs.len() as f64;
            Ok(avg)
        })
        .collect()
}

/// Per-token saliency from block-2 attention: the head-averaged matrix
/// averaged over query rows, so it sums to 1 over all tokens. With
/// `rollout`, blocks 1 and 2 are composed as `(A + I) / 2` products first.
pub fn token_saliency<F: Real>(
    model: &Model<F>,
    sample: &Sample,
    seq: Sequence,
    rollout: bool,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    if cfg.vit.depth < 2 {
        return Err(HcvtError::Config(format!(
            "ViT attention map needs at least 2 blocks, model has {}",
            cfg.vit.depth
        )));
    }
    let mut g = Graph::new(model.params());
    let trace = model.forward(&mut g, sample)?;
    let branch = branch_for(cfg.variant, &trace, seq)?;
    let blocks = block_attention(&g, branch)?;
    let att = if rollout {
        let t = blocks[0].nrows();
        let eye = Array2::<f64>::eye(t);
        let mix = |a: &Array2<f64>| (a + &eye) * 0.5;
        mix(&blocks[1]).dot(&mix(&blocks[0]))
    } else {
        blocks[1].clone()
    };
    Ok(att.mean_axis(Axis(0)).unwrap().to_vec())
}

/// Block-2 attention saliency restricted to the tokens of slice `slice`,
/// reshaped to the patch grid, upsampled and normalized.
pub fn vit_attention_map<F: Real>(
    model: &Model<F>,
    sample: &Sample,
    seq: Sequence,
    slice: usize,
    rollout: bool,
) -> Result<Heatmap> {
    check_slice(model, slice)?;
    let cfg = model.config();
    let saliency = token_saliency(model, sample, seq, rollout)?;
    let (_, gh, gw) = cfg.patch_grid();
    let frame = slice / cfg.vit.frame_patch_size;
    let start = frame * gh * gw;
    let grid = Array2::from_shape_fn((gh, gw), |(y, x)| saliency[start + y * gw + x]);
    let size = cfg.input.size;
    Ok(Heatmap {
        values: normalize(&upsample(&grid, size, size)),
        source: HeatmapSource::VitBlock2,
        method: if rollout {
            "attention-rollout".into()
        } else {
            "head-averaged-attention".into()
        },
        patient_id: sample.patient_id.clone(),
        sequence: seq,
        slice_index: slice,
    })
}

/// Grayscale slice with the heatmap composited through viridis at
/// `0.45 * h` opacity, so zero heat leaves the grayscale untouched.
pub fn render_overlay(slice: &Array2<f32>, heat: &Array2<f64>) -> Result<RgbImage> {
    if slice.dim() != heat.dim() {
        return Err(HcvtError::Validation(format!(
            "slice is {:?} but heatmap is {:?}",
            slice.dim(),
            heat.dim()
        )));
    }
    let (h, w) = slice.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    let cmap = colorous::VIRIDIS;
    for ((y, x), &v) in slice.indexed_iter() {
        let gray = (v.clamp(0.0, 1.0) * 255.0).round();
        let t = heat[[y, x]].clamp(0.0, 1.0);
        let a = OVERLAY_OPACITY * t as f32;
        let c = cmap.eval_continuous(t);
        let mix = |col: u8| ((1.0 - a) * gray + a * col as f32).round().clamp(0.0, 255.0) as u8;
        img.put_pixel(x as u32, y as u32, Rgb([mix(c.r), mix(c.g), mix(c.b)]));
    }
    Ok(img)
}

pub fn overlay(slice: &Array2<f32>, heatmap: &Heatmap, out: &Path) -> Result<()> {
    let img = render_overlay(slice, &heatmap.values)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HcvtError::io(dir, e))?;
    }
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => HcvtError::io(out, io),
            other => HcvtError::Image(other),
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub source: HeatmapSource,
    pub patient_id: String,
    pub sequence: Sequence,
    pub slice_index: usize,
    pub checkpoint_hash: String,
    pub method: String,
}

impl Sidecar {
    pub fn new(h: &Heatmap, checkpoint_hash: &str) -> Self {
        Sidecar {
            source: h.source,
            patient_id: h.patient_id.clone(),
            sequence: h.sequence,
            slice_index: h.slice_index,
            checkpoint_hash: checkpoint_hash.into(),
            method: h.method.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, crate::canon::canonical_json_pretty(self)? + "\n")
            .map_err(|e| HcvtError::io(path, e))
    }
}
