//! The multi-branch network.
//!
//! Each MRI sequence goes through a dual-path block: two independent 1x1
//! convolutions feed a ViT path and a CNN path, whose pooled outputs are
//! fused by a local gate. Branch outputs and the encoded clinical vector are
//! fused by a global gate and classified by a small MLP head.
//!
//! All activations are rows `[1, d]` or channel-major maps `[C, D*H*W]`
//! on an autograd [`Graph`], so the same code serves training, inference,
//! gradient checks (`f64`) and saliency maps.

mod checkpoint;
mod config;
mod layers;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader};
pub use config::{
    ClinicalConfig, CnnConfig, HeadConfig, InputConfig, ModelConfig, Variant, VitConfig,
    CLINICAL_FEATURES,
};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{contract, HcvtError, Result};
use crate::gam::{self, AttentionWeights};
use crate::real::Real;
use crate::volume::{Sequence, Volume};
use layers::{Alloc, Cnn, Conv, GateIds, Init, Mlp, Vit};

/// One patient as seen by the network: three preprocessed volumes and the
/// normalized clinical vector.
#[derive(Clone, Debug)]
pub struct Sample {
    pub patient_id: String,
    pub volumes: Vec<Volume>,
    pub clinical: [f64; CLINICAL_FEATURES],
}

impl Sample {
    /// Uniform-noise sample shaped for `cfg`; for smoke tests and benchmarks.
    pub fn random(cfg: &ModelConfig, patient_id: &str, seed: u64) -> Sample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (cfg.input.depth, cfg.input.size, cfg.input.size);
        let volumes = Sequence::ALL
            .iter()
            .map(|s| {
                let vox = ndarray::Array3::from_shape_simple_fn(shape, || rng.random::<f32>());
                Volume::new(vox, *s, patient_id)
            })
            .collect();
        let mut clinical = [0.0; CLINICAL_FEATURES];
        for c in clinical.iter_mut() {
            *c = rng.random_range(-1.0..1.0);
        }
        Sample {
            patient_id: patient_id.into(),
            volumes,
            clinical,
        }
    }

    pub fn volume(&self, seq: Sequence) -> Result<&Volume> {
        self.volumes
            .iter()
            .find(|v| v.sequence == seq)
            .ok_or_else(|| {
                HcvtError::Validation(format!(
                    "patient {}: missing {seq} sequence",
                    self.patient_id
                ))
            })
    }
}

/// Inference result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub logit: f64,
    pub branch_betas: AttentionWeights,
    /// Keyed by sequence name, or `stacked` for the single-branch variant.
    pub per_branch_alphas: BTreeMap<String, AttentionWeights>,
}

/// Parameters of one dual-path block.
#[derive(Clone, Debug)]
pub(crate) struct Branch {
    conv_vit: Conv,
    conv_cnn: Conv,
    vit: Vit,
    cnn: Cnn,
    gates: Option<(GateIds, GateIds)>,
}

impl Branch {
    fn new<F: Real>(a: &mut Alloc<F>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c_in = cfg.branch_in_channels();
        let conv_vit = Conv::pointwise(a, &format!("{name}.conv_vit"), c_in, cfg.vit.in_channels)?;
        let conv_cnn = Conv::pointwise(a, &format!("{name}.conv_cnn"), c_in, cfg.cnn.in_channels)?;
        let vit = Vit::new(a, &format!("{name}.vit"), cfg)?;
        let cnn = Cnn::new(a, &format!("{name}.cnn"), cfg)?;
        let gates = if cfg.variant.local_gated() {
            Some((
                GateIds::new(a, &format!("{name}.gate_vit"), cfg.fusion_dim)?,
                GateIds::new(a, &format!("{name}.gate_cnn"), cfg.fusion_dim)?,
            ))
        } else {
            None
        };
        Ok(Branch {
            conv_vit,
            conv_cnn,
            vit,
            cnn,
            gates,
        })
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, mode: gam::GatingMode) -> BranchTrace {
        let xv = self.conv_vit.forward_pointwise(g, x);
        let xc = self.conv_cnn.forward_pointwise(g, x);
        let vit = self.vit.forward(g, xv);
        let cnn = self.cnn.forward(g, xc);
        let (output, alphas) = match &self.gates {
            Some((gv, gc)) => {
                let gates = [gv.bind(g), gc.bind(g)];
                let (y, a) = gam::graph::fuse(g, &[vit.z, cnn.z], &gates, mode);
                (y, Some(a))
            }
            None => (gam::graph::mean(g, &[vit.z, cnn.z]), None),
        };
        BranchTrace {
            label: String::new(),
            sequence: None,
            input: x,
            z_vit: vit.z,
            z_cnn: cnn.z,
            output,
            alphas,
            cnn_activations: cnn.activations,
            attention: vit.attention,
        }
    }
}

/// Graph handles produced by one branch application.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub label: String,
    /// `None` when the branch sees stacked sequences.
    pub sequence: Option<Sequence>,
    pub input: Var,
    pub z_vit: Var,
    pub z_cnn: Var,
    /// Branch output before any conditioning token.
    pub output: Var,
    pub alphas: Option<Var>,
    /// Post-activation maps of the three CNN stages, `[C, D*h*w]`.
    pub cnn_activations: Vec<Var>,
    /// Attention node of every ViT block.
    pub attention: Vec<Var>,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logit: Var,
    /// Inputs to the global fusion, in gate order.
    pub fused_inputs: Vec<Var>,
    pub fused: Var,
    pub betas: Option<Var>,
    pub clinical: Option<Var>,
    pub branches: Vec<BranchTrace>,
}

#[derive(Clone, Debug)]
struct Layout {
    branches: Vec<Branch>,
    clinical: Option<Mlp>,
    global_gates: Vec<GateIds>,
    tokens: Vec<crate::autograd::ParamId>,
    head: Mlp,
}

impl Layout {
    fn build<F: Real>(cfg: &ModelConfig, a: &mut Alloc<F>) -> Result<Self> {
        let branches = match cfg.variant {
            Variant::SingleBranch => vec![Branch::new(a, "branch.stacked", cfg)?],
            Variant::ConditionalSingleBranch => vec![Branch::new(a, "branch.shared", cfg)?],
            _ => Sequence::ALL
                .iter()
                .map(|s| Branch::new(a, &format!("branch.{s}"), cfg))
                .collect::<Result<_>>()?,
        };
        let d = cfg.fusion_dim;
        let clinical = if cfg.variant.uses_clinical() {
            let mut widths = vec![CLINICAL_FEATURES];
            widths.extend(&cfg.clinical.hidden);
            widths.push(d);
            Some(Mlp::new(a, "clinical", &widths, 0.0)?)
        } else {
            None
        };
        let n = cfg.variant.num_global_inputs();
        let global_gates = if cfg.variant.global_gated() {
            (0..n)
                .map(|i| GateIds::new(a, &format!("global_gam.gate.{i}"), d))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let tokens = if cfg.variant == Variant::ConditionalSingleBranch {
            ["adc", "t2", "dwi", "clinic"]
                .iter()
                .map(|t| a.param(&format!("cond.token.{t}"), (1, d), Init::Normal(0.02)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut widths = vec![d];
        widths.extend(&cfg.head.hidden);
        widths.push(1);
        let head = Mlp::new(a, "head", &widths, cfg.head.dropout)?;
        Ok(Layout {
            branches,
            clinical,
            global_gates,
            tokens,
            head,
        })
    }
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<F: Real = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> Model<F> {
    /// Fresh model with seeded initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::build(
            &config,
            &mut Alloc::Create {
                store: &mut params,
                rng: &mut rng,
            },
        )?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Binds `config` to existing tensors. Extra tensors are kept but
    /// ignored, so an ablation can run on a superset of its parameters.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config, &mut Alloc::Resolve { store: &params })?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn volume_input(&self, sample: &Sample, seq: Sequence) -> Result<Array2<F>> {
        let v = sample.volume(seq)?;
        let want = (self.config.input.depth, self.config.input.size, self.config.input.size);
        if v.voxels.dim() != want {
            return Err(HcvtError::Validation(format!(
                "patient {}: {seq} volume has shape {:?}, model expects {want:?}",
                sample.patient_id,
                v.voxels.dim()
            )));
        }
        let n = v.voxels.len();
        Ok(Array2::from_shape_vec(
            (1, n),
            v.voxels.iter().map(|&x| F::of(x as f64)).collect(),
        )
        .unwrap())
    }

    fn stacked_input(&self, sample: &Sample) -> Result<Array2<F>> {
        let rows: Vec<Array2<F>> = Sequence::ALL
            .iter()
            .map(|s| self.volume_input(sample, *s))
            .collect::<Result<_>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).unwrap())
    }

    /// The clinical MLP encoder on its own, `[1, fusion_dim]`. `None` for
    /// variants without a clinical branch.
    pub fn clinical_encode(&self, g: &mut Graph<F>, clinical: &[f64; CLINICAL_FEATURES]) -> Option<Var> {
        let mlp = self.layout.clinical.as_ref()?;
        let c = g.input(Array2::from_shape_fn((1, CLINICAL_FEATURES), |(_, j)| F::of(clinical[j])));
        Some(mlp.forward(g, c))
    }

    /// Records the full forward pass on `g`.
    pub fn forward(&self, g: &mut Graph<F>, sample: &Sample) -> Result<ForwardTrace> {
        contract!(
            sample.clinical.iter().all(|c| c.is_finite()),
            "patient {}: clinical vector contains non-finite values",
            sample.patient_id
        );
        let mode = self.config.gating;
        let mut branches = Vec::new();
        match self.config.variant {
            Variant::SingleBranch => {
                let x = g.input(self.stacked_input(sample)?);
                let mut t = self.layout.branches[0].forward(g, x, mode);
                t.label = "stacked".into();
                branches.push(t);
            }
            Variant::ConditionalSingleBranch => {
                for s in Sequence::ALL {
                    let x = g.input(self.volume_input(sample, s)?);
                    let mut t = self.layout.branches[0].forward(g, x, mode);
                    t.label = s.to_string();
                    t.sequence = Some(s);
                    branches.push(t);
                }
            }
            _ => {
                for (b, s) in self.layout.branches.iter().zip(Sequence::ALL) {
                    let x = g.input(self.volume_input(sample, s)?);
                    let mut t = b.forward(g, x, mode);
                    t.label = s.to_string();
                    t.sequence = Some(s);
                    branches.push(t);
                }
            }
        }
        let mut fused_inputs: Vec<Var> = branches.iter().map(|b| b.output).collect();
        let clinical = self.clinical_encode(g, &sample.clinical);
        fused_inputs.extend(clinical);
        if !self.layout.tokens.is_empty() {
            for (y, tok) in fused_inputs.iter_mut().zip(&self.layout.tokens) {
                let t = g.param(*tok);
                *y = g.add(*y, t);
            }
        }
        let (fused, betas) = if self.layout.global_gates.is_empty() {
            (gam::graph::mean(g, &fused_inputs), None)
        } else {
            let gates: Vec<_> = self.layout.global_gates.iter().map(|gi| gi.bind(g)).collect();
            let (y, b) = gam::graph::fuse(g, &fused_inputs, &gates, mode);
            (y, Some(b))
        };
        let logit = self.layout.head.forward(g, fused);
        Ok(ForwardTrace {
            logit,
            fused_inputs,
            fused,
            betas,
            clinical,
            branches,
        })
    }

    /// Deterministic inference (dropout off).
    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let t = self.forward(&mut g, sample)?;
        Ok(self.prediction(&g, &t))
    }

    pub fn prediction(&self, g: &Graph<F>, t: &ForwardTrace) -> Prediction {
        let logit = g.scalar(t.logit).f64();
        let row = |v: Var| -> Vec<f64> { g.value(v).iter().map(|x| x.f64()).collect() };
        let branch_betas = match t.betas {
            Some(b) => AttentionWeights::from_vec(row(b)),
            None => AttentionWeights::uniform(t.fused_inputs.len()),
        };
        let per_branch_alphas = t
            .branches
            .iter()
            .map(|b| {
                let a = match b.alphas {
                    Some(a) => AttentionWeights::from_vec(row(a)),
                    None => AttentionWeights::uniform(2),
                };
                (b.label.clone(), a)
            })
            .collect();
        Prediction {
            probability: probability(logit),
            logit,
            branch_betas,
            per_branch_alphas,
        }
    }
}

/// Sigmoid kept strictly inside `(0, 1)`.
pub fn probability(logit: f64) -> f64 {
    let eps = f64::EPSILON / 2.0;
    gam::sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - eps)
}
