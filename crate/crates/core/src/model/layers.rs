use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvGeom, Graph, ParamId, ParamStore, Var};
use crate::error::{HcvtError, Result};
use crate::gam::graph::Gate;
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Hands out parameter ids, either by creating freshly initialized tensors or
/// by looking up (and shape-checking) tensors that already exist.
pub(crate) enum Alloc<'a, F: Real> {
    Create {
        store: &'a mut ParamStore<F>,
        rng: &'a mut ChaCha8Rng,
    },
    Resolve {
        store: &'a ParamStore<F>,
    },
}

impl<F: Real> Alloc<'_, F> {
    pub fn param(&mut self, name: &str, shape: (usize, usize), init: Init) -> Result<ParamId> {
        match self {
            Alloc::Create { store, rng } => {
                let data = sample(shape, init, rng);
                store.insert(name, data.mapv(F::of))
            }
            Alloc::Resolve { store } => {
                let id = store.require(name)?;
                let got = store.get(id).dim();
                if got != shape {
                    return Err(HcvtError::Config(format!(
                        "parameter `{name}` has shape {got:?}, expected {shape:?}"
                    )));
                }
                Ok(id)
            }
        }
    }
}

fn sample(shape: (usize, usize), init: Init, rng: &mut ChaCha8Rng) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Uniform(b) => Array2::from_shape_simple_fn(shape, || rng.random_range(-b..=b)),
        Init::Normal(std) => {
            let n = Normal::new(0.0, std).unwrap();
            Array2::from_shape_simple_fn(shape, || n.sample(rng))
        }
    }
}

/// `x W + b` on row-major activations, `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(a: &mut Alloc<F>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: a.param(&format!("{name}.weight"), (fan_in, fan_out), Init::Uniform(bound))?,
            b: a.param(&format!("{name}.bias"), (1, fan_out), Init::Zeros)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Channel-mixing convolution, `W: [out, in]`, `b: [out, 1]`, applied to
/// `[channels, voxels]`. Kernel size 1 or 3 (per slice).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn pointwise<F: Real>(a: &mut Alloc<F>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        Ok(Conv {
            w: a.param(&format!("{name}.weight"), (c_out, c_in), Init::Uniform(bound))?,
            b: a.param(&format!("{name}.bias"), (c_out, 1), Init::Zeros)?,
        })
    }

    pub fn spatial<F: Real>(a: &mut Alloc<F>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let fan_in = c_in * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        Ok(Conv {
            w: a.param(&format!("{name}.weight"), (c_out, fan_in), Init::Uniform(bound))?,
            b: a.param(&format!("{name}.bias"), (c_out, 1), Init::Zeros)?,
        })
    }

    pub fn forward_pointwise<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(w, x);
        g.add_col(y, b)
    }

    pub fn forward_spatial<F: Real>(&self, g: &mut Graph<F>, x: Var, geom: ConvGeom) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, geom)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(a: &mut Alloc<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: a.param(&format!("{name}.gamma"), (1, dim), Init::Ones)?,
            beta: a.param(&format!("{name}.beta"), (1, dim), Init::Zeros)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, F::of(1e-5))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GateIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl GateIds {
    pub fn new<F: Real>(a: &mut Alloc<F>, name: &str, dim: usize) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(GateIds {
            w: a.param(&format!("{name}.weight"), (dim, 1), Init::Uniform(bound))?,
            b: a.param(&format!("{name}.bias"), (1, 1), Init::Zeros)?,
        })
    }

    pub fn bind<F: Real>(&self, g: &mut Graph<F>) -> Gate {
        Gate {
            weight: g.param(self.w),
            bias: g.param(self.b),
        }
    }
}

/// Stack of linear layers with ReLU (and optional dropout) between them.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<F: Real>(a: &mut Alloc<F>, name: &str, widths: &[usize], dropout: f64) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(a, &format!("{name}.fc{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, dropout })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = g.relu(x);
                x = g.dropout(x, self.dropout);
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Vit {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub index: Arc<Vec<usize>>,
    pub tokens: usize,
    pub patch_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub emb_dropout: f64,
}

/// Output of the ViT path plus the attention nodes of every block.
pub(crate) struct VitOut {
    pub z: Var,
    pub attention: Vec<Var>,
}

impl Vit {
    pub fn new<F: Real>(a: &mut Alloc<F>, name: &str, cfg: &super::ModelConfig) -> Result<Self> {
        let v = &cfg.vit;
        let e = v.embed_dim;
        let embed = Linear::new(a, &format!("{name}.embed"), cfg.patch_dim(), e)?;
        let pos = a.param(&format!("{name}.pos"), (cfg.num_tokens(), e), Init::Normal(0.02))?;
        let mut blocks = Vec::with_capacity(v.depth);
        for i in 0..v.depth {
            let p = format!("{name}.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(a, &format!("{p}.ln1"), e)?,
                qkv: Linear::new(a, &format!("{p}.qkv"), e, 3 * e)?,
                proj: Linear::new(a, &format!("{p}.proj"), e, e)?,
                ln2: LayerNorm::new(a, &format!("{p}.ln2"), e)?,
                fc1: Linear::new(a, &format!("{p}.fc1"), e, v.mlp_dim)?,
                fc2: Linear::new(a, &format!("{p}.fc2"), v.mlp_dim, e)?,
            });
        }
        Ok(Vit {
            embed,
            pos,
            blocks,
            norm: LayerNorm::new(a, &format!("{name}.norm"), e)?,
            out: Linear::new(a, &format!("{name}.proj"), e, cfg.fusion_dim)?,
            index: Arc::new(patch_index(cfg)),
            tokens: cfg.num_tokens(),
            patch_dim: cfg.patch_dim(),
            heads: v.heads,
            dropout: v.dropout,
            emb_dropout: v.emb_dropout,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> VitOut {
        let t = g.gather(x, self.index.clone(), (self.tokens, self.patch_dim));
        let t = self.embed.forward(g, t);
        let pos = g.param(self.pos);
        let t = g.add(t, pos);
        let mut h = g.dropout(t, self.emb_dropout);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n = b.ln1.forward(g, h);
            let qkv = b.qkv.forward(g, n);
            let att = g.attention(qkv, self.heads);
            attention.push(att);
            let o = b.proj.forward(g, att);
            let o = g.dropout(o, self.dropout);
            h = g.add(h, o);
            let n = b.ln2.forward(g, h);
            let m = b.fc1.forward(g, n);
            let m = g.gelu(m);
            let m = g.dropout(m, self.dropout);
            let m = b.fc2.forward(g, m);
            let m = g.dropout(m, self.dropout);
            h = g.add(h, m);
        }
        let h = self.norm.forward(g, h);
        let pooled = g.mean_rows(h);
        VitOut {
            z: self.out.forward(g, pooled),
            attention,
        }
    }
}

/// Flat source index of every patch element. Tokens are ordered
/// (frame, row, col); elements within a token (channel, frame, y, x).
pub(crate) fn patch_index(cfg: &super::ModelConfig) -> Vec<usize> {
    let (nf, nh, nw) = cfg.patch_grid();
    let (p, pf, c) = (cfg.vit.patch_size, cfg.vit.frame_patch_size, cfg.vit.in_channels);
    let (d, s) = (cfg.input.depth, cfg.input.size);
    let plane = s * s;
    let mut idx = Vec::with_capacity(nf * nh * nw * c * pf * p * p);
    for fi in 0..nf {
        for hi in 0..nh {
            for wi in 0..nw {
                for ci in 0..c {
                    for dz in 0..pf {
                        for py in 0..p {
                            for px in 0..p {
                                let z = fi * pf + dz;
                                let y = hi * p + py;
                                let x = wi * p + px;
                                idx.push(ci * d * plane + z * plane + y * s + x);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub(crate) struct Cnn {
    pub convs: Vec<Conv>,
    pub geoms: Vec<ConvGeom>,
    pub out: Linear,
    pub slope: f64,
}

pub(crate) struct CnnOut {
    pub z: Var,
    /// Post-activation output of every conv stage.
    pub activations: Vec<Var>,
}

impl Cnn {
    pub fn new<F: Real>(a: &mut Alloc<F>, name: &str, cfg: &super::ModelConfig) -> Result<Self> {
        let mut c_in = cfg.cnn.in_channels;
        let mut side = cfg.input.size;
        let mut convs = Vec::new();
        let mut geoms = Vec::new();
        for (i, &c_out) in cfg.cnn.channels.iter().enumerate() {
            convs.push(Conv::spatial(a, &format!("{name}.conv{i}"), c_in, c_out)?);
            let geom = ConvGeom {
                c_in,
                c_out,
                depth: cfg.input.depth,
                height: side,
                width: side,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            side = geom.out_height();
            geoms.push(geom);
            c_in = c_out;
        }
        Ok(Cnn {
            convs,
            geoms,
            out: Linear::new(a, &format!("{name}.proj"), c_in, cfg.fusion_dim)?,
            slope: cfg.cnn.leaky_slope,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, mut x: Var) -> CnnOut {
        let mut activations = Vec::with_capacity(self.convs.len());
        for (c, geom) in self.convs.iter().zip(&self.geoms) {
            x = c.forward_spatial(g, x, *geom);
            x = g.leaky_relu(x, F::of(self.slope));
            activations.push(x);
        }
        let pooled = g.mean_cols(x);
        let pooled = g.transpose(pooled);
        CnnOut {
            z: self.out.forward(g, pooled),
            activations,
        }
    }
}
