//! Gated attention fusion.
//!
//! Every input vector `z_i` gets its own linear gate `s_i = w_i·z_i + b_i`.
//! The gate is squashed with a sigmoid, the squashed scores are normalized
//! with a softmax across inputs, and the fused vector is the resulting convex
//! combination `Y = Σ a_i z_i`. The local module fuses the ViT and CNN paths
//! of one branch (N = 2); the global module fuses the branch outputs (N = 3
//! or 4 depending on the variant).
//!
//! Because softmax is applied to values already squashed into `(0, 1)`, the
//! attainable weights for N inputs are confined to
//! `[1/(1+(N-1)e), e/(e+N-1)]`; see [`simplex_bounds`].
//!
//! The free functions here work on `f64` slices and are used as the
//! reference path in tests and by explainability code. [`graph`] contains the
//! differentiable versions used inside the network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Weight vector and bias of one gating function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl GateParams {
    pub fn zeros(dim: usize) -> Self {
        GateParams {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Uniform weights in `[-1/sqrt(d), 1/sqrt(d)]`, zero bias.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        GateParams {
            weight: (0..dim).map(|_| rng.random_range(-bound..=bound)).collect(),
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Vit,
    Cnn,
    BranchOutput,
    Fused,
}

/// A vector in the shared fusion space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub origin: Origin,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, origin: Origin) -> Self {
        FeatureVector { values, origin }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Normalized attention weights over the fused inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Weights that are not produced by a gate (mean-fusion ablations).
    pub fn uniform(n: usize) -> Self {
        AttentionWeights(vec![1.0 / n as f64; n])
    }

    pub(crate) fn from_vec(v: Vec<f64>) -> Self {
        AttentionWeights(v)
    }
}

/// Closed interval containing every weight produced by sigmoid-then-softmax
/// over `n` inputs.
pub fn simplex_bounds(n: usize) -> (f64, f64) {
    let e = std::f64::consts::E;
    let m = (n - 1) as f64;
    (1.0 / (1.0 + m * e), e / (e + m))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Whether gate logits are squashed before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingMode {
    /// Apply softmax directly to the linear gate output (experimental).
    #[serde(default)]
    pub skip_sigmoid: bool,
}

fn gate_logit(z: &[f64], params: &GateParams) -> Result<f64> {
    contract!(
        z.len() == params.weight.len(),
        "gate weight has length {} but feature vector has length {}",
        params.weight.len(),
        z.len()
    );
    Ok(params
        .weight
        .iter()
        .zip(z)
        .map(|(w, x)| w * x)
        .sum::<f64>()
        + params.bias)
}

/// `sigmoid(w·z + b)`.
pub fn gate_score(z: &FeatureVector, params: &GateParams) -> Result<f64> {
    Ok(sigmoid(gate_logit(&z.values, params)?))
}

/// Softmax over gate scores in `[0, 1]`.
pub fn normalize_scores(raw: &[f64]) -> Result<AttentionWeights> {
    contract!(!raw.is_empty(), "cannot normalize an empty score list");
    contract!(
        raw.iter().all(|r| (0.0..=1.0).contains(r)),
        "gate scores must lie in [0, 1], got {raw:?}"
    );
    Ok(AttentionWeights(softmax(raw)))
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_inputs(inputs: &[&[f64]], params: &[GateParams]) -> Result<usize> {
    contract!(
        inputs.len() == params.len(),
        "{} inputs but {} gates",
        inputs.len(),
        params.len()
    );
    let d = inputs[0].len();
    for (i, z) in inputs.iter().enumerate() {
        contract!(
            z.len() == d,
            "input {i} has length {} but input 0 has length {d}",
            z.len()
        );
        contract!(
            z.iter().all(|v| v.is_finite()),
            "input {i} contains non-finite values"
        );
    }
    Ok(d)
}

/// N-way gated fusion. Returns the fused values and the attention weights.
pub fn fuse(
    inputs: &[&[f64]],
    params: &[GateParams],
    mode: GatingMode,
) -> Result<(Vec<f64>, AttentionWeights)> {
    contract!(!inputs.is_empty(), "gated fusion needs at least one input");
    let d = check_inputs(inputs, params)?;
    let mut raw = Vec::with_capacity(inputs.len());
    for (z, p) in inputs.iter().zip(params) {
        let s = gate_logit(z, p)?;
        raw.push(if mode.skip_sigmoid { s } else { sigmoid(s) });
    }
    let a = softmax(&raw);
    let mut y = vec![0.0; d];
    for (z, ai) in inputs.iter().zip(&a) {
        for (yk, zk) in y.iter_mut().zip(z.iter()) {
            *yk += ai * zk;
        }
    }
    Ok((y, AttentionWeights(a)))
}

/// Fuses the ViT and CNN path outputs of one branch.
pub fn local_gam_fuse(
    z_vit: &FeatureVector,
    z_cnn: &FeatureVector,
    p_vit: &GateParams,
    p_cnn: &GateParams,
) -> Result<(FeatureVector, AttentionWeights)> {
    local_gam_fuse_with(z_vit, z_cnn, p_vit, p_cnn, GatingMode::default())
}

pub fn local_gam_fuse_with(
    z_vit: &FeatureVector,
    z_cnn: &FeatureVector,
    p_vit: &GateParams,
    p_cnn: &GateParams,
    mode: GatingMode,
) -> Result<(FeatureVector, AttentionWeights)> {
    contract!(
        z_vit.len() == z_cnn.len(),
        "ViT features have length {} but CNN features have length {}",
        z_vit.len(),
        z_cnn.len()
    );
    let (y, a) = fuse(
        &[&z_vit.values, &z_cnn.values],
        &[p_vit.clone(), p_cnn.clone()],
        mode,
    )?;
    Ok((FeatureVector::new(y, Origin::BranchOutput), a))
}

/// Fuses N >= 2 branch outputs.
pub fn global_gam_fuse(
    branch_outputs: &[FeatureVector],
    params: &[GateParams],
) -> Result<(FeatureVector, AttentionWeights)> {
    global_gam_fuse_with(branch_outputs, params, GatingMode::default())
}

pub fn global_gam_fuse_with(
    branch_outputs: &[FeatureVector],
    params: &[GateParams],
    mode: GatingMode,
) -> Result<(FeatureVector, AttentionWeights)> {
    contract!(
        branch_outputs.len() >= 2,
        "global fusion needs at least 2 branches, got {}",
        branch_outputs.len()
    );
    let inputs: Vec<&[f64]> = branch_outputs.iter().map(|f| f.values.as_slice()).collect();
    let (y, a) = fuse(&inputs, params, mode)?;
    Ok((FeatureVector::new(y, Origin::Fused), a))
}

/// Gradients of a scalar loss through [`fuse`].
#[derive(Clone, Debug)]
pub struct FuseGrads {
    pub inputs: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Vector-Jacobian product of [`fuse`] given `dL/dY`.
pub fn fuse_backward(
    inputs: &[&[f64]],
    params: &[GateParams],
    mode: GatingMode,
    grad_out: &[f64],
) -> Result<FuseGrads> {
    let d = check_inputs(inputs, params)?;
    contract!(
        grad_out.len() == d,
        "output gradient has length {} but inputs have length {d}",
        grad_out.len()
    );
    let n = inputs.len();
    let mut raw = Vec::with_capacity(n);
    let mut dr_ds = Vec::with_capacity(n);
    for (z, p) in inputs.iter().zip(params) {
        let s = gate_logit(z, p)?;
        if mode.skip_sigmoid {
            raw.push(s);
            dr_ds.push(1.0);
        } else {
            let r = sigmoid(s);
            raw.push(r);
            dr_ds.push(r * (1.0 - r));
        }
    }
    let a = softmax(&raw);
    let da: Vec<f64> = inputs
        .iter()
        .map(|z| z.iter().zip(grad_out).map(|(x, g)| x * g).sum())
        .collect();
    let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
    let mut out = FuseGrads {
        inputs: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        biases: Vec::with_capacity(n),
    };
    for i in 0..n {
        let ds = a[i] * (da[i] - mean_da) * dr_ds[i];
        out.inputs.push(
            grad_out
                .iter()
                .zip(&params[i].weight)
                .map(|(g, w)| a[i] * g + ds * w)
                .collect(),
        );
        out.weights.push(inputs[i].iter().map(|z| ds * z).collect());
        out.biases.push(ds);
    }
    Ok(out)
}

/// Differentiable fusion on autograd graphs.
pub mod graph {
    use crate::autograd::{Graph, Var};
    use crate::real::Real;

    use super::GatingMode;

    /// Handles to one gate's parameters: weight `[d, 1]`, bias `[1, 1]`.
    #[derive(Clone, Copy, Debug)]
    pub struct Gate {
        pub weight: Var,
        pub bias: Var,
    }

    /// Gated fusion of `[1, d]` rows. Returns `(Y, weights)` with `weights`
    /// a `[1, N]` row.
    pub fn fuse<F: Real>(
        g: &mut Graph<'_, F>,
        inputs: &[Var],
        gates: &[Gate],
        mode: GatingMode,
    ) -> (Var, Var) {
        assert_eq!(inputs.len(), gates.len(), "one gate per input");
        let scores: Vec<Var> = inputs
            .iter()
            .zip(gates)
            .map(|(z, gate)| {
                let s = g.matmul(*z, gate.weight);
                let s = g.add(s, gate.bias);
                if mode.skip_sigmoid {
                    s
                } else {
                    g.sigmoid(s)
                }
            })
            .collect();
        let row = g.concat_cols(&scores);
        let weights = g.softmax_rows(row);
        let terms: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let a = g.column(weights, i);
                g.scale_by(*z, a)
            })
            .collect();
        (g.sum(&terms), weights)
    }

    /// Unweighted mean of `[1, d]` rows; the ablation stand-in for [`fuse`].
    pub fn mean<F: Real>(g: &mut Graph<'_, F>, inputs: &[Var]) -> Var {
        let s = g.sum(inputs);
        g.scale(s, F::of(1.0 / inputs.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), Origin::Vit)
    }

    #[test]
    fn gate_score_examples() {
        let z = fv(&[3.0, -7.0]);
        assert_eq!(gate_score(&z, &GateParams::zeros(2)).unwrap(), 0.5);
        let sat = GateParams {
            weight: vec![0.0, 0.0],
            bias: 38.0,
        };
        assert!((gate_score(&z, &sat).unwrap() - 1.0).abs() < 1e-12);
        let p = GateParams {
            weight: vec![0.5, -0.25],
            bias: 0.1,
        };
        let s = gate_score(&fv(&[1.0, 2.0]), &p).unwrap();
        assert!((s - 0.524_979_187_478_939_7).abs() < 1e-12);
    }

    #[test]
    fn gate_score_dimension_mismatch_names_lengths() {
        let err = gate_score(&fv(&[1.0, 2.0, 3.0]), &GateParams::zeros(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn normalize_scores_examples() {
        assert_eq!(normalize_scores(&[0.5, 0.5]).unwrap().as_slice(), &[0.5, 0.5]);
        let w = normalize_scores(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((w.as_slice()[0] - e / (1.0 + e)).abs() < 1e-12);
        assert!((w.as_slice()[1] - 1.0 / (1.0 + e)).abs() < 1e-12);
        let w = normalize_scores(&[0.8, 0.3]).unwrap();
        assert!((w.as_slice()[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((w.as_slice()[1] - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!(normalize_scores(&[]).is_err());
        assert!(normalize_scores(&[1.2]).is_err());
    }

    #[test]
    fn local_fusion_examples() {
        let v = fv(&[0.3, -1.0, 2.0]);
        let p = GateParams {
            weight: vec![1.0, 2.0, -3.0],
            bias: 0.4,
        };
        let (y, _) = local_gam_fuse(&v, &v, &p, &GateParams::zeros(3)).unwrap();
        for (a, b) in y.values.iter().zip(&v.values) {
            assert!((a - b).abs() < 1e-12);
        }

        let (a, b) = (fv(&[1.0, 4.0]), fv(&[3.0, -2.0]));
        let (y, w) =
            local_gam_fuse(&a, &b, &GateParams::zeros(2), &GateParams::zeros(2)).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        assert_eq!(y.values, vec![2.0, 1.0]);

        // logits chosen so the sigmoid outputs are exactly 0.8 and 0.3
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let pv = GateParams {
            weight: vec![0.0, 0.0],
            bias: logit(0.8),
        };
        let pc = GateParams {
            weight: vec![0.0, 0.0],
            bias: logit(0.3),
        };
        let (y, _) = local_gam_fuse(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0]), &pv, &pc).unwrap();
        assert!((y.values[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((y.values[1] - 0.377_540_668_798_145_4).abs() < 1e-12);

        assert!(local_gam_fuse(&fv(&[1.0]), &fv(&[1.0, 2.0]), &pv, &pc).is_err());
    }

    #[test]
    fn global_fusion_examples() {
        let v = fv(&[0.1, 0.2, 0.3]);
        let params: Vec<_> = (0..4)
            .map(|i| GateParams {
                weight: vec![i as f64, 1.0, -1.0],
                bias: 0.2 * i as f64,
            })
            .collect();
        let (y, b) = global_gam_fuse(&vec![v.clone(); 4], &params).unwrap();
        for (a, e) in y.values.iter().zip(&v.values) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!((b.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let outs = vec![fv(&[1.0, 0.0]), fv(&[0.0, 1.0]), fv(&[2.0, 2.0]), fv(&[-1.0, 3.0])];
        let (y, b) = global_gam_fuse(&outs, &vec![GateParams::zeros(2); 4]).unwrap();
        assert_eq!(b.as_slice(), &[0.25; 4]);
        assert!((y.values[0] - 0.5).abs() < 1e-15 && (y.values[1] - 1.5).abs() < 1e-15);

        assert!(global_gam_fuse(&outs[..1], &[GateParams::zeros(2)]).is_err());
        assert!(global_gam_fuse(&outs, &vec![GateParams::zeros(2); 3]).is_err());
    }

    #[test]
    fn three_way_fusion_matches_direct_formula() {
        // basis vectors with sigmoid outputs 0.9, 0.5, 0.1
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let outs: Vec<_> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                fv(&v)
            })
            .collect();
        let params: Vec<_> = [0.9, 0.5, 0.1]
            .iter()
            .map(|p| GateParams {
                weight: vec![0.0; 3],
                bias: logit(*p),
            })
            .collect();
        let (y, _) = global_gam_fuse(&outs, &params).unwrap();
        let z: f64 = [0.9f64, 0.5, 0.1].iter().map(|r| r.exp()).sum();
        for (i, r) in [0.9f64, 0.5, 0.1].iter().enumerate() {
            assert!((y.values[i] - r.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_bounds_values() {
        let (lo, hi) = simplex_bounds(2);
        assert!((lo - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((hi - 0.731_058_578_630_004_9).abs() < 1e-12);
        let (lo, hi) = simplex_bounds(4);
        assert!((lo - 0.109_231_772_573_035_9).abs() < 1e-12, "{lo}");
        assert!((hi - 0.475_366_886_418_671_7).abs() < 1e-12, "{hi}");
    }

    #[test]
    fn skip_sigmoid_widens_weights() {
        let a = fv(&[1.0]);
        let b = fv(&[0.0]);
        let p = GateParams {
            weight: vec![10.0],
            bias: 0.0,
        };
        let mode = GatingMode { skip_sigmoid: true };
        let (_, w) = local_gam_fuse_with(&a, &b, &p, &GateParams::zeros(1), mode).unwrap();
        assert!(w.as_slice()[0] > 0.99);
    }

    mod props {
        use ndarray::Array2;
        use proptest::prelude::*;

        use super::super::*;
        use crate::autograd::{Graph, ParamStore};

        /// N inputs of dimension d with their gates.
        fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<GateParams>)> {
            (2usize..=4, 1usize..=8).prop_flat_map(|(n, d)| {
                let vecs = prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n);
                let gates = prop::collection::vec(
                    (prop::collection::vec(-2.0..2.0f64, d), -2.0..2.0f64)
                        .prop_map(|(weight, bias)| GateParams { weight, bias }),
                    n,
                );
                (vecs, gates)
            })
        }

        fn run(z: &[Vec<f64>], p: &[GateParams]) -> (Vec<f64>, Vec<f64>) {
            let refs: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
            let (y, a) = fuse(&refs, p, GatingMode::default()).unwrap();
            (y, a.into_vec())
        }

        proptest! {
            #[test]
            fn weights_on_bounded_simplex((z, p) in instance()) {
                let (_, a) = run(&z, &p);
                let (lo, hi) = simplex_bounds(z.len());
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for w in &a {
                    prop_assert!(*w >= lo - 1e-12 && *w <= hi + 1e-12, "{w} not in [{lo}, {hi}]");
                }
            }

            #[test]
            fn output_in_convex_hull((z, p) in instance()) {
                let (y, _) = run(&z, &p);
                for k in 0..y.len() {
                    let lo = z.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                    let hi = z.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(y[k] >= lo - 1e-12 && y[k] <= hi + 1e-12);
                }
            }

            #[test]
            fn permutation_equivariant((z, p) in instance(), shift in 1usize..4) {
                let n = z.len();
                let (y, a) = run(&z, &p);
                let rot = |i: usize| (i + shift) % n;
                let z2: Vec<_> = (0..n).map(|i| z[rot(i)].clone()).collect();
                let p2: Vec<_> = (0..n).map(|i| p[rot(i)].clone()).collect();
                let (y2, a2) = run(&z2, &p2);
                for (u, v) in y.iter().zip(&y2) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
                for i in 0..n {
                    prop_assert!((a2[i] - a[rot(i)]).abs() < 1e-12);
                }
            }

            #[test]
            fn identical_inputs_fuse_to_themselves((z, p) in instance()) {
                let same = vec![z[0].clone(); z.len()];
                let (y, _) = run(&same, &p);
                for (u, v) in y.iter().zip(&z[0]) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }

            #[test]
            fn graph_fusion_matches_scalar_path((z, p) in instance()) {
                let (y, a) = run(&z, &p);
                let d = z[0].len();
                let mut store = ParamStore::<f64>::new();
                let ids: Vec<_> = p
                    .iter()
                    .enumerate()
                    .map(|(i, gp)| {
                        let w = store
                            .insert(format!("w{i}"), Array2::from_shape_vec((d, 1), gp.weight.clone()).unwrap())
                            .unwrap();
                        let b = store.insert(format!("b{i}"), Array2::from_elem((1, 1), gp.bias)).unwrap();
                        (w, b)
                    })
                    .collect();
                let mut g = Graph::new(&store);
                let inputs: Vec<_> = z
                    .iter()
                    .map(|v| g.input(Array2::from_shape_vec((1, d), v.clone()).unwrap()))
                    .collect();
                let gates: Vec<_> = ids
                    .iter()
                    .map(|&(w, b)| graph::Gate { weight: g.param(w), bias: g.param(b) })
                    .collect();
                let (gy, ga) = graph::fuse(&mut g, &inputs, &gates, GatingMode::default());
                for (u, v) in g.value(gy).iter().zip(&y) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
                for (u, v) in g.value(ga).iter().zip(&a) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }

            #[test]
            fn backward_matches_finite_differences(
                (z, p) in instance(),
                seed in prop::collection::vec(-1.0..1.0f64, 8),
            ) {
                let d = z[0].len();
                let gout: Vec<f64> = seed[..d].to_vec();
                let loss = |z: &[Vec<f64>], p: &[GateParams]| {
                    run(z, p).0.iter().zip(&gout).map(|(y, g)| y * g).sum::<f64>()
                };
                let refs: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
                let grads = fuse_backward(&refs, &p, GatingMode::default(), &gout).unwrap();
                let h = 1e-5;
                let close = |a: f64, fd: f64| (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0);
                for i in 0..z.len() {
                    for k in 0..d {
                        let (mut zp, mut zm) = (z.clone(), z.clone());
                        zp[i][k] += h;
                        zm[i][k] -= h;
                        let fd = (loss(&zp, &p) - loss(&zm, &p)) / (2.0 * h);
                        prop_assert!(close(grads.inputs[i][k], fd));
                        let (mut pp, mut pm) = (p.to_vec(), p.to_vec());
                        pp[i].weight[k] += h;
                        pm[i].weight[k] -= h;
                        let fd = (loss(&z, &pp) - loss(&z, &pm)) / (2.0 * h);
                        prop_assert!(close(grads.weights[i][k], fd));
                    }
                    let (mut pp, mut pm) = (p.to_vec(), p.to_vec());
                    pp[i].bias += h;
                    pm[i].bias -= h;
                    let fd = (loss(&z, &pp) - loss(&z, &pm)) / (2.0 * h);
                    prop_assert!(close(grads.biases[i], fd));
                }
            }
        }
    }
}
