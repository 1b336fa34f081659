//! Minimal reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. All
//! values are `Array2<F>`; higher-rank data (volumes, feature maps) are
//! flattened to `[channels, depth*height*width]` and the few operations that
//! care about geometry (per-slice convolution, patch extraction) carry it in
//! their op record. Calling [`Graph::backward`] on a `[1, 1]` scalar walks the
//! tape in reverse and returns the gradient of every node.

mod ops;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub use ops::ConvGeom;
pub use params::{ParamId, ParamStore};

use crate::real::Real;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

pub(crate) enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    SoftmaxRows(Var),
    MeanRows(Var),
    MeanCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    Dropout(Var, Array2<F>),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Array2<F>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    BceWithLogits {
        logit: Var,
        target: F,
    },
}

pub(crate) struct Node<F> {
    value: Option<Array2<F>>,
    op: Op<F>,
}

/// Tape of one forward pass.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'p, F: Real> Graph<'p, F> {
    /// Evaluation graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            rng: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamStore<F>, rng: ChaCha8Rng) -> Self {
        let mut g = Graph::new(params);
        g.rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// shared weights accumulate a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        let x = self.value(v);
        assert_eq!(x.dim(), (1, 1), "scalar() on non-scalar node");
        x[[0, 0]]
    }

    /// Per-head attention probabilities recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        assert_eq!(self.value(loss).dim(), (1, 1), "backward() needs a scalar");
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut param_vars: Vec<(ParamId, Var)> =
            self.param_vars.iter().map(|(k, v)| (*k, *v)).collect();
        param_vars.sort();
        Gradients { grads, param_vars }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a node, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        self.param_vars
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(parameter, gradient)` pairs for every parameter touched by the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<F>)> {
        self.param_vars
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}
