use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use super::{Graph, Op, Var};
use crate::real::Real;

/// Geometry of a per-slice 2-D convolution over a `[c_in, depth*height*width]`
/// input. The kernel never mixes slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_positions(&self) -> usize {
        self.depth * self.out_height() * self.out_width()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn im2col<F: Real>(x: &Array2<F>, g: &ConvGeom) -> Array2<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let n = g.out_positions();
    let mut cols = vec![F::zero(); g.patch_len() * n];
    let xs = x.as_slice().expect("conv input must be contiguous");
    let plane = g.height * g.width;
    for ci in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for d in 0..g.depth {
                    let src = &xs[ci * g.depth * plane + d * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[d * oh * ow + oy * ow..][..ow];
                        for (ox, out) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *out = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.patch_len(), n), cols).unwrap()
}

fn col2im<F: Real>(dcols: &Array2<F>, g: &ConvGeom) -> Array2<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let n = g.out_positions();
    let plane = g.height * g.width;
    let mut dx = vec![F::zero(); g.c_in * g.depth * plane];
    let dc = dcols.as_standard_layout();
    let dcs = dc.as_slice().unwrap();
    for ci in 0..g.c_in {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &dcs[row * n..(row + 1) * n];
                for d in 0..g.depth {
                    let dst = &mut dx[ci * g.depth * plane + d * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let src_row = &src[d * oh * ow + oy * ow..][..ow];
                        for (ox, v) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.c_in, g.depth * plane), dx).unwrap()
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `x + bias` with `bias: [1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.dim(), (1, xv.ncols()), "add_row: bias shape");
        let v = xv + bv;
        self.push(v, Op::AddRow(x, bias))
    }

    /// `x + bias` with `bias: [rows, 1]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.dim(), (xv.nrows(), 1), "add_col: bias shape");
        let v = xv + bv;
        self.push(v, Op::AddCol(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// `s * x` where `s` is a `[1, 1]` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(x) * c;
        self.push(v, Op::ScaleBy(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // written so NaN passes through instead of becoming 0
        let v = self.value(x).mapv(|a| if a < F::zero() { F::zero() } else { a });
        self.push(v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let v = self
            .value(x)
            .mapv(|a| if a > F::zero() { a } else { a * slope });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (k, c, half) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5));
        let v = self
            .value(x)
            .mapv(|a| half * a * (F::one() + (k * (a + c * a * a * a)).tanh()));
        self.push(v, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `[1, cols]` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols();
        let n = F::of(cols as f64);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|a| a - mean);
            let var = row.iter().map(|a| *a * *a).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|a| a * is);
            inv_std.push(is);
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.dim(), (1, cols), "layer_norm: gamma shape");
        assert_eq!(bv.dim(), (1, cols), "layer_norm: beta shape");
        let v = &xhat * gv + bv;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        softmax_rows_inplace(&mut v);
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    /// Mean over columns: `[r, c] -> [r, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        self.push(v, Op::MeanCols(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    /// Horizontal concatenation of nodes that share a row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(xs.to_vec()))
    }

    /// Column `j` of a single-row node, as `[1, 1]`.
    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), 1, "column: expects a row vector");
        let v = Array2::from_elem((1, 1), xv[[0, j]]);
        self.push(v, Op::Column(x, j))
    }

    /// Sum of same-shape nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut acc = xs[0];
        for x in &xs[1..] {
            acc = self.add(acc, *x);
        }
        acc
    }

    /// Inverted dropout; identity on evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let dim = self.value(x).dim();
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - p;
        let scale = F::of(1.0 / keep);
        let mask = Array2::from_shape_simple_fn(dim, || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout(x, mask))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[tokens, 3*embed]` laid out as `[Q | K | V]`; the output is
    /// `[tokens, embed]` with heads concatenated along columns.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let x = self.value(qkv);
        let (t, three_e) = x.dim();
        assert_eq!(three_e % 3, 0, "attention: qkv width");
        let e = three_e / 3;
        assert_eq!(e % heads, 0, "attention: heads must divide embed");
        let dh = e / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((t, e));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = x.slice(s![.., h * dh..(h + 1) * dh]);
            let k = x.slice(s![.., e + h * dh..e + (h + 1) * dh]);
            let v = x.slice(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            p.mapv_inplace(|a| a * scale);
            softmax_rows_inplace(&mut p);
            out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        self.push(out, Op::Attention { qkv, heads, probs })
    }

    /// Per-slice 2-D convolution. `x: [c_in, D*H*W]`, `w: [c_out, c_in*k*k]`,
    /// `b: [c_out, 1]`; output `[c_out, D*out_h*out_w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.dim(),
            (geom.c_in, geom.depth * geom.height * geom.width),
            "conv2d: input shape"
        );
        assert_eq!(self.value(w).dim(), (geom.c_out, geom.patch_len()), "conv2d: weight shape");
        assert_eq!(self.value(b).dim(), (geom.c_out, 1), "conv2d: bias shape");
        let cols = if xv.is_standard_layout() {
            im2col(xv, &geom)
        } else {
            im2col(&xv.as_standard_layout().to_owned(), &geom)
        };
        let v = self.value(w).dot(&cols) + self.value(b);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather: index length");
        let xv = self.value(x).as_standard_layout();
        let xs = xv.as_slice().unwrap();
        let data: Vec<F> = index.iter().map(|&i| xs[i]).collect();
        let v = Array2::from_shape_vec(shape, data).unwrap();
        self.push(v, Op::Gather { x, index })
    }

    /// Numerically stable binary cross-entropy on a `[1, 1]` logit against a
    /// (possibly soft) target in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logit: Var, target: F) -> Var {
        let l = self.scalar(logit);
        let loss = l.max(F::zero()) - l * target + (F::one() + (-l.abs()).exp()).ln();
        self.push(Array2::from_elem((1, 1), loss), Op::BceWithLogits { logit, target })
    }

    pub(super) fn propagate(&self, i: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let out = || self.nodes[i].value.as_ref().unwrap();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|a| -a));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, g.clone());
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(x, b) => {
                acc(grads, *x, g.clone());
                acc(grads, *b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(x, c) => acc(grads, *x, g * *c),
            Op::ScaleBy(x, s) => {
                let c = self.scalar(*s);
                let ds = (g * self.value(*x)).sum();
                acc(grads, *x, g * c);
                acc(grads, *s, Array2::from_elem((1, 1), ds));
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(out())
                    .for_each(|d, &y| *d *= y * (F::one() - y));
                acc(grads, *x, d);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &a| {
                    if a <= F::zero() {
                        *d = F::zero()
                    }
                });
                acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &a| {
                    if a <= F::zero() {
                        *d *= *slope
                    }
                });
                acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let (k, c, half) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5));
                let three = F::of(3.0);
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &a| {
                    let t = (k * (a + c * a * a * a)).tanh();
                    let dt = (F::one() - t * t) * k * (F::one() + three * c * a * a);
                    *d *= half * (F::one() + t) + half * a * dt;
                });
                acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let dgamma = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = g * gv;
                let n = F::of(xhat.ncols() as f64);
                let mut dx = Array2::zeros(xhat.dim());
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dhx = dh.iter().zip(xh.iter()).map(|(a, b)| *a * *b).sum::<F>();
                    let is = inv_std[r];
                    Zip::from(&mut row)
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &d, &h| *o = is / n * (n * d - sum_dh - h * sum_dhx));
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::SoftmaxRows(x) => {
                let y = out();
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * s);
                }
                acc(grads, *x, d);
            }
            Op::MeanRows(x) => {
                let r = self.value(*x).nrows();
                let d = g.broadcast(self.value(*x).dim()).unwrap().to_owned() / F::of(r as f64);
                acc(grads, *x, d);
            }
            Op::MeanCols(x) => {
                let c = self.value(*x).ncols();
                let d = g.broadcast(self.value(*x).dim()).unwrap().to_owned() / F::of(c as f64);
                acc(grads, *x, d);
            }
            Op::Transpose(x) => acc(grads, *x, g.t().to_owned()),
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for x in xs {
                    let c = self.value(*x).ncols();
                    acc(grads, *x, g.slice(s![.., off..off + c]).to_owned());
                    off += c;
                }
            }
            Op::Column(x, j) => {
                let mut d = Array2::zeros(self.value(*x).dim());
                d[[0, *j]] = g[[0, 0]];
                acc(grads, *x, d);
            }
            Op::Dropout(x, mask) => acc(grads, *x, g * mask),
            Op::Attention { qkv, heads, probs } => {
                let x = self.value(*qkv);
                let (t, three_e) = x.dim();
                let e = three_e / 3;
                let dh = e / heads;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let mut dx = Array2::zeros((t, three_e));
                for (h, p) in probs.iter().enumerate() {
                    let q = x.slice(s![.., h * dh..(h + 1) * dh]);
                    let k = x.slice(s![.., e + h * dh..e + (h + 1) * dh]);
                    let v = x.slice(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh]);
                    let go = g.slice(s![.., h * dh..(h + 1) * dh]);
                    let dv = p.t().dot(&go);
                    let mut ds = go.dot(&v.t());
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = drow.iter().zip(prow.iter()).map(|(a, b)| *a * *b).sum::<F>();
                        Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                    }
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
                    dx.slice_mut(s![.., e + h * dh..e + (h + 1) * dh]).assign(&dk);
                    dx.slice_mut(s![.., 2 * e + h * dh..2 * e + (h + 1) * dh])
                        .assign(&dv);
                }
                acc(grads, *qkv, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let dw = g.dot(&cols.t());
                let db = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dcols = self.value(*w).t().dot(g);
                acc(grads, *w, dw);
                acc(grads, *b, db);
                acc(grads, *x, col2im(&dcols, geom));
            }
            Op::Gather { x, index } => {
                let dim = self.value(*x).dim();
                let mut dx = vec![F::zero(); dim.0 * dim.1];
                let gs = g.as_standard_layout();
                for (gi, &src) in gs.iter().zip(index.iter()) {
                    dx[src] += *gi;
                }
                acc(grads, *x, Array2::from_shape_vec(dim, dx).unwrap());
            }
            Op::BceWithLogits { logit, target } => {
                let l = self.scalar(*logit);
                let d = (sigmoid(l) - *target) * g[[0, 0]];
                acc(grads, *logit, Array2::from_elem((1, 1), d));
            }
        }
    }
}

fn acc<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, delta: Array2<F>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

pub(crate) fn softmax_rows_inplace<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|a| (a - m).exp());
        let s = row.sum();
        row.mapv_inplace(|a| a / s);
    }
}

