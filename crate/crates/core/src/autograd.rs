//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation in evaluation order. [`Tape::backward`]
//! walks it once in reverse and accumulates gradients for every node that
//! depends on a trainable leaf. All arithmetic is `f64`; accumulation order
//! is the reverse tape order, so gradients are reproducible bit for bit.

use std::rc::Rc;

use crate::tensor::{sigmoid, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Exp(Var),
    LogClamped { x: Var, lo: f64, hi: f64 },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Rope {
        x: Var,
        heads: usize,
        table: Rc<RopeTable>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    Transpose(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, valid: usize },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Cosine/sine table for rotary position encoding, laid out `[pos][freq]`.
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(len: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim.is_multiple_of(2), "rotary head dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        RopeTable { half, cos, sin }
    }

    fn len(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` with the `1×c` row `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "add_row bias shape");
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for i in 0..r {
            for (o, bb) in v.row_mut(i).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        self.push(v, Op::AddRow(x, b), &[x, b])
    }

    /// `x · s` for a `1×1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a * k);
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a + k);
        self.push(v, Op::AddConst(x), &[x])
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_const(n, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    /// `log(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi).ln());
        self.push(v, Op::LogClamped { x, lo, hi }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| 0.5 * a * (1.0 + gelu_inner(a).tanh()));
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut xhat = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, a) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (a - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..r {
            for ((o, gg), bb) in out.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row-wise softmax. `mask` (row-major, `true` = valid) removes entries;
    /// a row with no valid entry becomes all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c, "softmax mask shape");
        }
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let valid = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(i);
            let mut total = 0.0;
            for j in 0..c {
                if valid(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            for (o, a) in out.row_mut(i).iter_mut().zip(row) {
                *o = a - lse;
            }
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Rotary position encoding over `heads` equal column blocks; row `t` is
    /// position `t`. Within each head, column `i` pairs with `i + d/2`.
    pub fn rope(&mut self, x: Var, heads: usize, table: Rc<RopeTable>) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        assert!(table.len() >= r, "rope table shorter than sequence");
        assert_eq!(c, heads * table.half * 2, "rope width");
        let mut out = xv.clone();
        rope_apply(&mut out, xv, heads, &table, false);
        self.push(out, Op::Rope { x, heads, table }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let r = xv.rows();
        let mut out = Mat::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let r = self.shape(xs[0]).0;
        let total: usize = xs.iter().map(|&v| self.shape(v).1).sum();
        let mut out = Mat::zeros(r, total);
        let mut off = 0;
        for &v in xs {
            let xv = self.value(v);
            assert_eq!(xv.rows(), r, "concat_cols rows");
            let c = xv.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + c].copy_from_slice(xv.row(i));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let c = self.shape(xs[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let xv = self.value(v);
            assert_eq!(xv.cols(), c, "concat_rows cols");
            data.extend_from_slice(xv.data());
            rows += xv.rows();
        }
        self.push(Mat::from_vec(rows, c, data), Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Rows `idx` of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Mat::from_vec(idx.len(), c, data);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Flat elements `idx` of `x` as an `n×1` column.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let out = Mat::column(idx.iter().map(|&i| xv.data()[i]).collect());
        self.push(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), &[x])
    }

    /// Divide each row by its L2 norm (floored at `eps`).
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, _) = xv.shape();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = xv.row(i).iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
            out.row_mut(i).iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        self.push(out, Op::RowNormalize { x, norms }, &[x])
    }

    /// Single-output 1-D convolution over time with replicate padding.
    ///
    /// `x` is `L×H`, `w` is `K×H` (K odd), `b` is `1×1`. Output is `L×1`;
    /// rows at or beyond `valid` are zero and never read.
    pub fn conv1d_replicate(&mut self, x: Var, w: Var, b: Var, valid: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (l, h) = xv.shape();
        let (k, wh) = wv.shape();
        assert_eq!(h, wh, "conv width");
        assert!(valid >= 1 && valid <= l, "conv valid length");
        let half = (k / 2) as isize;
        let bias = self.value(b).item();
        let mut out = Mat::zeros(l, 1);
        for t in 0..valid {
            let mut acc = bias;
            for kk in 0..k {
                let src = (t as isize + kk as isize - half).clamp(0, valid as isize - 1) as usize;
                acc += dot(wv.row(kk), xv.row(src));
            }
            out.set(t, 0, acc);
        }
        self.push(out, Op::Conv1d { x, w, b, valid }, &[x, w, b])
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Const => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Mat>], v: Var, d: Mat| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.matmul_nt(val(*b)));
                }
                if wants(*b) {
                    acc(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if wants(*a) {
                    acc(grads, *a, g.matmul(val(*b)));
                }
                if wants(*b) {
                    acc(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, g.clone());
                if wants(*b) {
                    let (r, c) = g.shape();
                    let mut db = Mat::zeros(1, c);
                    for i in 0..r {
                        for (o, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s).item();
                if wants(*x) {
                    acc(grads, *x, g.map(|a| a * k));
                }
                if wants(*s) {
                    acc(grads, *s, Mat::scalar(dot(g.data(), val(*x).data())));
                }
            }
            Op::Scale(x, k) => acc(grads, *x, g.map(|a| a * k)),
            Op::AddConst(x) => acc(grads, *x, g.clone()),
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gg, y| gg * y * (1.0 - y));
                acc(grads, *x, d);
            }
            Op::Exp(x) => acc(grads, *x, g.zip_map(&node.value, |gg, y| gg * y)),
            Op::LogClamped { x, lo, hi } => {
                let d = g.zip_map(val(*x), |gg, a| {
                    if a < *lo || a > *hi {
                        0.0
                    } else {
                        gg / a
                    }
                });
                acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g.zip_map(val(*x), |gg, a| gg * gelu_grad(a));
                acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.shape();
                let gam = val(*gamma).data();
                if wants(*x) {
                    let mut dx = Mat::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(grads, *x, dx);
                }
                if wants(*gamma) || wants(*beta) {
                    let mut dg = Mat::zeros(1, c);
                    let mut db = Mat::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    acc(grads, *gamma, dg);
                    acc(grads, *beta, db);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let s = dot(yr, gr);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let gr = g.row(i);
                    let s: f64 = gr.iter().sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = gr[j] - y.get(i, j).exp() * s;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Rope { x, heads, table } => {
                let mut dx = g.clone();
                rope_apply(&mut dx, g, *heads, table, true);
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = val(*x).shape();
                    let w = g.cols();
                    let mut dx = Mat::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &v in xs {
                    let (r, c) = val(v).shape();
                    if wants(v) {
                        let mut d = Mat::zeros(r, c);
                        for i in 0..r {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(grads, v, d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let r = val(v).rows();
                    if wants(v) {
                        acc(grads, v, g.slice_rows(off, r));
                    }
                    off += r;
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let (r, c) = val(*x).shape();
                    let mut dx = Mat::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Gather { x, idx } => {
                if wants(*x) {
                    let (r, c) = val(*x).shape();
                    let mut dx = Mat::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        dx.data_mut()[i] += g.data()[k];
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(grads, *x, Mat::filled(r, c, g.item()));
            }
            Op::Transpose(x) => acc(grads, *x, g.transpose()),
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let raw_norm = val(*x).row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
                    let o = dx.row_mut(i);
                    if raw_norm < norms[i] {
                        // floored: plain scaling
                        for j in 0..c {
                            o[j] = gr[j] / norms[i];
                        }
                    } else {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            o[j] = (gr[j] - yr[j] * s) / norms[i];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Conv1d { x, w, b, valid } => {
                let xv = val(*x);
                let wv = val(*w);
                let (l, h) = xv.shape();
                let k = wv.rows();
                let half = (k / 2) as isize;
                let mut dx = Mat::zeros(l, h);
                let mut dw = Mat::zeros(k, h);
                let mut db = 0.0;
                for t in 0..*valid {
                    let gt = g.get(t, 0);
                    if gt == 0.0 {
                        continue;
                    }
                    db += gt;
                    for kk in 0..k {
                        let src =
                            (t as isize + kk as isize - half).clamp(0, *valid as isize - 1) as usize;
                        let wr = wv.row(kk);
                        let xr = xv.row(src);
                        for (o, a) in dw.row_mut(kk).iter_mut().zip(xr) {
                            *o += gt * a;
                        }
                        for (o, a) in dx.row_mut(src).iter_mut().zip(wr) {
                            *o += gt * a;
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, Mat::scalar(db));
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(a: f64) -> f64 {
    GELU_C * (a + 0.044715 * a * a * a)
}

fn gelu_grad(a: f64) -> f64 {
    let t = gelu_inner(a).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * a * a)
}

/// Rotate `src` into `out` (same shape). `inverse` applies the transpose
/// rotation, which is the backward map.
fn rope_apply(out: &mut Mat, src: &Mat, heads: usize, table: &RopeTable, inverse: bool) {
    let half = table.half;
    let d = 2 * half;
    let sign = if inverse { -1.0 } else { 1.0 };
    for t in 0..src.rows() {
        let srow = src.row(t);
        let orow = out.row_mut(t);
        for h in 0..heads {
            let base = h * d;
            for i in 0..half {
                let cos = table.cos[t * half + i];
                let sin = sign * table.sin[t * half + i];
                let x1 = srow[base + i];
                let x2 = srow[base + half + i];
                orow[base + i] = x1 * cos - x2 * sin;
                orow[base + half + i] = x2 * cos + x1 * sin;
            }
        }
    }
}

/// Largest relative error between reverse-mode gradients of the scalar `f`
/// and central differences with step `h`, over every entry of every input.
/// The denominator is floored at `1e-4` so near-zero gradients are compared
/// absolutely.
pub fn gradient_error(inputs: &[Mat], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let eval = |ms: &[Mat]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ms.iter().map(|m| t.leaf(m.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, m) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], m.shape());
        for idx in 0..m.len() {
            let orig = m.data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let fp = eval(&work);
            work[k].data_mut()[idx] = orig - h;
            let fm = eval(&work);
            work[k].data_mut()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.data()[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}
