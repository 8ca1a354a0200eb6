//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly (values are computed at
//! construction) and [`Graph::backward`] walks the tape in reverse. The
//! graph borrows the [`ParamStore`]; each parameter gets a single leaf node
//! no matter how often it is used, so gradients accumulate correctly.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Im2Col(Var, Im2ColSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Im2ColSpec {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2ColSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Depends on at least one parameter.
    needs: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => Vec::new(),
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Silu(a) | Sigmoid(a) | Tanh(a) | Exp(a) | Ln(a) | Sqrt(a)
            | Clamp(a, _, _) | SoftmaxRows(a) | LogSoftmaxRows(a) | SumAll(a) | SumCols(a) | SliceRows(a, _)
            | SliceCols(a, _) | Im2Col(a, _) => vec![*a],
            ConcatCols(p) | ConcatRows(p) => p.clone(),
        }
    }
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    /// A graph without parameters; only constants and leaves.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new(), param_nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = matches!(op, Op::Param) || op.inputs().iter().any(|v| self.nodes[v.0].needs);
        self.nodes.push(Node { value, op, needs });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input. Gradients are still tracked for it (see [`Backward::grad`]),
    /// but nothing it was computed from receives them, which makes it the
    /// stop-gradient primitive.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies the current value of `v` into a fresh leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    /// `a[n,m] + row[1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `a[n,m] * col[n,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((av.rows, 1), cv.shape(), "mul_col shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            let s = cv.data[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// Square root; the gradient at exactly zero is defined as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Elementwise clamp. Gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[n,m] → [n,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        self.push(Tensor::from_vec(av.rows, 1, data), Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
                c0 += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let data = av.data[start * av.cols..(start + len) * av.cols].to_vec();
        let out = Tensor::from_vec(len, av.cols, data);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Unfolds a `[h·w, c]` map into `[out_h·out_w, k·k·c]` patches, column
    /// index `(ky·k + kx)·c + channel`, zero padding.
    pub fn im2col(&mut self, a: Var, spec: Im2ColSpec) -> Var {
        let out = im2col(self.value(a), spec);
        self.push(out, Op::Im2Col(a, spec))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Backward {
        self.reverse(loss, false)
    }

    /// Reverse pass that only follows paths reaching parameters; gradients
    /// of constant-only nodes are left empty.
    pub fn backward_params(&self, loss: Var) -> Backward {
        self.reverse(loss, true)
    }

    fn reverse(&self, loss: Var, prune: bool) -> Backward {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if prune && !node.needs {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads, prune);
            grads[idx] = Some(g);
        }
        Backward { grads, param_nodes: self.param_nodes.clone() }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], prune: bool) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: &Var| !prune || self.nodes[v.0].needs;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    accum(grads, *a, g.matmul_nt(val(*b)));
                }
                if want(b) {
                    accum(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ; da = g b, db = gᵀ a
                if want(a) {
                    accum(grads, *a, g.matmul(val(*b)));
                }
                if want(b) {
                    accum(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if want(a) {
                    accum(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if want(b) {
                    accum(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                accum(grads, *a, g.zip_map(bv, |x, y| x / y));
                let q = node.value.zip_map(bv, |o, y| o / y);
                accum(grads, *b, g.zip_map(&q, |x, q| -x * q));
            }
            Op::AddRow(a, row) => {
                accum(grads, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accum(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(cv.rows, 1);
                for r in 0..g.rows {
                    let s = cv.data[r];
                    gc.data[r] = crate::tensor::dot(g.row(r), av.row(r));
                    for x in ga.row_mut(r) {
                        *x *= s;
                    }
                }
                accum(grads, *a, ga);
                accum(grads, *col, gc);
            }
            Op::Scale(a, s) => accum(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accum(grads, *a, g.clone()),
            Op::Relu(a) => accum(grads, *a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Silu(a) => accum(
                grads,
                *a,
                g.zip_map(val(*a), |x, y| {
                    let s = sigmoid(y);
                    x * (s + y * s * (1.0 - s))
                }),
            ),
            Op::Sigmoid(a) => accum(grads, *a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => accum(grads, *a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t))),
            Op::Exp(a) => accum(grads, *a, g.zip_map(&node.value, |x, e| x * e)),
            Op::Ln(a) => accum(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sqrt(a) => accum(grads, *a, g.zip_map(&node.value, |x, s| if s > 0.0 { x / (2.0 * s) } else { 0.0 })),
            Op::Clamp(a, lo, hi) => {
                accum(grads, *a, g.zip_map(val(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }))
            }
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut ga = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let d = crate::tensor::dot(sr, gr);
                    for ((o, &si), &gi) in ga.row_mut(r).iter_mut().zip(sr).zip(gr) {
                        *o = si * (gi - d);
                    }
                }
                accum(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let ls = &node.value;
                let mut ga = Tensor::zeros(ls.rows, ls.cols);
                for r in 0..ls.rows {
                    let gr = g.row(r);
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &l), &gi) in ga.row_mut(r).iter_mut().zip(ls.row(r)).zip(gr) {
                        *o = gi - l.exp() * gsum;
                    }
                }
                accum(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                accum(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(g.data[i]);
                }
                accum(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = val(p).cols;
                    if !want(&p) {
                        c0 += pc;
                        continue;
                    }
                    let mut gp = Tensor::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                    }
                    accum(grads, p, gp);
                    c0 += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let pr = val(p).rows;
                    let gp = Tensor::from_vec(pr, g.cols, g.data[r0 * g.cols..(r0 + pr) * g.cols].to_vec());
                    accum(grads, p, gp);
                    r0 += pr;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                ga.data[start * av.cols..start * av.cols + g.len()].copy_from_slice(&g.data);
                accum(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                accum(grads, *a, ga);
            }
            Op::Im2Col(a, spec) => {
                if !want(a) {
                    return;
                }
                let av = val(*a);
                accum(grads, *a, col2im(g, spec, av.cols));
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<Var>>,
}

impl Backward {
    /// Gradient of the loss with respect to any node; `None` if it does not
    /// influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> Gradients {
        Gradients {
            grads: self.param_nodes.iter().map(|v| v.and_then(|v| self.grads[v.0].clone())).collect(),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn im2col(x: &Tensor, s: Im2ColSpec) -> Tensor {
    assert_eq!(x.rows, s.height * s.width, "im2col input rows {} != {}x{}", x.rows, s.height, s.width);
    let c = x.cols;
    let (oh, ow) = (s.out_height(), s.out_width());
    let kk = s.kernel * s.kernel * c;
    let mut out = Tensor::zeros(oh * ow, kk);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = out.row_mut(oy * ow + ox);
            for ky in 0..s.kernel {
                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                if iy < 0 || iy >= s.height as isize {
                    continue;
                }
                for kx in 0..s.kernel {
                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                    if ix < 0 || ix >= s.width as isize {
                        continue;
                    }
                    let src = x.row(iy as usize * s.width + ix as usize);
                    let dst = (ky * s.kernel + kx) * c;
                    row[dst..dst + c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn col2im(g: &Tensor, s: &Im2ColSpec, c: usize) -> Tensor {
    let (oh, ow) = (s.out_height(), s.out_width());
    let mut out = Tensor::zeros(s.height * s.width, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = g.row(oy * ow + ox);
            for ky in 0..s.kernel {
                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                if iy < 0 || iy >= s.height as isize {
                    continue;
                }
                for kx in 0..s.kernel {
                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                    if ix < 0 || ix >= s.width as isize {
                        continue;
                    }
                    let dst = out.row_mut(iy as usize * s.width + ix as usize);
                    let src = &row[(ky * s.kernel + kx) * c..(ky * s.kernel + kx + 1) * c];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for a unary graph builder.
    fn check_unary(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::detached();
        let xv = g.constant(x.clone());
        let y = build(&mut g, xv);
        let (r, c) = g.shape(y);
        let w = random(&mut rng, r, c);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        let loss = g.sum_all(prod);
        let analytic = g.backward(loss).grad(xv).cloned().unwrap_or(Tensor::zeros(x.rows, x.cols));

        let eval = |x: &Tensor| {
            let mut g = Graph::detached();
            let xv = g.constant(x.clone());
            let y = build(&mut g, xv);
            g.value(y).zip_map(&w, |a, b| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.data[i];
            assert!((a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "index {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check_unary(x.clone(), |g, v| g.silu(v));
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.exp(v));
        check_unary(x.map(|v| v.abs() + 0.5), |g, v| g.ln(v));
        check_unary(x.map(|v| v.abs() + 0.5), |g, v| g.sqrt(v));
        check_unary(x.clone(), |g, v| g.softmax_rows(v));
        check_unary(x.clone(), |g, v| g.log_softmax_rows(v));
        check_unary(x.clone(), |g, v| g.sum_cols(v));
        check_unary(x.clone(), |g, v| g.mean_all(v));
        check_unary(x.clone(), |g, v| {
            let a = g.slice_cols(v, 1, 2);
            let b = g.slice_rows(v, 0, 2);
            let bt = g.slice_cols(b, 0, 2);
            let s = g.concat_rows(&[a, bt]);
            g.concat_cols(&[s, s])
        });
        check_unary(x.clone(), |g, v| {
            let d = g.add_scalar(v, 3.0);
            g.div(v, d)
        });
    }

    #[test]
    fn broadcast_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 4, 2);
        let row = random(&mut rng, 1, 4);
        let col = random(&mut rng, 3, 1);
        check_unary(x.clone(), |g, v| {
            let wv = g.constant(w.clone());
            g.matmul(v, wv)
        });
        check_unary(w.clone(), |g, v| {
            let xv = g.constant(x.clone());
            g.matmul(xv, v)
        });
        check_unary(x.clone(), |g, v| g.matmul_nt(v, v));
        check_unary(x.clone(), |g, v| {
            let r = g.constant(row.clone());
            g.add_row(v, r)
        });
        check_unary(row.clone(), |g, v| {
            let xv = g.constant(x.clone());
            g.add_row(xv, v)
        });
        check_unary(x.clone(), |g, v| {
            let c = g.constant(col.clone());
            g.mul_col(v, c)
        });
        check_unary(col.clone(), |g, v| {
            let xv = g.constant(x.clone());
            g.mul_col(xv, v)
        });
    }

    #[test]
    fn im2col_gradient_and_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = Im2ColSpec { height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let x = random(&mut rng, 20, 2);
        check_unary(x.clone(), |g, v| g.im2col(v, spec));

        // 1x1 kernel, stride 1, no pad reproduces the input.
        let id = Im2ColSpec { height: 5, width: 4, kernel: 1, stride: 1, pad: 0 };
        let mut g = Graph::detached();
        let xv = g.constant(x.clone());
        let cols = g.im2col(xv, id);
        assert_eq!(g.value(cols), &x);
        assert_eq!((spec.out_height(), spec.out_width()), (3, 2));
    }

    #[test]
    fn shared_parameter_gets_accumulated_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let a = g.param(p);
        let b = g.param(p);
        assert_eq!(a, b);
        let sq = g.mul(a, b);
        let grads = g.backward(sq).param_grads();
        assert_eq!(grads.get(p).unwrap().item(), 6.0);
    }
}
