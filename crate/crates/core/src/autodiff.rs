//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! parameter leaf. Constants never receive gradients and their subgraphs are
//! skipped during the backward sweep.

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm floor used by [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-8;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Col {
        x: Var,
        col: usize,
    },
    Im2col {
        x: Var,
        height: usize,
        width: usize,
    },
    Upsample {
        x: Var,
        width: usize,
        factor: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamped_rows: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rows whose norm fell below [`NORM_EPS`] in `normalize_rows` so far.
    pub fn clamped_rows(&self) -> usize {
        self.clamped_rows
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt {:?} x {:?}^T", av.shape(), bv.shape());
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.shape(), (1, xv.cols()), "row broadcast shape mismatch");
        let mut out = xv.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o = f(*o, b);
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(out, op, ng)
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Per-row layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Tensor::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (h, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            rstd.push(r);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!((g.len(), b.len()), (c, c), "layer norm affine width");
        let mut out = xhat.clone();
        for i in 0..n {
            for ((o, &gg), &bb) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Scales each row to unit L2 norm. Rows with norm below [`NORM_EPS`] are
    /// divided by `NORM_EPS` instead and counted in [`Graph::clamped_rows`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mut norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                norm = NORM_EPS;
                self.clamped_rows += 1;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(x);
        self.push(out, Op::NormalizeRows { x, norms }, ng)
    }

    /// Row-wise inner products, `N x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let data = (0..av.rows())
            .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::from_vec(av.rows(), 1, data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::RowDot(a, b), ng)
    }

    /// Column means, `1 x C`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let n = xv.rows() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        let ng = self.ng(x);
        self.push(out, Op::MeanAll(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).expect("shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            let w = v.cols();
            for i in 0..rows {
                out.row_mut(i)[offset..offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let c = xv.cols();
        let out = Tensor::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec())
            .expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    /// Single column as `N x 1`.
    pub fn col(&mut self, x: Var, col: usize) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|i| xv.get(i, col)).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::Col { x, col }, ng)
    }

    /// Unfolds 3x3 zero-padded neighbourhoods of an `(h*w, C)` map into
    /// `(h*w, 9C)`; column `(ky*3 + kx)*C + c` holds channel `c` at offset
    /// `(ky-1, kx-1)`.
    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), height * width, "im2col spatial size");
        let c = xv.cols();
        let mut out = Tensor::zeros(height * width, 9 * c);
        for y in 0..height {
            for xx in 0..width {
                let dst = out.row_mut(y * width + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let src = xv.row(sy as usize * width + sx as usize);
                        let off = (ky * 3 + kx) * c;
                        dst[off..off + c].copy_from_slice(src);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Im2col { x, height, width }, ng)
    }

    /// Nearest-neighbour spatial upsampling of an `(h*w, C)` map by an
    /// integer factor.
    pub fn upsample_nearest(&mut self, x: Var, height: usize, width: usize, factor: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), height * width, "upsample spatial size");
        let c = xv.cols();
        let (oh, ow) = (height * factor, width * factor);
        let mut out = Tensor::zeros(oh * ow, c);
        for y in 0..oh {
            for xx in 0..ow {
                out.row_mut(y * ow + xx)
                    .copy_from_slice(xv.row((y / factor) * width + xx / factor));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample { x, width, factor }, ng)
    }

    /// Mean softmax cross-entropy of `N x K` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "cross_entropy label count");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, &k) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            let lse = log_sum_exp(row);
            loss -= row[k] - lse;
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of an `N x 1` probability column with
    /// probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "bce target count");
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.ng(p);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        )
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    let g = slot(grads, *a, val(*a));
                    gemm(dy, false, val(*b), true, g, 1.0);
                }
                if ng(*b) {
                    let g = slot(grads, *b, val(*b));
                    gemm(val(*a), true, dy, false, g, 1.0);
                }
            }
            Op::MatMulNT(a, b) => {
                if ng(*a) {
                    let g = slot(grads, *a, val(*a));
                    gemm(dy, false, val(*b), false, g, 1.0);
                }
                if ng(*b) {
                    let g = slot(grads, *b, val(*b));
                    gemm(dy, true, val(*a), false, g, 1.0);
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    slot(grads, *a, val(*a)).axpy(1.0, dy);
                }
                if ng(*b) {
                    slot(grads, *b, val(*b)).axpy(1.0, dy);
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    slot(grads, *a, val(*a)).axpy(1.0, dy);
                }
                if ng(*b) {
                    slot(grads, *b, val(*b)).axpy(-1.0, dy);
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let bv = val(*b);
                    let g = slot(grads, *a, val(*a));
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *g += d * o;
                    }
                }
                if ng(*b) {
                    let av = val(*a);
                    let g = slot(grads, *b, val(*b));
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if ng(*x) {
                    slot(grads, *x, val(*x)).axpy(1.0, dy);
                }
                if ng(*row) {
                    let g = slot(grads, *row, val(*row));
                    for i in 0..dy.rows() {
                        for (g, &d) in g.data_mut().iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                if ng(*x) {
                    let g = slot(grads, *x, xv);
                    for i in 0..dy.rows() {
                        for ((g, &d), &r) in g.row_mut(i).iter_mut().zip(dy.row(i)).zip(rv.data()) {
                            *g += d * r;
                        }
                    }
                }
                if ng(*row) {
                    let g = slot(grads, *row, rv);
                    for i in 0..dy.rows() {
                        for ((g, &d), &xx) in g.data_mut().iter_mut().zip(dy.row(i)).zip(xv.row(i)) {
                            *g += d * xx;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if ng(*x) {
                    slot(grads, *x, val(*x)).axpy(*c, dy);
                }
            }
            Op::AddScalar(x) => {
                if ng(*x) {
                    slot(grads, *x, val(*x)).axpy(1.0, dy);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let g = slot(grads, *x, xv);
                for ((g, &d), &v) in g.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                    if v > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let g = slot(grads, *x, xv);
                for ((g, &d), &v) in g.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *g += d * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let c = xhat.cols();
                if ng(*gamma) {
                    let g = slot(grads, *gamma, gv);
                    for i in 0..dy.rows() {
                        for ((g, &d), &h) in g.data_mut().iter_mut().zip(dy.row(i)).zip(xhat.row(i)) {
                            *g += d * h;
                        }
                    }
                }
                if ng(*beta) {
                    let g = slot(grads, *beta, val(*beta));
                    for i in 0..dy.rows() {
                        for (g, &d) in g.data_mut().iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
                if ng(*x) {
                    let g = slot(grads, *x, val(*x));
                    let mut dxhat = vec![0.0; c];
                    for (i, &rs) in rstd.iter().enumerate().take(dy.rows()) {
                        let h = xhat.row(i);
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dxhat[j] = dy.get(i, j) * gv.data()[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * h[j];
                        }
                        let scale = rs / c as f64;
                        for (j, gg) in g.row_mut(i).iter_mut().enumerate() {
                            *gg += scale * (c as f64 * dxhat[j] - sum - h[j] * dot);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let g = slot(grads, *x, val(*x));
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((g, &yy), &d) in g.row_mut(i).iter_mut().zip(yr).zip(dr) {
                        *g += yy * (d - dot);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let g = slot(grads, *x, val(*x));
                for (i, &n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    if n <= NORM_EPS {
                        for (g, &d) in g.row_mut(i).iter_mut().zip(dr) {
                            *g += d / n;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((g, &yy), &d) in g.row_mut(i).iter_mut().zip(yr).zip(dr) {
                        *g += (d - yy * dot) / n;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if ng(*a) {
                    let g = slot(grads, *a, av);
                    for i in 0..av.rows() {
                        let d = dy.data()[i];
                        for (g, &o) in g.row_mut(i).iter_mut().zip(bv.row(i)) {
                            *g += d * o;
                        }
                    }
                }
                if ng(*b) {
                    let g = slot(grads, *b, bv);
                    for i in 0..bv.rows() {
                        let d = dy.data()[i];
                        for (g, &o) in g.row_mut(i).iter_mut().zip(av.row(i)) {
                            *g += d * o;
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let n = xv.rows() as f64;
                let g = slot(grads, *x, xv);
                for i in 0..xv.rows() {
                    for (g, &d) in g.row_mut(i).iter_mut().zip(dy.data()) {
                        *g += d / n;
                    }
                }
            }
            Op::SumAll(x) => {
                let d = dy.item();
                let g = slot(grads, *x, val(*x));
                g.data_mut().iter_mut().for_each(|g| *g += d);
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let d = dy.item() / xv.len() as f64;
                let g = slot(grads, *x, xv);
                g.data_mut().iter_mut().for_each(|g| *g += d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if ng(p) {
                        let g = slot(grads, p, pv);
                        for (g, &d) in g.data_mut().iter_mut().zip(&dy.data()[offset..offset + n]) {
                            *g += d;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if ng(p) {
                        let g = slot(grads, p, pv);
                        for i in 0..dy.rows() {
                            for (g, &d) in g.row_mut(i).iter_mut().zip(&dy.row(i)[offset..offset + w]) {
                                *g += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let g = slot(grads, *x, xv);
                for (g, &d) in g.data_mut()[start * c..].iter_mut().zip(dy.data()) {
                    *g += d;
                }
            }
            Op::Col { x, col } => {
                let g = slot(grads, *x, val(*x));
                for (i, &d) in dy.data().iter().enumerate() {
                    let v = g.get(i, *col);
                    g.set(i, *col, v + d);
                }
            }
            Op::Im2col { x, height, width } => {
                let xv = val(*x);
                let c = xv.cols();
                let g = slot(grads, *x, xv);
                for y in 0..*height {
                    for xx in 0..*width {
                        let src = dy.row(y * width + xx);
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= *height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= *width as isize {
                                    continue;
                                }
                                let off = (ky * 3 + kx) * c;
                                let dst = g.row_mut(sy as usize * width + sx as usize);
                                for (d, &s) in dst.iter_mut().zip(&src[off..off + c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { x, width, factor } => {
                let ow = width * factor;
                let g = slot(grads, *x, val(*x));
                for r in 0..dy.rows() {
                    let (y, xx) = (r / ow, r % ow);
                    let dst = g.row_mut((y / factor) * width + xx / factor);
                    for (d, &s) in dst.iter_mut().zip(dy.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = dy.item() / labels.len() as f64;
                let g = slot(grads, *logits, val(*logits));
                for (i, &k) in labels.iter().enumerate() {
                    let pr = probs.row(i);
                    let gr = g.row_mut(i);
                    for (j, (g, &p)) in gr.iter_mut().zip(pr).enumerate() {
                        let onehot = if j == k { 1.0 } else { 0.0 };
                        *g += scale * (p - onehot);
                    }
                }
            }
            Op::Bce { p, targets, eps } => {
                let pv = val(*p);
                let scale = dy.item() / targets.len() as f64;
                let g = slot(grads, *p, pv);
                for ((g, &p), &y) in g.data_mut().iter_mut().zip(pv.data()).zip(targets) {
                    if p > *eps && p < 1.0 - eps {
                        *g += scale * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.rows(), x.cols());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let fp = f(&xp);
            xp.data_mut()[i] = orig - h;
            let fm = f(&xp);
            xp.data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn check_unary(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g0 = Graph::new();
        let v0 = g0.constant(x.clone());
        let out_shape = {
            let y = build(&mut g0, v0);
            g0.shape(y)
        };
        let probe = Tensor::randn(out_shape.0, out_shape.1, 1.0, &mut rng);
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let y = build(&mut g, v);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = build(&mut g, v);
        let p = g.constant(probe.clone());
        let prod = g.mul(y, p);
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        let analytic = grads.get(v).unwrap();
        let numeric = numeric_grad(&x, &eval);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "max abs err {err}");
    }

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(rand_t(4, 6, 1), |g, x| g.gelu(x));
        check_unary(rand_t(4, 6, 2), |g, x| g.softmax_rows(x));
        check_unary(rand_t(4, 6, 3), |g, x| g.normalize_rows(x));
        check_unary(rand_t(4, 6, 4), |g, x| g.mean_rows(x));
        check_unary(rand_t(4, 6, 5), |g, x| g.col(x, 2));
        check_unary(rand_t(12, 3, 6), |g, x| g.im2col3x3(x, 3, 4));
        check_unary(rand_t(6, 2, 7), |g, x| g.upsample_nearest(x, 2, 3, 2));
        check_unary(rand_t(5, 3, 8), |g, x| g.slice_rows(x, 1, 3));
        check_unary(rand_t(5, 3, 9), |g, x| {
            let gamma = g.constant(rand_t(1, 3, 90));
            let beta = g.constant(rand_t(1, 3, 91));
            g.layer_norm(x, gamma, beta)
        });
        check_unary(rand_t(5, 3, 10), |g, x| g.cross_entropy(x, &[0, 2, 1, 1, 0]));
        check_unary(rand_t(5, 3, 11), |g, x| {
            let y = g.matmul_nt(x, x);
            g.row_dot(y, y)
        });
        check_unary(rand_t(4, 1, 12).map(|v| 0.5 + 0.3 * v.tanh()), |g, x| {
            g.bce(x, &[1.0, 0.0, 1.0, 0.25], 1e-7)
        });
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let w = rand_t(3, 4, 20);
        check_unary(rand_t(5, 3, 21), |g, x| {
            let wv = g.constant(w.clone());
            g.matmul(x, wv)
        });
        let b = rand_t(1, 3, 22);
        check_unary(rand_t(5, 3, 23), |g, x| {
            let bv = g.constant(b.clone());
            let y = g.mul_row(x, bv);
            let z = g.add_row(y, bv);
            let c = g.concat_cols(&[z, x]);
            let d = g.concat_rows(&[c, c]);
            let e = g.mul(d, d);
            let f = g.sub(e, d);
            g.scale(f, 0.5)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn normalize_rows_clamps_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 3));
        let y = g.normalize_rows(x);
        assert_eq!(g.clamped_rows(), 2);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }
}
