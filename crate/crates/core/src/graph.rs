//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive as a node holding its forward value.
//! [`Graph::backward`] walks the nodes once, newest first, and accumulates
//! vector-Jacobian products into the inputs of each node.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, conv: Conv },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// Forward intermediates needed by the backward rule (normalized values
    /// and inverse deviations for layer norm).
    saved: Vec<f64>,
}

/// Tape of recorded operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf. Leaves the loss does not depend
    /// on get a zero tensor; other nodes return `None`.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let shape = self.shapes.get(var.0)?;
        if shape.is_empty() {
            return None;
        }
        let data = match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data).ok()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = libm::tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Scalar GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu_parts(x).0
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_saved(value, op, Vec::new())
    }

    fn push_saved(&mut self, mut value: Tensor, op: Op, saved: Vec<f64>) -> Var {
        value.requires_grad = false;
        self.nodes.push(Node { value, op, saved });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are reported for it when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        let v = self.push(tensor, Op::Leaf);
        self.nodes[v.0].value.requires_grad = rg;
        v
    }

    /// Leaf that always reports a gradient.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone().with_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().map_err(|_| mismatch("matmul", ta, tb))?;
        let (k2, n) = tb.dims2().map_err(|_| mismatch("matmul", ta, tb))?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let out = transpose_raw(ta.data(), r, c);
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    /// Adds a vector of length `shape[last]` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = *ta.shape().last().unwrap();
        if tr.numel() != n || tr.rank() != 1 {
            return Err(mismatch("add_row", ta, tr));
        }
        let r = tr.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along `axis`, stabilized by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(contract(format!("softmax axis {axis} invalid for shape {:?}", tx.shape())));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = libm::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// (population) variance, then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.rank() != 1 || tp.numel() != n {
                return Err(mismatch("layer_norm", tx, tp));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / n;
        let mut out = vec![0.0; tx.numel()];
        // saved layout: normalized values, then one inverse deviation per row
        let mut saved = vec![0.0; tx.numel() + rows];
        for r in 0..rows {
            let xs = &tx.data()[r * n..(r + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / libm::sqrt(var + eps);
            for j in 0..n {
                let h = (xs[j] - mean) * rstd;
                saved[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
            saved[tx.numel() + r] = rstd;
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push_saved(t, Op::LayerNorm { x, gain, bias }, saved))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu_scalar);
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid_scalar);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(contract(format!(
                "narrow [{start}, {}) along axis {axis} out of range for shape {:?}",
                start + len,
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| contract("concat of nothing"))?);
        if axis >= first.rank() {
            return Err(contract(format!("concat axis {axis} invalid for shape {:?}", first.shape())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in xs {
            let t = self.value(v);
            let same_rest = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(mismatch("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.numel()) {
            return Err(contract(format!("gather index {bad} out of range for {} elements", tx.numel())));
        }
        let out = index.iter().map(|&i| tx.data()[i]).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Row permutation/selection of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(contract(format!("row {bad} out of range for {r} rows")));
        }
        let index = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.gather(x, index, &[rows.len(), c])
    }

    /// 2-D cross-correlation of `x: [C, H, W]` with `w: [O, C, k, k]` and
    /// optional `b: [O]`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[c, h, wd], &[o, c2, k, k2]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("conv2d", tx, tw));
        };
        if c != c2 || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", tx, tw));
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.rank() != 1 || tb.numel() != o {
                return Err(mismatch("conv2d", tw, tb));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xd, wdta) = (tx.data(), tw.data());
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            let bias = b.map_or(0.0, |b| self.value(b).data()[oc]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wdta[((oc * c + ic) * k + ky) * k + kx]
                                    * xd[(ic * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc + bias;
                }
            }
        }
        let t = Tensor::new(&[o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, conv: Conv { stride, pad } }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.numel() != 1 {
            return Err(contract(format!("backward needs a scalar loss, got shape {:?}", tl.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| match (&n.op, n.value.requires_grad) {
                (Op::Leaf, true) => n.value.shape().to_vec(),
                _ => Vec::new(),
            })
            .collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.value.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                // dA = G B^T, dB = A^T G
                let bt = transpose_raw(val(*b), k, n);
                accumulate(grads, *a, &matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(val(*a), m, k);
                accumulate(grads, *b, &matmul_raw(&at, g, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                accumulate(grads, *a, &transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let ga: Vec<f64> = g.iter().zip(xb).map(|(g, y)| g / y).collect();
                let gb: Vec<f64> = g.iter().zip(xa.iter().zip(xb)).map(|(g, (x, y))| -g * x / (y * y)).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                let n = self.value(*row).numel();
                let mut gr = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gr[i % n] += v;
                }
                accumulate(grads, *row, &gr);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &ga);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = self.value(*gain).numel();
                let total = node.value.numel();
                let rows = total / n;
                let (xhat, rstd) = node.saved.split_at(total);
                let gn = val(*gain);
                let mut gx = vec![0.0; total];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    let span = r * n..(r + 1) * n;
                    let (gy, h) = (&g[span.clone()], &xhat[span.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..n {
                        let d = gy[j] * gn[j];
                        sum_d += d;
                        sum_dh += d * h[j];
                        gg[j] += gy[j] * h[j];
                        gb[j] += gy[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let d = gy[j] * gn[j];
                        gx[r * n + j] = rstd[r] / nf * (nf * d - sum_d - h[j] * sum_dh);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gain, &gg);
                accumulate(grads, *bias, &gb);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x)).map(|(g, &v)| g * gelu_parts(v).1).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx: Vec<f64> = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.value(*x).shape();
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, &gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = xs.iter().map(|v| Vec::with_capacity(self.value(*v).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in xs.iter().enumerate() {
                        let chunk = self.value(*v).shape()[*axis] * inner;
                        parts[k].extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (v, p) in xs.iter().zip(parts) {
                    accumulate(grads, *v, &p);
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gi, &i) in g.iter().zip(index) {
                    gx[i] += gi;
                }
                accumulate(grads, *x, &gx);
            }
            Op::Conv2d { x, w, b, conv } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let &[c, h, wd] = tx.shape() else { unreachable!() };
                let &[o, _, k, _] = tw.shape() else { unreachable!() };
                let &[_, ho, wo] = node.value.shape() else { unreachable!() };
                let (xd, wdta) = (tx.data(), tw.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wdta.len()];
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[(oc * ho + oy) * wo + ox];
                            gb[oc] += go;
                            if go == 0.0 {
                                continue;
                            }
                            for ic in 0..c {
                                for ky in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let wi = ((oc * c + ic) * k + ky) * k + kx;
                                        let xi = (ic * h + iy as usize) * wd + ix as usize;
                                        gw[wi] += go * xd[xi];
                                        gx[xi] += go * wdta[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                if let Some(b) = b {
                    accumulate(grads, *b, &gb);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_small() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, Error::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
        assert!(alloc::string::ToString::to_string(&err).contains("[2, 3]"));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| libm::exp(*v)).sum();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - libm::exp((i + 1) as f64) / z).abs() < 1e-12);
        }
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 5.0, -2.0, 0.5, 0.5, 9.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        for col in 0..3 {
            assert!((d[col] + d[3 + col] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[4], 3.7));
        let y = g.layer_norm(x, one, zero, 1e-8).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, one, zero, 1e-300).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, bad, zero, 1e-8).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        let c = libm::sqrt(2.0 / core::f64::consts::PI);
        let expect = 0.5 * (1.0 + libm::tanh(c * (1.0 + 0.044715)));
        assert!((gelu_scalar(1.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_quadratic_and_disconnected() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let p = g.param(&Tensor::new(&[3], vec![5.0, 6.0, 7.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert!(grads.get(sq).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap());
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 3).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.value(a).data(), &[0.0, 4.0]);
        assert!(g.narrow(x, 1, 2, 3).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = g.constant(k);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
