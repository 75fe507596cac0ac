//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse. Every forward op checks its output for NaN/Inf and reports the
//! first offending op as [`Error::NonFinite`].

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<E> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, E),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    Gelu(Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<E>,
    },
    StraightThrough(Var),
}

/// Geometry of a 2-D convolution lowered to im2col.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
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

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// For each output row, the source pixel feeding each kernel tap (or `None` for padding).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        for oy in 0..oh {
            for ox in 0..ow {
                let out_row = oy * ow + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let src = iy as usize * self.width + ix as usize;
                        f(out_row, ky * self.kernel + kx, src);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recorded computation with gradient accumulators for leaves.
#[derive(Debug, Clone)]
pub struct Graph<E = f32> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<E>, op: Op<E>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf; gradients accumulate into it.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Same values, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.as_matrix(op)
    }

    fn same_dims(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(kernels::dot(ar, &bd[j * k..(j + 1) * k]));
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.dims(), data).expect("dims already checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Broadcast-add a length-`n` row vector to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).len() != n {
            return Err(Error::shape(
                "add_row",
                format!("row of {} vs {:?}", self.value(row).len(), self.dims(x)),
            ));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_exact_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: E) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last axis. With `causal`, row `i` of a square
    /// matrix only attends to columns `0..=i`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut value = self.value(x).clone();
        let n = value.cols();
        if causal && value.rows() != n {
            return Err(Error::shape(
                "causal_softmax",
                format!("{:?} is not square", value.dims()),
            ));
        }
        for (i, row) in value.data_mut().chunks_exact_mut(n).enumerate() {
            if causal {
                kernels::softmax_row(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|v| *v = E::zero());
            } else {
                kernels::softmax_row(row);
            }
        }
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", "gain/bias length differs from last axis"));
        }
        let eps = E::from_f64(eps);
        let nf = E::from_f64(n as f64);
        let xv = self.value(x);
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<E>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let inv = E::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let value = Tensor::new(xv.dims(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (E::from_f64(GELU_C), E::from_f64(GELU_A));
        let half = E::from_f64(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (E::one() + (c * (v + a * v * v * v)).tanh()));
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", value, Op::Silu(x), &[x])
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{cols} vs {:?}", t.dims())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {rows} rows")));
        }
        let value = Tensor::new(&[len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {cols} cols")));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(&[rows, len], data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    /// Select rows by index (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, cols) = (t.rows(), t.cols());
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("gather_rows", format!("row {r} of {n}")));
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(&[rows.len(), cols], data)?;
        self.push("gather_rows", value, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Lower an `[height*width, channels]` feature map to patch rows for a
    /// convolution expressed as a matmul.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let t = self.value(x);
        if t.dims() != [geom.height * geom.width, geom.channels] {
            return Err(Error::shape("im2col", format!("{:?} vs {geom:?}", t.dims())));
        }
        let (rows, plen, c) = (geom.out_height() * geom.out_width(), geom.patch_len(), geom.channels);
        let mut out = vec![E::zero(); rows * plen];
        let src = t.data();
        geom.for_each_tap(|row, tap, pix| {
            out[row * plen + tap * c..row * plen + (tap + 1) * c].copy_from_slice(&src[pix * c..(pix + 1) * c]);
        });
        let value = Tensor::new(&[rows, plen], out)?;
        self.push("im2col", value, Op::Im2Col { x, geom }, &[x])
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_dims(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let mut s = E::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            s += (a - b) * (a - b);
        }
        let value = Tensor::scalar(s / E::from_f64(p.len() as f64));
        self.push("mse", value, Op::Mse(pred, target), &[pred, target])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<E>() / E::from_f64(t.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean cross-entropy over the rows that carry a target; rows with
    /// `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target".into()));
        }
        let mut probs = t.data().to_vec();
        let mut total = E::zero();
        for (row, tgt) in probs.chunks_exact_mut(v).zip(targets) {
            kernels::softmax_row(row);
            if let Some(k) = *tgt {
                if k >= v {
                    return Err(Error::shape("cross_entropy", format!("target {k} of {v} classes")));
                }
                total = total - row[k].max(E::min_positive_value()).ln();
            }
        }
        let value = Tensor::scalar(total / E::from_f64(count as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Forward value `quantized`, gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<E>) -> Result<Var> {
        if quantized.dims() != self.dims(x) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", quantized.dims(), self.dims(x)),
            ));
        }
        self.push("straight_through", quantized, Op::StraightThrough(x), &[x])
    }

    /// Propagate d(loss)/d(leaf) into every gradient-requiring leaf.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(Tensor::new(self.nodes[i].value.dims(), g)?),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulate `delta` into the gradient slot of `v`.
        fn acc<E: Element>(grads: &mut [Option<Vec<E>>], v: Var, len: usize) -> &mut Vec<E> {
            grads[v.0].get_or_insert_with(|| vec![E::zero(); len])
        }
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).dims()[0], val(*a).dims()[1]);
                let p = val(*b).dims()[1];
                if wants(*a) {
                    // dA = G * B^T
                    let mut bt = vec![E::zero(); k * p];
                    kernels::transpose(val(*b).data(), &mut bt, k, p);
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul(g, &bt, ga, m, p, k);
                }
                if wants(*b) {
                    // dB = A^T * G
                    let mut at = vec![E::zero(); m * k];
                    kernels::transpose(val(*a).data(), &mut at, m, k);
                    let gb = acc(grads, *b, k * p);
                    kernels::matmul(&at, g, gb, k, m, p);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).dims()[0], val(*a).dims()[1]);
                let n = val(*b).dims()[0];
                if wants(*a) {
                    // dA = G[m,n] * B[n,k]
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul(g, val(*b).data(), ga, m, n, k);
                }
                if wants(*b) {
                    // dB = G^T[n,m] * A[m,k]
                    let mut gt = vec![E::zero(); m * n];
                    kernels::transpose(g, &mut gt, m, n);
                    let gb = acc(grads, *b, n * k);
                    kernels::matmul(&gt, val(*a).data(), gb, n, m, k);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = (val(*a).dims()[0], val(*a).dims()[1]);
                    let mut gt = vec![E::zero(); m * n];
                    kernels::transpose(g, &mut gt, n, m);
                    add_into(acc(grads, *a, m * n), &gt);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    add_into(acc(grads, *b, g.len()), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x = *x - d);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let ga = acc(grads, *a, g.len());
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = acc(grads, *b, g.len());
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * y;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if wants(*row) {
                    let n = val(*row).len();
                    let gr = acc(grads, *row, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d * *s);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let n = out.cols();
                    let gx = acc(grads, *x, g.len());
                    for ((gx_row, g_row), y_row) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.data().chunks_exact(n))
                    {
                        let dot = kernels::dot(g_row, y_row);
                        for ((a, &d), &y) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *a += y * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gamma = val(*gain).data();
                if wants(*gain) {
                    let gg = acc(grads, *gain, n);
                    for (g_row, h_row) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((a, &d), &h) in gg.iter_mut().zip(g_row).zip(h_row) {
                            *a += d * h;
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc(grads, *bias, n);
                    for g_row in g.chunks_exact(n) {
                        add_into(gb, g_row);
                    }
                }
                if wants(*x) {
                    let nf = E::from_f64(n as f64);
                    let gx = acc(grads, *x, g.len());
                    let mut dh = vec![E::zero(); n];
                    for (((gx_row, g_row), h_row), &inv) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .zip(inv_std)
                    {
                        let mut sum_dh = E::zero();
                        let mut sum_dh_h = E::zero();
                        for j in 0..n {
                            dh[j] = g_row[j] * gamma[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * h_row[j];
                        }
                        for j in 0..n {
                            gx_row[j] += inv / nf * (nf * dh[j] - sum_dh - h_row[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let (c, a) = (E::from_f64(GELU_C), E::from_f64(GELU_A));
                    let half = E::from_f64(0.5);
                    let three = E::from_f64(3.0);
                    let xv = val(*x).data();
                    let gx = acc(grads, *x, g.len());
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dv = half * (E::one() + th)
                            + half * v * (E::one() - th * th) * c * (E::one() + three * a * v * v);
                        *o += d * dv;
                    }
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let gx = acc(grads, *x, g.len());
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *o += d * s * (E::one() + v * (E::one() - s));
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = acc(grads, p, val(p).len());
                        for (r, gp_row) in gp.chunks_exact_mut(w).enumerate() {
                            add_into(gp_row, &g[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let cols = out.cols();
                    let gx = acc(grads, *x, val(*x).len());
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (w, cols) = (out.cols(), val(*x).cols());
                    let gx = acc(grads, *x, val(*x).len());
                    for (r, g_row) in g.chunks_exact(w).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + w], g_row);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(*x) {
                    let cols = out.cols();
                    let gx = acc(grads, *x, val(*x).len());
                    for (g_row, &r) in g.chunks_exact(cols).zip(rows) {
                        add_into(&mut gx[r * cols..(r + 1) * cols], g_row);
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
            }
            Op::Im2Col { x, geom } => {
                if wants(*x) {
                    let (plen, c) = (geom.patch_len(), geom.channels);
                    let gx = acc(grads, *x, val(*x).len());
                    geom.for_each_tap(|row, tap, pix| {
                        add_into(
                            &mut gx[pix * c..(pix + 1) * c],
                            &g[row * plen + tap * c..row * plen + (tap + 1) * c],
                        );
                    });
                }
            }
            Op::Mse(a, b) => {
                let n = E::from_f64(val(*a).len() as f64);
                let two = E::from_f64(2.0);
                let coef = two * g[0] / n;
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = acc(grads, *a, av.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += coef * (x - y);
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, bv.len());
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o = *o - coef * (x - y);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gx = acc(grads, *x, val(*x).len());
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let len = val(*x).len();
                    let d = g[0] / E::from_f64(len as f64);
                    let gx = acc(grads, *x, len);
                    gx.iter_mut().for_each(|o| *o += d);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let v = val(*logits).cols();
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let d = g[0] / E::from_f64(count as f64);
                    let gl = acc(grads, *logits, probs.len());
                    for ((gl_row, p_row), tgt) in gl.chunks_exact_mut(v).zip(probs.chunks_exact(v)).zip(targets) {
                        if let Some(k) = *tgt {
                            for (o, &p) in gl_row.iter_mut().zip(p_row) {
                                *o += d * p;
                            }
                            gl_row[k] = gl_row[k] - d;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
