//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive application in order. Values are
//! immutable once recorded; [`Tape::backward`] replays the adjoints in
//! reverse and returns one gradient per node that depends on a trainable
//! leaf. Every primitive checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of recording it.

use std::cell::{Ref, RefCell};

use super::tensor::{matmul_nt_raw, matmul_tn_raw, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
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

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `(rows, cols)` view where cols is the trailing extent.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    let r = if c == 0 { 0 } else { numel(shape) / c };
    (r, c)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn log_softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let total: f64 = (0..len).map(|j| (src[base + j * inner] - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..len {
                out[base + j * inner] = src[base + j * inner] - lse;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0])
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.node(v), |n| &n.value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.node(v).value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            if x.shape() != y.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.push(name, value, op, &[a, b])
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let (xv, rv) = (self.value(x), self.value(r));
            let (_, c) = rows_cols(xv.shape());
            if rv.shape() != [c] {
                return Err(Error::shape(
                    name,
                    format!("row vector {:?} against {:?}", rv.shape(), xv.shape()),
                ));
            }
            let data = xv
                .data()
                .chunks(c.max(1))
                .flat_map(|row| row.iter().zip(rv.data()).map(|(&p, &q)| f(p, q)))
                .collect();
            Tensor::from_parts(xv.shape().to_vec(), data)
        };
        self.push(name, value, op, &[x, r])
    }

    /// `x + b` with `b` broadcast over all leading extents.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |p, q| p + q, Op::AddRow(x, b))
    }

    /// `x * g` with `g` broadcast over all leading extents.
    pub fn mul_row(&self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, g, |p, q| p * q, Op::MulRow(x, g))
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(&self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if axis >= xv.ndim() {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {axis} of {:?}", xv.shape()),
                ));
            }
            softmax_forward(&xv, axis)
        };
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if axis >= xv.ndim() {
                return Err(Error::shape(
                    "log_softmax",
                    format!("axis {axis} of {:?}", xv.shape()),
                ));
            }
            log_softmax_forward(&xv, axis)
        };
        self.push("log_softmax", value, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance
    /// (no affine part; see [`super::nn::layer_norm`]).
    pub fn normalize_rows(&self, x: Var, eps: f64) -> Result<Var> {
        let (value, xhat, rstd) = {
            let xv = self.value(x);
            let (r, c) = rows_cols(xv.shape());
            if c == 0 {
                return Err(Error::shape("layer_norm", "empty trailing extent"));
            }
            let mut xhat = vec![0.0; xv.len()];
            let mut rstd = vec![0.0; r];
            for (i, row) in xv.data().chunks(c).enumerate() {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[i] = s;
                for (j, v) in row.iter().enumerate() {
                    xhat[i * c + j] = (v - mean) * s;
                }
            }
            (
                Tensor::from_parts(xv.shape().to_vec(), xhat.clone()),
                xhat,
                rstd,
            )
        };
        self.push("layer_norm", value, Op::LayerNorm { x, xhat, rstd }, &[x])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if axis >= xv.ndim() {
                return Err(Error::shape(
                    "sum_axis",
                    format!("axis {axis} of {:?}", xv.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(xv.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let src = xv.data();
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    add_into(
                        &mut out[o * inner..(o + 1) * inner],
                        &src[base..base + inner],
                    );
                }
            }
            let mut shape = xv.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        };
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let (r, c) = xv.dims2()?;
            if start > end || end > c {
                return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
            }
            let mut out = Vec::with_capacity(r * (end - start));
            for row in xv.data().chunks(c) {
                out.extend_from_slice(&row[start..end]);
            }
            Tensor::from_parts(vec![r, end - start], out)
        };
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals
                .first()
                .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
            let (r, _) = first.dims2()?;
            let mut total = 0;
            for v in &vals {
                let (rr, cc) = v.dims2()?;
                if rr != r {
                    return Err(Error::shape("concat_cols", "row counts differ"));
                }
                total += cc;
            }
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in &vals {
                    out.extend_from_slice(v.row(i));
                }
            }
            Tensor::from_parts(vec![r, total], out)
        };
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let n = *xv.shape().first().unwrap_or(&0);
            if start > end || end > n {
                return Err(Error::shape("slice_rows", format!("{start}..{end} of {n}")));
            }
            let inner: usize = xv.shape()[1..].iter().product();
            let mut shape = xv.shape().to_vec();
            shape[0] = end - start;
            Tensor::from_parts(shape, xv.data()[start * inner..end * inner].to_vec())
        };
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals
                .first()
                .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
            let tail = first.shape()[1..].to_vec();
            let mut rows = 0;
            for v in &vals {
                if v.ndim() == 0 || v.shape()[1..] != tail[..] {
                    return Err(Error::shape("concat_rows", "trailing extents differ"));
                }
                rows += v.shape()[0];
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(&tail);
            let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Tensor::from_parts(shape, data)
        };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows of the leading axis in the order given by `index`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let n = *xv.shape().first().unwrap_or(&0);
            if index.iter().any(|&i| i >= n) {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index out of range for {n} rows"),
                ));
            }
            xv.select_rows(index)
        };
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// `out[i] = x[i, index[i]]` for a 2-D `x`.
    pub fn pick(&self, x: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let (r, c) = xv.dims2()?;
            if index.len() != r || index.iter().any(|&j| j >= c) {
                return Err(Error::shape(
                    "pick",
                    format!("{} indices for [{r},{c}]", index.len()),
                ));
            }
            let data = index
                .iter()
                .enumerate()
                .map(|(i, &j)| xv.data()[i * c + j])
                .collect();
            Tensor::from_parts(vec![r], data)
        };
        self.push(
            "pick",
            value,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Same-padded temporal convolution: `x: [T,Din]`, `kernel: [k,Din,Dout]`,
    /// `bias: [Dout]`; borders are zero-padded.
    pub fn conv1d(&self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = {
            let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
            let (t, din) = xv.dims2()?;
            let (k, kin, dout) = match kv.shape()[..] {
                [a, b, c] => (a, b, c),
                _ => return Err(Error::shape("conv1d", format!("kernel {:?}", kv.shape()))),
            };
            if k % 2 == 0 {
                return Err(Error::Invalid(format!(
                    "conv1d kernel size must be odd, got {k}"
                )));
            }
            if kin != din || bv.shape() != [dout] {
                return Err(Error::shape(
                    "conv1d",
                    format!(
                        "x {:?}, kernel {:?}, bias {:?}",
                        xv.shape(),
                        kv.shape(),
                        bv.shape()
                    ),
                ));
            }
            let half = k / 2;
            let mut out = Vec::with_capacity(t * dout);
            for _ in 0..t {
                out.extend_from_slice(bv.data());
            }
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = xv.row(src as usize);
                    let tap = &kv.data()[j * din * dout..(j + 1) * din * dout];
                    let orow = &mut out[ti * dout..(ti + 1) * dout];
                    for (p, &xval) in xrow.iter().enumerate() {
                        if xval == 0.0 {
                            continue;
                        }
                        add_scaled(orow, &tap[p * dout..(p + 1) * dout], xval);
                    }
                }
            }
            Tensor::from_parts(vec![t, dout], out)
        };
        self.push(
            "conv1d",
            value,
            Op::Conv1d { x, kernel, bias },
            &[x, kernel, bias],
        )
    }

    /// Adjoints of `loss` with respect to every node that depends on a
    /// trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gd = g.data();
            let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = grads[v.0]
                    .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()));
                f(slot.data_mut());
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, &|d| add_into(d, gd));
                    send(*b, &|d| add_into(d, gd));
                }
                Op::Sub(a, b) => {
                    send(*a, &|d| add_into(d, gd));
                    send(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, &|d| zip3(d, gd, bv, |g, y| g * y));
                    send(*b, &|d| zip3(d, gd, av, |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, &|d| zip3(d, gd, bv, |g, y| g / y));
                    send(*b, &|d| {
                        for ((x, &g), (&p, &q)) in d.iter_mut().zip(gd).zip(av.iter().zip(bv)) {
                            *x -= g * p / (q * q);
                        }
                    });
                }
                Op::AddRow(x, b) => {
                    let c = val(*b).len();
                    send(*x, &|d| add_into(d, gd));
                    send(*b, &|d| {
                        for row in gd.chunks(c.max(1)) {
                            add_into(d, row);
                        }
                    });
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (val(*x), val(*r));
                    let c = rv.len().max(1);
                    send(*x, &|d| {
                        for (drow, grow) in d.chunks_mut(c).zip(gd.chunks(c)) {
                            zip3(drow, grow, rv, |g, q| g * q);
                        }
                    });
                    send(*r, &|d| {
                        for (grow, xrow) in gd.chunks(c).zip(xv.chunks(c)) {
                            zip3(d, grow, xrow, |g, p| g * p);
                        }
                    });
                }
                Op::Scale(x, s) => {
                    send(*x, &|d| d.iter_mut().zip(gd).for_each(|(v, g)| *v += g * s))
                }
                Op::AddScalar(x) | Op::Reshape(x) => send(*x, &|d| add_into(d, gd)),
                Op::MatMul(a, b) => {
                    let (ash, bsh) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, nn) = (ash[0], ash[1], bsh[1]);
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[a.0].needs_grad {
                        let ga = matmul_nt_raw(gd, bv, m, nn, k);
                        send(*a, &|d| add_into(d, &ga));
                    }
                    if nodes[b.0].needs_grad {
                        let gb = matmul_tn_raw(av, gd, m, k, nn);
                        send(*b, &|d| add_into(d, &gb));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    send(*a, &|d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[j * r + i] += gd[i * c + j];
                            }
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = val(*x);
                    send(*x, &|d| {
                        zip3(d, gd, xv, |g, p| if p > 0.0 { g } else { 0.0 })
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    send(*x, &|d| zip3(d, gd, y, |g, s| g * s * (1.0 - s)));
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    send(*x, &|d| zip3(d, gd, y, |g, e| g * e));
                }
                Op::Log(x) => {
                    let xv = val(*x);
                    send(*x, &|d| zip3(d, gd, xv, |g, p| g / p));
                }
                Op::Softplus(x) => {
                    let xv = val(*x);
                    send(*x, &|d| zip3(d, gd, xv, |g, p| g * sigmoid(p)));
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    send(*x, &|d| {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let base = o * len * inner + ii;
                                let dot: f64 = (0..len)
                                    .map(|j| gd[base + j * inner] * y[base + j * inner])
                                    .sum();
                                for j in 0..len {
                                    let p = base + j * inner;
                                    d[p] += y[p] * (gd[p] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    send(*x, &|d| {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let base = o * len * inner + ii;
                                let total: f64 = (0..len).map(|j| gd[base + j * inner]).sum();
                                for j in 0..len {
                                    let p = base + j * inner;
                                    d[p] += gd[p] - y[p].exp() * total;
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, xhat, rstd } => {
                    let c = *node.value.shape().last().unwrap_or(&1);
                    send(*x, &|d| {
                        for (r, s) in rstd.iter().enumerate() {
                            let gr = &gd[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            let mg = gr.iter().sum::<f64>() / c as f64;
                            let mgh = gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                d[r * c + j] += s * (gr[j] - mg - hr[j] * mgh);
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = gd[0];
                    send(*x, &|d| d.iter_mut().for_each(|v| *v += g0));
                }
                Op::SumAxis { x, axis } => {
                    let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    send(*x, &|d| {
                        for o in 0..outer {
                            for j in 0..len {
                                let base = (o * len + j) * inner;
                                add_into(
                                    &mut d[base..base + inner],
                                    &gd[o * inner..(o + 1) * inner],
                                );
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[x.0].value.shape()[1];
                    let w = g.shape()[1];
                    send(*x, &|d| {
                        for (drow, grow) in d.chunks_mut(c).zip(gd.chunks(w.max(1))) {
                            add_into(&mut drow[*start..*start + w], grow);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = g.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        send(*p, &|d| {
                            for (drow, grow) in d.chunks_mut(w.max(1)).zip(gd.chunks(total)) {
                                add_into(drow, &grow[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let inner: usize = g.shape()[1..].iter().product();
                    send(*x, &|d| {
                        add_into(&mut d[start * inner..start * inner + gd.len()], gd)
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        send(*p, &|d| add_into(d, &gd[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::GatherRows { x, index } => {
                    let inner: usize = g.shape()[1..].iter().product();
                    send(*x, &|d| {
                        for (k, &src) in index.iter().enumerate() {
                            add_into(
                                &mut d[src * inner..(src + 1) * inner],
                                &gd[k * inner..(k + 1) * inner],
                            );
                        }
                    });
                }
                Op::Pick { x, index } => {
                    let c = nodes[x.0].value.shape()[1];
                    send(*x, &|d| {
                        for (i, &j) in index.iter().enumerate() {
                            d[i * c + j] += gd[i];
                        }
                    });
                }
                Op::Conv1d { x, kernel, bias } => {
                    let (t, din) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let ksh = nodes[kernel.0].value.shape();
                    let (k, dout) = (ksh[0], ksh[2]);
                    let half = k / 2;
                    let (xv, kv) = (val(*x), val(*kernel));
                    send(*bias, &|d| {
                        for row in gd.chunks(dout) {
                            add_into(d, row);
                        }
                    });
                    send(*x, &|d| {
                        for ti in 0..t {
                            let grow = &gd[ti * dout..(ti + 1) * dout];
                            for j in 0..k {
                                let src = ti as isize + j as isize - half as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let src = src as usize;
                                let tap = &kv[j * din * dout..(j + 1) * din * dout];
                                for p in 0..din {
                                    let w = &tap[p * dout..(p + 1) * dout];
                                    d[src * din + p] +=
                                        w.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    });
                    send(*kernel, &|d| {
                        for ti in 0..t {
                            let grow = &gd[ti * dout..(ti + 1) * dout];
                            for j in 0..k {
                                let src = ti as isize + j as isize - half as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                let xrow = &xv[src as usize * din..(src as usize + 1) * din];
                                let tap = &mut d[j * din * dout..(j + 1) * din * dout];
                                for (p, &xval) in xrow.iter().enumerate() {
                                    add_scaled(&mut tap[p * dout..(p + 1) * dout], grow, xval);
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip3(d: &mut [f64], g: &[f64], o: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((x, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
        *x += f(gv, ov);
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}
