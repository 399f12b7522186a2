//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as a node in creation order, so node
//! indices are already a topological order. [`Graph::backward`] walks the
//! nodes in exact reverse recording order and accumulates gradients into the
//! leaves that were created with `requires_grad`.
//!
//! Output checks: in debug builds every op verifies that its output is finite
//! and reports [`Error::NonFinite`] otherwise; release builds let NaN/Inf
//! propagate.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Elu(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Elu(_) => "elu",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulBt { a: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Affine { x: usize, scale: f64 },
    Unary { x: usize, kind: Unary },
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    MaskedSoftmax { x: usize, mask: Vec<bool> },
    Aggregate { alpha: usize, values: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Sum(usize),
    Transpose(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(value, op, rg))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.record("matmul", t, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// `a[m,k] · b[n,k]ᵀ`, the shape used by linear layers.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_bt", a)?;
        let (n, k2) = self.matrix("matmul_bt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let out = mm(self.value(a).data(), &bt, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.record("matmul_bt", t, Op::MatMulBt { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", x)?;
        let t = Tensor::new(&[c, r], transpose(self.value(x).data(), r, c))?;
        self.record("transpose", t, Op::Transpose(x.0), &[x.0])
    }

    // ---- elementwise -----------------------------------------------------

    /// Elementwise sum. A rank-1 right operand whose length equals the last
    /// dimension of `a` is broadcast over rows (bias addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) && self.is_bias_for(a, b) {
            return self.add_bias(a, b);
        }
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn is_bias_for(&self, a: Var, b: Var) -> bool {
        let sa = self.shape(a);
        let sb = self.shape(b);
        sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0]
    }

    fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix("add_bias", x)?;
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::new(&[rows, cols], out)?;
        self.record("add_bias", t, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        self.record(name, t, op, &[a.0, b.0])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        self.record("affine", t, Op::Affine { x: x.0, scale }, &[x.0])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        if kind == Unary::Log {
            if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("log of non-positive value {bad}"),
                });
            }
        }
        let t = self.value(x).map(|v| kind.apply(v));
        self.record(kind.name(), t, Op::Unary { x: x.0, kind }, &[x.0])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(x, Unary::Elu(alpha))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.record("clamp", t, Op::Clamp { x: x.0, lo, hi }, &[x.0])
    }

    // ---- normalisation and attention ------------------------------------

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.record("softmax", t, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    /// Row-wise softmax of a square score matrix restricted to `mask`
    /// (row-major `[n*n]`). Masked-out entries are exactly zero.
    ///
    /// The normaliser is summed in sorted order so the result of a row does
    /// not depend on how the other nodes are numbered.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.matrix("masked_softmax", x)?;
        if mask.len() != rows * cols {
            return Err(Error::invalid(
                "masked_softmax",
                format!("mask has {} entries for a {rows}x{cols} matrix", mask.len()),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        let mut exps = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = r * cols..(r + 1) * cols;
            let max = src[row.clone()]
                .iter()
                .zip(&mask[row.clone()])
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid(
                    "masked_softmax",
                    format!("row {r} has an empty neighbourhood"),
                ));
            }
            exps.clear();
            for c in 0..cols {
                if mask[r * cols + c] {
                    let e = (src[r * cols + c] - max).exp();
                    out[r * cols + c] = e;
                    exps.push(e);
                }
            }
            let sum = sorted_sum(&mut exps);
            for c in 0..cols {
                if mask[r * cols + c] {
                    out[r * cols + c] /= sum;
                }
            }
        }
        let t = Tensor::new(&[rows, cols], out)?;
        let op = Op::MaskedSoftmax {
            x: x.0,
            mask: mask.to_vec(),
        };
        self.record("masked_softmax", t, op, &[x.0])
    }

    /// Weighted neighbourhood sum `out[i] = Σ_j alpha[i,j] · values[j]`.
    ///
    /// Zero weights are skipped and the remaining products are summed in
    /// sorted order, making each output row invariant to node relabelling.
    pub fn aggregate(&mut self, alpha: Var, values: Var) -> Result<Var> {
        let (n, m) = self.matrix("aggregate", alpha)?;
        let (m2, c) = self.matrix("aggregate", values)?;
        if m != m2 {
            return Err(self.mismatch("aggregate", alpha, values));
        }
        let a = self.value(alpha).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; n * c];
        let mut terms = Vec::with_capacity(m);
        for i in 0..n {
            for k in 0..c {
                terms.clear();
                for j in 0..m {
                    let w = a[i * m + j];
                    if w != 0.0 {
                        terms.push(w * v[j * c + k]);
                    }
                }
                out[i * c + k] = sorted_sum(&mut terms);
            }
        }
        let t = Tensor::new(&[n, c], out)?;
        let op = Op::Aggregate {
            alpha: alpha.0,
            values: values.0,
        };
        self.record("aggregate", t, op, &[alpha.0, values.0])
    }

    // ---- structure -------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} invalid for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", *first, v));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let extent = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * extent..(o + 1) * extent]);
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let t = Tensor::new(&shape, out)?;
        self.record("concat", t, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    /// The slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(&new_shape, out)?;
        self.record("narrow", t, Op::Narrow { x: x.0, axis, start }, &[x.0])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d(loss)/d(leaf)` into every leaf that requires gradients.
    /// Leaves the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        acc[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = acc[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, g, &mut acc)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[idx].is_none() {
                self.grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: Vec<f64>, acc: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {
                let shape = node.value.shape().to_vec();
                match &mut self.grads[idx] {
                    Some(existing) => add_into(existing.data_mut(), &g),
                    slot @ None => *slot = Some(Tensor::new(&shape, g)?),
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = nodes[*a].value.dims2()?;
                let n = nodes[*b].value.dims2()?.1;
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose(nodes[*b].value.data(), k, n);
                    let da = mm(&g, &bt, m, n, k);
                    accumulate(acc, *a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let db = mm_tn(nodes[*a].value.data(), &g, m, k, n);
                    accumulate(acc, *b, db);
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = nodes[*a].value.dims2()?;
                let n = nodes[*b].value.dims2()?.0;
                if wants(*a) {
                    // dA = G · B
                    let da = mm(&g, nodes[*b].value.data(), m, n, k);
                    accumulate(acc, *a, da);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    let db = mm_tn(&g, nodes[*a].value.data(), m, n, k);
                    accumulate(acc, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = nodes[*x].value.dims2()?;
                accumulate(acc, *x, transpose(&g, c, r));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(acc, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(acc, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(acc, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(acc, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let va = nodes[*a].value.data();
                let vb = nodes[*b].value.data();
                if wants(*a) {
                    accumulate(acc, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    accumulate(acc, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddBias { x, bias } => {
                let cols = nodes[*bias].value.numel();
                if wants(*bias) {
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        add_into(&mut db, row);
                    }
                    accumulate(acc, *bias, db);
                }
                if wants(*x) {
                    accumulate(acc, *x, g);
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                accumulate(acc, *x, g.iter().map(|v| v * s).collect());
            }
            Op::Unary { x, kind } => {
                let xin = nodes[*x].value.data();
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(xin.iter().zip(y))
                    .map(|(g, (&xi, &yi))| g * kind.derivative(xi, yi))
                    .collect();
                accumulate(acc, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xin = nodes[*x].value.data();
                let dx = g
                    .iter()
                    .zip(xin)
                    .map(|(g, &v)| if v < *lo || v > *hi { 0.0 } else { *g })
                    .collect();
                accumulate(acc, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(acc, *x, dx);
            }
            Op::MaskedSoftmax { x, mask } => {
                let (rows, cols) = node.value.dims2()?;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let row = r * cols..(r + 1) * cols;
                    let dot: f64 = row.clone().filter(|&i| mask[i]).map(|i| g[i] * y[i]).sum();
                    for i in row.filter(|&i| mask[i]) {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                accumulate(acc, *x, dx);
            }
            Op::Aggregate { alpha, values } => {
                let (n, m) = nodes[*alpha].value.dims2()?;
                let c = nodes[*values].value.dims2()?.1;
                let a = nodes[*alpha].value.data();
                let v = nodes[*values].value.data();
                if wants(*alpha) {
                    // dα = G · Vᵀ
                    let vt = transpose(v, m, c);
                    accumulate(acc, *alpha, mm(&g, &vt, n, c, m));
                }
                if wants(*values) {
                    // dV = αᵀ · G
                    accumulate(acc, *values, mm_tn(a, &g, n, m, c));
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let extent = nodes[i].value.shape()[*axis] * inner;
                    if wants(i) {
                        let mut part = Vec::with_capacity(outer * extent);
                        for o in 0..outer {
                            let base = o * total + offset;
                            part.extend_from_slice(&g[base..base + extent]);
                        }
                        accumulate(acc, i, part);
                    }
                    offset += extent;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = nodes[*x].value.shape();
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = o * len * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(acc, *x, dx);
            }
            Op::Sum(x) => {
                let numel = nodes[*x].value.numel();
                accumulate(acc, *x, vec![g[0]; numel]);
            }
        }
        Ok(())
    }

    // ---- helpers -----------------------------------------------------------

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }
}

fn accumulate(acc: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut acc[idx] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums in ascending order so the result is independent of input order.
pub(crate) fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    values.iter().sum()
}

/// `a[m,k] · b[k,n]`; each output element accumulates over `k` in order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
