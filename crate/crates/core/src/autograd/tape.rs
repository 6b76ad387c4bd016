//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in strict reverse append order and accumulates `∂loss/∂leaf`
//! into the gradient slot of each leaf that tracks gradients. A tape is meant
//! to be built fresh for each forward pass.
//!
//! Broadcasting is limited to the leading batch axis: the right operand of a
//! binary elementwise op may have either the same shape as the left operand
//! or the left shape with its first axis removed.

use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
///
/// Handles are only valid for the tape (and tape epoch) that created them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
    epoch: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Relu(usize),
    Log { input: usize, eps: f64 },
    Exp(usize),
    Softmax(usize),
    Sum { input: usize, axis: usize },
    Mean { input: usize, axis: usize },
    SumAll(usize),
    Square(usize),
    Sqrt(usize),
    AddScalar(usize),
    Scale(usize, f64),
    Clamp { input: usize, lo: f64, hi: f64 },
    BroadcastRows(usize),
    Concat(Vec<usize>),
    SelectRows { input: usize, rows: Vec<usize> },
    Transpose(usize),
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Relu(_) => "relu",
            Op::Log { .. } => "log",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::AddScalar(_) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Clamp { .. } => "clamp",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Concat(_) => "concat",
            Op::SelectRows { .. } => "select_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    epoch: u64,
    nodes: Vec<Node>,
    /// Accumulated gradients, populated only for gradient-tracking leaves.
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            epoch: 0,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. All previously issued handles become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
        self.epoch += 1;
    }

    /// Registers an input tensor. When `requires_grad` is set, `backward`
    /// accumulates into this leaf's gradient slot.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v)].requires_grad
    }

    /// Gradient accumulated on a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[self.index(v)].as_ref()
    }

    /// Gradient of a tracked leaf, zeros if no path from a loss reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn index(&self, v: Var) -> usize {
        assert!(
            v.tape == self.id && v.epoch == self.epoch && v.index < self.nodes.len(),
            "stale or foreign tape handle"
        );
        v.index
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var {
            index,
            tape: self.id,
            epoch: self.epoch,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if let Some(pos) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: op.name(),
                detail: format!("non-finite output at flat index {pos}"),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ---------------------------------------------------------------------
    // Primitives
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a), self.index(b));
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), av.shape()[0], av.shape()[1], bv.shape()[1]);
        let value = Tensor::new(vec![av.shape()[0], bv.shape()[1]], out)?;
        self.push(value, Op::MatMul(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise division. The divisor must be bounded away from zero by
    /// the caller.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let ib = self.index(b);
        if self.nodes[ib].value.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a), self.index(b));
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let out = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % n]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, op(ia, ib), &[ia, ib])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    /// `ln(a + eps)`; every `a + eps` must be strictly positive.
    pub fn log(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.index(a);
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|&&x| x + eps <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {} with eps {eps} is not positive", bad),
            });
        }
        self.unary(a, |x| (x + eps).ln(), |input| Op::Log { input, eps })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a);
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative argument {bad}"),
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), |input| Op::Clamp { input, lo, hi })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var> {
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        self.push(value, op(ia), &[ia])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        let width = *av.shape().last().ok_or_else(|| Error::shape("softmax", av.shape(), &[]))?;
        if width == 0 {
            return Err(Error::shape("softmax", av.shape(), &[]));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(ia), &[ia])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, "sum", false, |input| Op::Sum { input, axis })
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, "mean", true, |input| Op::Mean { input, axis })
    }

    fn reduce(
        &mut self,
        a: Var,
        axis: usize,
        name: &'static str,
        average: bool,
        op: impl Fn(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        if axis >= av.ndim() || av.shape()[axis] == 0 {
            return Err(Error::shape(name, av.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += av.data()[base + i];
                }
            }
        }
        if average {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, op(ia), &[ia])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a);
        let total = self.nodes[ia].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(ia), &[ia])
    }

    /// Repeats `a` (any shape) along a new leading axis of length `rows`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        let mut shape = vec![rows];
        shape.extend_from_slice(av.shape());
        let data = std::iter::repeat_n(av.data(), rows).flatten().copied().collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::BroadcastRows(ia), &[ia])
    }

    /// Concatenates 2-D tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.index(p)).collect();
        let first = idx
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if first.len() != 2 {
            return Err(Error::shape("concat", &first, &[]));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.ndim() != 2 || v.shape()[1] != first[1] {
                return Err(Error::shape("concat", &first, v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, first[1]], data)?;
        self.push(value, Op::Concat(idx.clone()), &idx)
    }

    /// Keeps the rows whose mask entry is `true`, in order.
    pub fn select_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let rows: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        if av.ndim() == 0 || av.shape()[0] != mask.len() {
            return Err(Error::shape("select_rows", av.shape(), &[mask.len()]));
        }
        self.gather_rows(a, rows)
    }

    /// Gathers rows by index (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        if av.ndim() == 0 || rows.iter().any(|&r| r >= av.shape()[0]) {
            return Err(Error::shape("select_rows", av.shape(), &[rows.len()]));
        }
        let width = av.numel() / av.shape()[0];
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in &rows {
            data.extend_from_slice(&av.data()[r * width..(r + 1) * width]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::SelectRows { input: ia, rows }, &[ia])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a);
        let av = &self.nodes[ia].value;
        if av.ndim() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let value = Tensor::new(vec![c, r], transpose_raw(av.data(), r, c))?;
        self.push(value, Op::Transpose(ia), &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a);
        let value = self.nodes[ia].value.clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(ia), &[ia])
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss);
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);

        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let emit = |grads: &mut Vec<Option<Vec<f64>>>, input: usize, contrib: Vec<f64>| {
                if self.nodes[input].requires_grad {
                    accumulate(&mut grads[input], contrib);
                }
            };
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.leaf_grads[idx];
                    match slot {
                        Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(Tensor::new(out.shape().to_vec(), g)?),
                    }
                }
                &Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let bt = transpose_raw(bv.data(), k, n);
                    let ga = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(av.data(), m, k);
                    let gb = matmul_raw(&at, &g, k, m, n);
                    emit(&mut grads, a, ga);
                    emit(&mut grads, b, gb);
                }
                &Op::Add(a, b) => {
                    let nb = self.nodes[b].value.numel();
                    emit(&mut grads, b, fold_broadcast(&g, nb, |x| x));
                    emit(&mut grads, a, g);
                }
                &Op::Sub(a, b) => {
                    let nb = self.nodes[b].value.numel();
                    emit(&mut grads, b, fold_broadcast(&g, nb, |x| -x));
                    emit(&mut grads, a, g);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                    let nb = bv.len();
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect();
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    emit(&mut grads, b, fold_broadcast(&prod, nb, |x| x));
                    emit(&mut grads, a, ga);
                }
                &Op::Div(a, b) => {
                    let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                    let nb = bv.len();
                    let ga = g.iter().enumerate().map(|(i, gi)| gi / bv[i % nb]).collect();
                    let gb_full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| -gi * av[i] / (bv[i % nb] * bv[i % nb]))
                        .collect();
                    emit(&mut grads, b, fold_broadcast(&gb_full, nb, |x| x));
                    emit(&mut grads, a, ga);
                }
                &Op::Relu(a) => {
                    let av = self.nodes[a].value.data();
                    let ga = g.iter().zip(av).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect();
                    emit(&mut grads, a, ga);
                }
                &Op::Log { input, eps } => {
                    let av = self.nodes[input].value.data();
                    let ga = g.iter().zip(av).map(|(gi, x)| gi / (x + eps)).collect();
                    emit(&mut grads, input, ga);
                }
                &Op::Exp(a) => {
                    let ga = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
                    emit(&mut grads, a, ga);
                }
                &Op::Softmax(a) => {
                    let width = *out.shape().last().unwrap_or(&1);
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, pr), dst) in g
                        .chunks(width)
                        .zip(out.data().chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, p)| x * p).sum();
                        for ((d, gi), p) in dst.iter_mut().zip(gr).zip(pr) {
                            *d = p * (gi - dot);
                        }
                    }
                    emit(&mut grads, a, ga);
                }
                &Op::Sum { input, axis } | &Op::Mean { input, axis } => {
                    let shape = self.nodes[input].value.shape();
                    let (outer, len, inner) = axis_split(shape, axis);
                    let factor = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut ga = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for i in 0..inner {
                                ga[base + i] = g[o * inner + i] * factor;
                            }
                        }
                    }
                    emit(&mut grads, input, ga);
                }
                &Op::SumAll(a) => {
                    let n = self.nodes[a].value.numel();
                    emit(&mut grads, a, vec![g[0]; n]);
                }
                &Op::Square(a) => {
                    let av = self.nodes[a].value.data();
                    let ga = g.iter().zip(av).map(|(gi, x)| 2.0 * x * gi).collect();
                    emit(&mut grads, a, ga);
                }
                &Op::Sqrt(a) => {
                    let ga = g.iter().zip(out.data()).map(|(gi, y)| gi / (2.0 * y)).collect();
                    emit(&mut grads, a, ga);
                }
                &Op::AddScalar(a) => emit(&mut grads, a, g),
                &Op::Scale(a, c) => emit(&mut grads, a, g.iter().map(|x| x * c).collect()),
                &Op::Clamp { input, lo, hi } => {
                    let av = self.nodes[input].value.data();
                    let ga = g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > lo && x < hi { *gi } else { 0.0 })
                        .collect();
                    emit(&mut grads, input, ga);
                }
                &Op::BroadcastRows(a) => {
                    let n = self.nodes[a].value.numel();
                    emit(&mut grads, a, fold_broadcast(&g, n, |x| x));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.numel();
                        emit(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SelectRows { input, rows } => {
                    let iv = &self.nodes[*input].value;
                    let width = iv.numel() / iv.shape()[0].max(1);
                    let mut ga = vec![0.0; iv.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..width {
                            ga[r * width + j] += g[k * width + j];
                        }
                    }
                    emit(&mut grads, *input, ga);
                }
                &Op::Transpose(a) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    emit(&mut grads, a, transpose_raw(&g, r, c));
                }
                &Op::Reshape(a) => emit(&mut grads, a, g),
            }
        }
        Ok(())
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a == b || (!a.is_empty() && &a[1..] == b)
}

/// Sums a full-size gradient down to a broadcast operand of `n` elements.
fn fold_broadcast(g: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &v) in g.iter().enumerate() {
        out[i % n] += f(v);
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
