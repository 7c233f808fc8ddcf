use std::cell::{Ref, RefCell};

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::ShapeError;

/// Additive surrogate for minus infinity used by [`Var::masked_softmax`].
pub const MASK_LOGIT: f64 = -1e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Transpose(usize),
    Sum { src: usize, axis: usize },
    Mean { src: usize, axis: usize },
    SumAll(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    MaskedSoftmax(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order so gradients can be replayed in
/// reverse. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients of a scalar loss with respect to every recorded value that
/// depends on a trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Outer/axis/inner extents for an axis-wise operation.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, ShapeError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(ShapeError::new(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Sums a gradient of shape `full` down to the broadcast operand `small`.
fn reduce_broadcast(g: &[f64], small: &[usize]) -> Tensor {
    let n: usize = small.iter().product();
    let mut out = vec![0.0; n];
    if n == 0 {
        return Tensor::from_parts(small.to_vec(), out);
    }
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(small.to_vec(), out)
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            let bs = nodes[b].value.shape();
            accumulate(nodes, grads, b, reduce_broadcast(gd, bs));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            let bs = nodes[b].value.shape();
            let mut gb = reduce_broadcast(gd, bs);
            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
            accumulate(nodes, grads, b, gb);
        }
        Op::Mul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let bn = bv.numel();
            if nodes[a].needs_grad {
                let ga: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * bv.data()[i % bn])
                    .collect();
                accumulate(nodes, grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            if nodes[b].needs_grad {
                let prod: Vec<f64> = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, b, reduce_broadcast(&prod, bv.shape()));
            }
        }
        Op::Div(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if nodes[a].needs_grad {
                let ga = gd.iter().zip(bv.data()).map(|(x, y)| x / y).collect();
                accumulate(nodes, grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            if nodes[b].needs_grad {
                let gb = gd
                    .iter()
                    .zip(out.data())
                    .zip(bv.data())
                    .map(|((x, q), y)| -x * q / y)
                    .collect();
                accumulate(nodes, grads, b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
        }
        Op::Scale(a, c) => {
            let ga = gd.iter().map(|x| x * c).collect();
            accumulate(nodes, grads, a, Tensor::from_parts(g.shape().to_vec(), ga));
        }
        Op::AddScalar(a) => accumulate(nodes, grads, a, g.clone()),
        Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
            let n = bv.shape()[bv.rank() - 1];
            let batch = av.numel() / (m * k);
            let b_shared = bv.rank() == 2;
            if nodes[a].needs_grad {
                let mut ga = vec![0.0; av.numel()];
                for s in 0..batch {
                    let bo = if b_shared { 0 } else { s * k * n };
                    gemm_nt(
                        &gd[s * m * n..(s + 1) * m * n],
                        &bv.data()[bo..bo + k * n],
                        &mut ga[s * m * k..(s + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(nodes, grads, a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            if nodes[b].needs_grad {
                let mut gb = vec![0.0; bv.numel()];
                for s in 0..batch {
                    let bo = if b_shared { 0 } else { s * k * n };
                    gemm_tn(
                        &av.data()[s * m * k..(s + 1) * m * k],
                        &gd[s * m * n..(s + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
        }
        Op::Concat { ref parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), axis);
            let mut offset = 0;
            for &p in parts {
                let ps = nodes[p].value.shape();
                let width = ps[axis];
                if nodes[p].needs_grad {
                    let mut gp = Vec::with_capacity(outer * width * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&gd[base..base + width * inner]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_parts(ps.to_vec(), gp));
                }
                offset += width;
            }
        }
        Op::Slice { src, axis, start } => {
            let ss = nodes[src].value.shape();
            let (outer, total, inner) = split_axis(ss, axis);
            let width = out.shape()[axis];
            let mut gs = vec![0.0; nodes[src].value.numel()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let from = o * width * inner;
                gs[dst..dst + width * inner].copy_from_slice(&gd[from..from + width * inner]);
            }
            accumulate(nodes, grads, src, Tensor::from_parts(ss.to_vec(), gs));
        }
        Op::Transpose(a) => {
            let as_ = nodes[a].value.shape();
            accumulate(nodes, grads, a, transpose_last2(g, as_));
        }
        Op::Sum { src, axis } | Op::Mean { src, axis } => {
            let ss = nodes[src].value.shape();
            let (outer, len, inner) = split_axis(ss, axis);
            let scale = match nodes[id].op {
                Op::Mean { .. } => 1.0 / len as f64,
                _ => 1.0,
            };
            let mut gs = vec![0.0; nodes[src].value.numel()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gs[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
            accumulate(nodes, grads, src, Tensor::from_parts(ss.to_vec(), gs));
        }
        Op::SumAll(src) => {
            let ss = nodes[src].value.shape();
            let n = nodes[src].value.numel();
            accumulate(nodes, grads, src, Tensor::from_parts(ss.to_vec(), vec![gd[0]; n]));
        }
        Op::Exp(a) => {
            let ga = gd.iter().zip(out.data()).map(|(x, y)| x * y).collect();
            accumulate(nodes, grads, a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::Log(a) => {
            let ga = gd
                .iter()
                .zip(nodes[a].value.data())
                .map(|(x, y)| x / y)
                .collect();
            accumulate(nodes, grads, a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::Tanh(a) => {
            let ga = gd
                .iter()
                .zip(out.data())
                .map(|(x, y)| x * (1.0 - y * y))
                .collect();
            accumulate(nodes, grads, a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::Softplus(a) => {
            let ga = gd
                .iter()
                .zip(nodes[a].value.data())
                .map(|(x, &v)| x * sigmoid(v))
                .collect();
            accumulate(nodes, grads, a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::MaskedSoftmax(a) => {
            let n = *out.shape().last().expect("softmax input has rank >= 1");
            let mut ga = vec![0.0; out.numel()];
            for ((grow, yrow), orow) in gd
                .chunks(n)
                .zip(out.data().chunks(n))
                .zip(ga.chunks_mut(n))
            {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((o, &g), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = y * (g - dot);
                }
            }
            accumulate(nodes, grads, a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn transpose_last2(t: &Tensor, src_shape: &[usize]) -> Tensor {
    // `t` has the transposed shape of `src_shape`; returns data in `src_shape`.
    let r = src_shape.len();
    let (rows, cols) = (src_shape[r - 2], src_shape[r - 1]);
    let batch = t.numel() / (rows * cols);
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for s in 0..batch {
        let base = s * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + i * cols + j] = d[base + j * rows + i];
            }
        }
    }
    Tensor::from_parts(src_shape.to_vec(), out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<(), ShapeError> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(ShapeError::new(op, "operands recorded on different tapes"));
        }
        Ok(())
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>, ShapeError> {
        self.same_tape(&other, op)?;
        let value = {
            let a = self.value();
            let b = other.value();
            if !suffix_broadcast(a.shape(), b.shape()) {
                return Err(ShapeError::new(
                    op,
                    format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
                ));
            }
            let bn = b.numel().max(1);
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % bn]))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, make(self.id, other.id), needs))
    }

    /// Elementwise sum; `other` may broadcast over leading dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, ShapeError> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, ShapeError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, ShapeError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Elementwise quotient of equally shaped operands.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, ShapeError> {
        if self.value().shape() != other.value().shape() {
            return Err(ShapeError::new(
                "div",
                format!("{:?} vs {:?}", self.value().shape(), other.value().shape()),
            ));
        }
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.map_value(|x| x * c);
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Scale(self.id, c), needs)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.map_value(|x| x + c);
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::AddScalar(self.id), needs)
    }

    fn map_value(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value();
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    fn unary(self, f: impl Fn(f64) -> f64, make: fn(usize) -> Op) -> Var<'t> {
        let value = self.map_value(f);
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, make(self.id), needs)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, Op::Softplus)
    }

    /// `[..., m, k] · [k, n]` or `[..., m, k] · [..., k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, ShapeError> {
        self.same_tape(&other, "matmul")?;
        let value = {
            let a = self.value();
            let b = other.value();
            let (ar, br) = (a.rank(), b.rank());
            let bad = || {
                ShapeError::new(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                )
            };
            if ar < 2 || br < 2 {
                return Err(bad());
            }
            let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
            let (k2, n) = (b.shape()[br - 2], b.shape()[br - 1]);
            if k != k2 || (br > 2 && a.shape()[..ar - 2] != b.shape()[..br - 2]) {
                return Err(bad());
            }
            let batch = a.numel() / (m * k).max(1);
            let mut c = vec![0.0; batch * m * n];
            for s in 0..batch {
                let bo = if br == 2 { 0 } else { s * k * n };
                gemm_nn(
                    &a.data()[s * m * k..(s + 1) * m * k],
                    &b.data()[bo..bo + k * n],
                    &mut c[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = a.shape()[..ar - 2].to_vec();
            shape.extend([m, n]);
            Tensor::from_parts(shape, c)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>, ShapeError> {
        let value = {
            let a = self.value();
            let r = a.rank();
            if r < 2 {
                return Err(ShapeError::new("transpose", format!("rank {r} input")));
            }
            let mut shape = a.shape().to_vec();
            shape.swap(r - 1, r - 2);
            // Transposing twice is the identity, so reuse the backward helper.
            transpose_last2(&a, &shape)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Transpose(self.id), needs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>, ShapeError> {
        let value = {
            let a = self.value();
            if axis >= a.rank() || start > end || end > a.shape()[axis] {
                return Err(ShapeError::new(
                    "slice",
                    format!("range {start}..{end} on axis {axis} of {:?}", a.shape()),
                ));
            }
            let (outer, total, inner) = split_axis(a.shape(), axis);
            let width = end - start;
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&a.data()[base..base + width * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = width;
            Tensor::from_parts(shape, data)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            needs,
        ))
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>, ShapeError> {
        let value = {
            let a = self.value();
            if axis >= a.rank() {
                return Err(ShapeError::new(
                    if mean { "mean" } else { "sum" },
                    format!("axis {axis} out of range for {:?}", a.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(a.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            if mean && len > 0 {
                data.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, data)
        };
        let needs = self.tape.needs(&[self.id]);
        let op = if mean {
            Op::Mean { src: self.id, axis }
        } else {
            Op::Sum { src: self.id, axis }
        };
        Ok(self.tape.push(value, op, needs))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>, ShapeError> {
        self.reduce(axis, false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>, ShapeError> {
        self.reduce(axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::SumAll(self.id), needs)
    }

    /// Softmax over the last axis. `mask[i] == true` excludes the entry,
    /// which then receives weight exactly zero. Rows must keep at least one
    /// unmasked entry.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t>, ShapeError> {
        let value = {
            let a = self.value();
            if mask.len() != a.numel() || a.rank() == 0 {
                return Err(ShapeError::new(
                    "masked_softmax",
                    format!("mask of {} entries for shape {:?}", mask.len(), a.shape()),
                ));
            }
            let n = *a.shape().last().unwrap();
            let mut data = vec![0.0; a.numel()];
            for ((row, mrow), out) in a
                .data()
                .chunks(n)
                .zip(mask.chunks(n))
                .zip(data.chunks_mut(n))
            {
                let mut max = f64::NEG_INFINITY;
                for (&x, &m) in row.iter().zip(mrow) {
                    if !m {
                        max = max.max(x);
                    }
                }
                if max == f64::NEG_INFINITY && mrow.iter().all(|&m| m) {
                    return Err(ShapeError::new("masked_softmax", "row with every entry masked"));
                }
                // exp(x + MASK_LOGIT - max) underflows to exactly zero
                let mut total = 0.0;
                for (o, (&x, &m)) in out.iter_mut().zip(row.iter().zip(mrow)) {
                    if !m {
                        *o = (x - max).exp();
                        total += *o;
                    }
                }
                for o in out.iter_mut() {
                    *o /= total;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::MaskedSoftmax(self.id), needs))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, ShapeError> {
    let first = parts
        .first()
        .ok_or_else(|| ShapeError::new("concat", "no operands"))?;
    let tape = first.tape;
    let value = {
        let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape();
        if axis >= base.len() {
            return Err(ShapeError::new("concat", format!("axis {axis} for {base:?}")));
        }
        for v in &vals {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(ShapeError::new(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Tensor::from_parts(shape, data)
    };
    for p in parts {
        first.same_tape(p, "concat")?;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(value, Op::Concat { parts: ids, axis }, needs))
}
