use std::sync::Arc;

use super::array::{broadcast_shape, broadcast_strides, par_map, par_zip, reduce_to_shape, Array};
use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Softplus,
    Tanh,
    Square,
    Recip,
    Sqrt,
    Relu,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// An operation with a hand-written adjoint, recorded as a single tape node.
/// The forward value is computed by the caller; the tape only needs to know
/// how to push gradients back to the inputs.
pub trait CustomOp<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns one gradient per input, in input order. `None` marks inputs
    /// that do not need a gradient.
    fn backward(&self, out_value: &Array<S>, out_grad: &Array<S>, inputs: &[&Array<S>])
        -> Vec<Option<Array<S>>>;
}

enum Op<S: Scalar> {
    Leaf,
    Constant,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    MatMul(usize, usize),
    Reduce {
        kind: ReduceKind,
        a: usize,
        axis: Option<usize>,
        keepdims: bool,
    },
    SliceLast {
        a: usize,
        start: usize,
        len: usize,
    },
    ConcatLast(usize, usize),
    GatherLast {
        a: usize,
        idx: Arc<Vec<usize>>,
    },
    GatherRows {
        a: usize,
        idx: Arc<Vec<usize>>,
    },
    Reshape(usize),
    LogSoftmax(usize),
    Select {
        a: usize,
        b: usize,
        mask: Arc<Vec<bool>>,
    },
    AddScalar(usize, S),
    MulScalar(usize, S),
    Custom {
        inputs: Vec<usize>,
        op: Arc<dyn CustomOp<S>>,
    },
}

struct Node<S: Scalar> {
    value: Array<S>,
    grad: Option<Array<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Operations append nodes as they run; `backward`
/// replays the recorded graph once, in reverse insertion order.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a trainable input. Gradients accumulate additively across uses.
    pub fn leaf(&mut self, value: Array<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, value: Array<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Array<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = apply_unary(kind, &self.nodes[a.0].value);
        let rg = self.requires(a.0);
        self.push(value, Op::Unary(kind, a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Recip, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let value = apply_binary(kind, &self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::Binary(kind, a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Min, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.requires(a.0);
        self.push(value, Op::AddScalar(a.0, c), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.requires(a.0);
        self.push(value, Op::MulScalar(a.0, c), rg)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product, batched over the leading dimensions of `a` when `b`
    /// is two-dimensional.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = apply_matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.requires(a.0) || self.requires(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Option<usize>, keepdims: bool) -> Var {
        let value = apply_reduce(kind, &self.nodes[a.0].value, axis, keepdims);
        let rg = self.requires(a.0);
        self.push(
            value,
            Op::Reduce {
                kind,
                a: a.0,
                axis,
                keepdims,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>, keepdims: bool) -> Var {
        self.reduce(ReduceKind::Sum, a, axis, keepdims)
    }
    pub fn mean(&mut self, a: Var, axis: Option<usize>, keepdims: bool) -> Var {
        self.reduce(ReduceKind::Mean, a, axis, keepdims)
    }
    pub fn max_reduce(&mut self, a: Var, axis: Option<usize>, keepdims: bool) -> Var {
        self.reduce(ReduceKind::Max, a, axis, keepdims)
    }

    // ── structural ──────────────────────────────────────────────────

    /// Contiguous range `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let c = *av.shape().last().expect("slice_last needs ndim >= 1");
        assert!(start + len <= c, "slice {start}..{} out of width {c}", start + len);
        let rows = av.numel() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.requires(a.0);
        self.push(Array::new(shape, data), Op::SliceLast { a: a.0, start, len }, rg)
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ca, cb) = (*av.shape().last().unwrap(), *bv.shape().last().unwrap());
        assert_eq!(
            &av.shape()[..av.ndim() - 1],
            &bv.shape()[..bv.ndim() - 1],
            "concat_last leading dims differ"
        );
        let rows = av.numel() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.requires(a.0) || self.requires(b.0);
        self.push(Array::new(shape, data), Op::ConcatLast(a.0, b.0), rg)
    }

    /// Pick one entry per row of the last axis: `out[r, 0] = a[r, idx[r]]`.
    pub fn gather_last(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        let c = *av.shape().last().unwrap();
        let rows = av.numel() / c;
        assert_eq!(idx.len(), rows, "gather_last needs one index per row");
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            assert!(idx[r] < c, "gather index {} out of width {c}", idx[r]);
            data.push(av.data()[r * c + idx[r]]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.requires(a.0);
        self.push(Array::new(shape, data), Op::GatherLast { a: a.0, idx }, rg)
    }

    /// Select whole rows of a 2-D array: `out[v, :] = a[idx[v], :]`.
    /// Rows may repeat; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 2, "gather_rows expects a 2-D array");
        let c = av.shape()[1];
        let rows = av.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            assert!(r < rows, "row index {r} out of {rows}");
            data.extend_from_slice(&av.data()[r * c..(r + 1) * c]);
        }
        let rg = self.requires(a.0);
        self.push(
            Array::new(vec![idx.len(), c], data),
            Op::GatherRows { a: a.0, idx },
            rg,
        )
    }

    /// Reinterpret under a new shape with the same element count; free in
    /// both directions.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[a.0].value.clone().reshaped(shape);
        let rg = self.requires(a.0);
        self.push(value, Op::Reshape(a.0), rg)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let c = *av.shape().last().unwrap();
        let rows = av.numel() / c;
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = &av.data()[r * c..(r + 1) * c];
            let mut m = row[0];
            for &x in row {
                m = m.maximum(x);
            }
            let mut lse = S::zero();
            for &x in row {
                lse += (x - m).exp();
            }
            let lse = m + lse.ln();
            for &x in row {
                data.push(x - lse);
            }
        }
        let rg = self.requires(a.0);
        self.push(Array::new(av.shape().to_vec(), data), Op::LogSoftmax(a.0), rg)
    }

    /// Elementwise `mask ? a : b`; operands and mask share one shape.
    pub fn select(&mut self, mask: Arc<Vec<bool>>, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "select operand shapes differ");
        assert_eq!(mask.len(), av.numel(), "select mask length mismatch");
        let data = mask
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        self.push(
            Array::new(av.shape().to_vec(), data),
            Op::Select {
                a: a.0,
                b: b.0,
                mask,
            },
            rg,
        )
    }

    /// Record a node whose forward value was computed outside the tape.
    pub fn custom(&mut self, inputs: &[Var], value: Array<S>, op: Arc<dyn CustomOp<S>>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = ids.iter().any(|&i| self.requires(i));
        self.push(value, Op::Custom { inputs: ids, op }, rg)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every reachable differentiable node
    /// receives `d loss / d node`; leaves keep theirs for the caller.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Array::full(shape, S::one()));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {}
                Op::Unary(kind, a) => {
                    let (kind, a) = (*kind, *a);
                    let g = unary_grad(kind, &self.nodes[a].value, &self.nodes[i].value, &grad);
                    self.accumulate(a, g);
                }
                Op::Binary(kind, a, b) => {
                    let (kind, a, b) = (*kind, *a, *b);
                    let (ga, gb) =
                        binary_grads(kind, &self.nodes[a].value, &self.nodes[b].value, &grad);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ga, gb) =
                        matmul_grads(&self.nodes[a].value, &self.nodes[b].value, &grad);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Reduce {
                    kind,
                    a,
                    axis,
                    keepdims,
                } => {
                    let (kind, a, axis, keepdims) = (*kind, *a, *axis, *keepdims);
                    let g = reduce_grad(kind, &self.nodes[a].value, axis, keepdims, &grad);
                    self.accumulate(a, g);
                }
                Op::SliceLast { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    let av = &self.nodes[a].value;
                    let c = *av.shape().last().unwrap();
                    let rows = av.numel() / c;
                    let mut out = Array::zeros(av.shape().to_vec());
                    for r in 0..rows {
                        let dst = &mut out.data_mut()[r * c + start..r * c + start + len];
                        let src = &grad.data()[r * len..(r + 1) * len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    self.accumulate(a, out);
                }
                Op::ConcatLast(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = *self.nodes[a].value.shape().last().unwrap();
                    let cb = *self.nodes[b].value.shape().last().unwrap();
                    let rows = self.nodes[a].value.numel() / ca;
                    let mut ga = Array::zeros(self.nodes[a].value.shape().to_vec());
                    let mut gb = Array::zeros(self.nodes[b].value.shape().to_vec());
                    for r in 0..rows {
                        let row = &grad.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                        ga.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                        gb.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                    }
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::GatherLast { a, idx } => {
                    let (a, idx) = (*a, idx.clone());
                    let av = &self.nodes[a].value;
                    let c = *av.shape().last().unwrap();
                    let mut out = Array::zeros(av.shape().to_vec());
                    for (r, &j) in idx.iter().enumerate() {
                        out.data_mut()[r * c + j] += grad.data()[r];
                    }
                    self.accumulate(a, out);
                }
                Op::GatherRows { a, idx } => {
                    let (a, idx) = (*a, idx.clone());
                    let av = &self.nodes[a].value;
                    let c = av.shape()[1];
                    let mut out = Array::zeros(av.shape().to_vec());
                    for (v, &r) in idx.iter().enumerate() {
                        let dst = &mut out.data_mut()[r * c..(r + 1) * c];
                        let src = &grad.data()[v * c..(v + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    self.accumulate(a, out);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let shape = self.nodes[a].value.shape().to_vec();
                    self.accumulate(a, grad.reshaped(shape));
                }
                Op::LogSoftmax(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let c = *y.shape().last().unwrap();
                    let rows = y.numel() / c;
                    let mut out = Array::zeros(y.shape().to_vec());
                    for r in 0..rows {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &grad.data()[r * c..(r + 1) * c];
                        let mut gsum = S::zero();
                        for &g in gr {
                            gsum += g;
                        }
                        let or = &mut out.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            or[j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.accumulate(a, out);
                }
                Op::Select { a, b, mask } => {
                    let (a, b, mask) = (*a, *b, mask.clone());
                    let mut ga = Array::zeros(grad.shape().to_vec());
                    let mut gb = Array::zeros(grad.shape().to_vec());
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            ga.data_mut()[j] = grad.data()[j];
                        } else {
                            gb.data_mut()[j] = grad.data()[j];
                        }
                    }
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddScalar(a, _) => {
                    let a = *a;
                    self.accumulate(a, grad);
                }
                Op::MulScalar(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, grad.map(|g| g * c));
                }
                Op::Custom { inputs, op } => {
                    let (inputs, op) = (inputs.clone(), op.clone());
                    let vals: Vec<&Array<S>> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let grads = op.backward(&self.nodes[i].value, &grad, &vals);
                    assert_eq!(
                        grads.len(),
                        inputs.len(),
                        "{}: backward returned {} grads for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    );
                    for (j, g) in inputs.into_iter().zip(grads) {
                        if let Some(g) = g {
                            self.accumulate(j, g);
                        }
                    }
                }
            }
        }
    }

    fn accumulate(&mut self, idx: usize, contribution: Array<S>) {
        let node = &mut self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        assert_eq!(
            contribution.shape(),
            node.value.shape(),
            "gradient shape mismatch at node {idx}"
        );
        match &mut node.grad {
            Some(g) => {
                for (dst, src) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *dst += *src;
                }
            }
            None => node.grad = Some(contribution),
        }
    }
}

// ── forward helpers ─────────────────────────────────────────────────

fn apply_unary<S: Scalar>(kind: UnaryKind, a: &Array<S>) -> Array<S> {
    match kind {
        UnaryKind::Exp => a.map(|x| x.exp()),
        UnaryKind::Log => a.map(|x| x.ln()),
        UnaryKind::Softplus => a.map(|x| x.softplus()),
        UnaryKind::Tanh => a.map(|x| x.tanh()),
        UnaryKind::Square => a.map(|x| x * x),
        UnaryKind::Recip => a.map(|x| S::one() / x),
        UnaryKind::Sqrt => a.map(|x| x.sqrt()),
        UnaryKind::Relu => a.map(|x| x.maximum(S::zero())),
        UnaryKind::Neg => a.map(|x| -x),
    }
}

fn unary_grad<S: Scalar>(kind: UnaryKind, x: &Array<S>, y: &Array<S>, g: &Array<S>) -> Array<S> {
    let zip = |f: fn(S, S) -> S, other: &Array<S>| {
        Array::new(g.shape().to_vec(), par_zip(g.data(), other.data(), f))
    };
    match kind {
        UnaryKind::Exp => zip(|g, y| g * y, y),
        UnaryKind::Log => zip(|g, x| g / x, x),
        UnaryKind::Softplus => zip(|g, x| g * x.sigmoid(), x),
        UnaryKind::Tanh => zip(|g, y| g * (S::one() - y * y), y),
        UnaryKind::Square => zip(|g, x| g * S::from_f64(2.0) * x, x),
        UnaryKind::Recip => zip(|g, y| -g * y * y, y),
        UnaryKind::Sqrt => zip(|g, y| g / (S::from_f64(2.0) * y), y),
        UnaryKind::Relu => zip(|g, x| if x > S::zero() { g } else { S::zero() }, x),
        UnaryKind::Neg => g.map(|g| -g),
    }
}

fn binary_op<S: Scalar>(kind: BinaryKind) -> fn(S, S) -> S {
    match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
        BinaryKind::Div => |x, y| x / y,
        BinaryKind::Min => |x, y| x.minimum(y),
    }
}

fn apply_binary<S: Scalar>(kind: BinaryKind, a: &Array<S>, b: &Array<S>) -> Array<S> {
    let f = binary_op::<S>(kind);
    if a.shape() == b.shape() {
        return Array::new(a.shape().to_vec(), par_zip(a.data(), b.data(), f));
    }
    if b.numel() == 1 {
        let y = b.data()[0];
        return a.map(|x| f(x, y));
    }
    if a.numel() == 1 {
        let x = a.data()[0];
        return b.map(|y| f(x, y));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let n = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), out_shape.len());
    let sb = broadcast_strides(b.shape(), out_shape.len());
    let mut data = Vec::with_capacity(n);
    let mut coords = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..out_shape.len() {
            ia += coords[d] * sa[d];
            ib += coords[d] * sb[d];
        }
        data.push(f(a.data()[ia], b.data()[ib]));
        for d in (0..out_shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Array::new(out_shape, data)
}

/// Evaluate `a`'s value broadcast to `shape`.
fn expand_to<S: Scalar>(a: &Array<S>, shape: &[usize]) -> Array<S> {
    if a.shape() == shape {
        return a.clone();
    }
    let n: usize = shape.iter().product();
    let sa = broadcast_strides(a.shape(), shape.len());
    let mut data = Vec::with_capacity(n);
    let mut coords = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut ia = 0;
        for d in 0..shape.len() {
            ia += coords[d] * sa[d];
        }
        data.push(a.data()[ia]);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Array::new(shape.to_vec(), data)
}

fn binary_grads<S: Scalar>(
    kind: BinaryKind,
    a: &Array<S>,
    b: &Array<S>,
    g: &Array<S>,
) -> (Array<S>, Array<S>) {
    let out_shape = g.shape().to_vec();
    // Broadcast operands are expanded once; same-shape operands (the hot
    // path) borrow directly.
    let expand = |x: &Array<S>| -> Option<Array<S>> {
        (x.shape() != out_shape.as_slice()).then(|| expand_to(x, &out_shape))
    };
    let (ga_full, gb_full) = match kind {
        BinaryKind::Add => (g.clone(), g.clone()),
        BinaryKind::Sub => (g.clone(), g.map(|v| -v)),
        BinaryKind::Mul => {
            let ae = expand(a);
            let be = expand(b);
            let av = ae.as_ref().unwrap_or(a).data();
            let bv = be.as_ref().unwrap_or(b).data();
            let ga = Array::new(out_shape.clone(), par_zip(g.data(), bv, |g, b| g * b));
            let gb = Array::new(out_shape.clone(), par_zip(g.data(), av, |g, a| g * a));
            (ga, gb)
        }
        BinaryKind::Div => {
            let ae = expand(a);
            let be = expand(b);
            let av = ae.as_ref().unwrap_or(a).data();
            let bv = be.as_ref().unwrap_or(b).data();
            let ga = Array::new(out_shape.clone(), par_zip(g.data(), bv, |g, b| g / b));
            let gb = Array::new(
                out_shape.clone(),
                g.data()
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect(),
            );
            (ga, gb)
        }
        BinaryKind::Min => {
            // Subgradient: ties route to the left operand.
            let ae = expand(a);
            let be = expand(b);
            let av = ae.as_ref().unwrap_or(a).data();
            let bv = be.as_ref().unwrap_or(b).data();
            let mut ga = Array::zeros(out_shape.clone());
            let mut gb = Array::zeros(out_shape.clone());
            for j in 0..g.numel() {
                if av[j] <= bv[j] {
                    ga.data_mut()[j] = g.data()[j];
                } else {
                    gb.data_mut()[j] = g.data()[j];
                }
            }
            (ga, gb)
        }
    };
    let shrink = |full: Array<S>, shape: &[usize]| {
        if full.shape() == shape {
            full
        } else {
            reduce_to_shape(&full, shape)
        }
    };
    (shrink(ga_full, a.shape()), shrink(gb_full, b.shape()))
}

fn apply_matmul<S: Scalar>(a: &Array<S>, b: &Array<S>) -> Array<S> {
    assert!(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs ndim >= 2");
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (kb, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    if b.ndim() == 2 {
        let rows: usize = a.numel() / k;
        let mut out = vec![S::zero(); rows * n];
        matmul_nn(a.data(), b.data(), &mut out, rows, k, n);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        return Array::new(shape, out);
    }
    assert_eq!(
        &a.shape()[..a.ndim() - 2],
        &b.shape()[..b.ndim() - 2],
        "batched matmul leading dims differ"
    );
    let batch: usize = a.shape()[..a.ndim() - 2].iter().product();
    let mut out = vec![S::zero(); batch * m * n];
    for i in 0..batch {
        matmul_nn(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Array::new(shape, out)
}

fn matmul_grads<S: Scalar>(a: &Array<S>, b: &Array<S>, g: &Array<S>) -> (Array<S>, Array<S>) {
    let k = a.shape()[a.ndim() - 1];
    let n = b.shape()[b.ndim() - 1];
    if b.ndim() == 2 {
        let rows = a.numel() / k;
        let mut ga = vec![S::zero(); rows * k];
        matmul_nt(g.data(), b.data(), &mut ga, rows, n, k);
        let mut gb = vec![S::zero(); k * n];
        matmul_tn(a.data(), g.data(), &mut gb, rows, k, n);
        (
            Array::new(a.shape().to_vec(), ga),
            Array::new(b.shape().to_vec(), gb),
        )
    } else {
        let m = a.shape()[a.ndim() - 2];
        let batch: usize = a.shape()[..a.ndim() - 2].iter().product();
        let mut ga = vec![S::zero(); batch * m * k];
        let mut gb = vec![S::zero(); batch * k * n];
        for i in 0..batch {
            matmul_nt(
                &g.data()[i * m * n..(i + 1) * m * n],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut ga[i * m * k..(i + 1) * m * k],
                m,
                n,
                k,
            );
            matmul_tn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &g.data()[i * m * n..(i + 1) * m * n],
                &mut gb[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        (
            Array::new(a.shape().to_vec(), ga),
            Array::new(b.shape().to_vec(), gb),
        )
    }
}

/// Decompose `shape` around `axis` into (outer, axis, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>, keepdims: bool) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(ax) => {
            let mut s = shape.to_vec();
            if keepdims {
                s[ax] = 1;
            } else {
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
            }
            s
        }
    }
}

fn apply_reduce<S: Scalar>(
    kind: ReduceKind,
    a: &Array<S>,
    axis: Option<usize>,
    keepdims: bool,
) -> Array<S> {
    if let Some(ax) = axis {
        assert!(ax < a.ndim(), "reduce axis {ax} out of rank {}", a.ndim());
    }
    let (outer, len, inner) = match axis {
        None => (1, a.numel(), 1),
        Some(ax) => axis_split(a.shape(), ax),
    };
    let shape = reduced_shape(a.shape(), axis, keepdims);
    let mut data = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| a.data()[o * len * inner + j * inner + i];
            let v = match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut acc = S::zero();
                    for j in 0..len {
                        acc += at(j);
                    }
                    if kind == ReduceKind::Mean {
                        acc / S::from_f64(len as f64)
                    } else {
                        acc
                    }
                }
                ReduceKind::Max => {
                    let mut m = at(0);
                    for j in 1..len {
                        m = m.maximum(at(j));
                    }
                    m
                }
            };
            data.push(v);
        }
    }
    Array::new(shape, data)
}


fn reduce_grad<S: Scalar>(
    kind: ReduceKind,
    a: &Array<S>,
    axis: Option<usize>,
    _keepdims: bool,
    g: &Array<S>,
) -> Array<S> {
    let (outer, len, inner) = match axis {
        None => (1, a.numel(), 1),
        Some(ax) => axis_split(a.shape(), ax),
    };
    let mut out = Array::zeros(a.shape().to_vec());
    for o in 0..outer {
        for i in 0..inner {
            let gv = g.data()[o * inner + i];
            match kind {
                ReduceKind::Sum => {
                    for j in 0..len {
                        out.data_mut()[o * len * inner + j * inner + i] = gv;
                    }
                }
                ReduceKind::Mean => {
                    let d = gv / S::from_f64(len as f64);
                    for j in 0..len {
                        out.data_mut()[o * len * inner + j * inner + i] = d;
                    }
                }
                ReduceKind::Max => {
                    // Subgradient at the first argmax.
                    let mut best = 0;
                    let mut bv = a.data()[o * len * inner + i];
                    for j in 1..len {
                        let v = a.data()[o * len * inner + j * inner + i];
                        if v > bv {
                            bv = v;
                            best = j;
                        }
                    }
                    out.data_mut()[o * len * inner + best * inner + i] = gv;
                }
            }
        }
    }
    out
}
