//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so the node list is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep. Tapes are cheap and meant to
//! be rebuilt for every forward pass.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

/// Operation kinds, used for reporting and for gradient-rule fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Relu,
    Abs,
    Square,
    LogSoftmax,
    Sum,
    Mean,
    Gather,
    KlDiv,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Gather,
        OpKind::KlDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Gather => "gather",
            OpKind::KlDiv => "kl_div",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    LogSoftmax { input: usize, axis: usize },
    Sum(usize),
    Mean(usize),
    Gather { input: usize, indices: Vec<usize> },
    KlDiv(KlCache),
}

struct KlCache {
    p: usize,
    q: usize,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
    row_kl: Vec<f64>,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Gather { .. } => OpKind::Gather,
            Op::KlDiv(_) => OpKind::KlDiv,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Every variable that
    /// requires a gradient has one (zeros when the loss does not depend on
    /// it); constants have none.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index as usize).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index as usize).and_then(Option::take)
    }
}

/// Linear record of operations for reverse-mode differentiation.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
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
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: perturbs the gradient rule of `op` by a factor of 1.1 so
    /// gradient checks can demonstrate that they catch broken rules.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, op: OpKind) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.try_value(var).expect("variable belongs to a different tape")
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        self.index(var).map(|i| &self.nodes[i].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.index(var).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index as usize >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(var.index as usize)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape too long");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn push_checked(&mut self, op: Op, value: Tensor, inputs: &[usize]) -> Result<Var> {
        let kind = op.kind();
        value.check_finite(kind.name())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.binary("add", ia, ib, |x, y| x + y)?;
        self.push_checked(Op::Add(ia, ib), value, &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.binary("sub", ia, ib, |x, y| x - y)?;
        self.push_checked(Op::Sub(ia, ib), value, &[ia, ib])
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.binary("mul", ia, ib, |x, y| x * y)?;
        self.push_checked(Op::Mul(ia, ib), value, &[ia, ib])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.nodes[ia].value.map(|x| x * factor);
        self.push_checked(Op::Scale(ia, factor), value, &[ia])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let (m, k) = ta.dims2().map_err(|_| mismatch())?;
        let (k2, n) = tb.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        self.push_checked(Op::MatMul(ia, ib), value, &[ia, ib])
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_checked(Op::Relu(ia), value, &[ia])
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.nodes[ia].value.map(f64::abs);
        self.push_checked(Op::Abs(ia), value, &[ia])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.nodes[ia].value.map(|x| x * x);
        self.push_checked(Op::Square(ia), value, &[ia])
    }

    /// `z − logsumexp(z)` along `axis`, with max subtraction.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let t = &self.nodes[ia].value;
        if axis >= t.rank() {
            return Err(Error::invalid("log_softmax axis out of range"));
        }
        let data = log_softmax_along(t.data(), t.shape(), axis);
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push_checked(Op::LogSoftmax { input: ia, axis }, value, &[ia])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let total = self.nodes[ia].value.data().iter().sum::<f64>();
        self.push_checked(Op::Sum(ia), Tensor::scalar(total), &[ia])
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_checked(Op::Mean(ia), Tensor::scalar(mean), &[ia])
    }

    /// Picks `a[i, indices[i]]` from each row of a `B×K` tensor, giving a
    /// length-`B` vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = t.dims2()?;
        if indices.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (i, &k) in indices.iter().enumerate() {
            if k >= cols {
                return Err(Error::LabelOutOfRange {
                    label: k,
                    classes: cols,
                });
            }
            data.push(t.data()[i * cols + k]);
        }
        let value = Tensor::from_parts(vec![rows], data);
        self.push_checked(
            Op::Gather {
                input: ia,
                indices: indices.to_vec(),
            },
            value,
            &[ia],
        )
    }

    /// Batch mean of row-wise `KL(softmax(p) ∥ softmax(q))`, computed in log
    /// space. Gradients flow into both arguments.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let (ip, iq) = (self.index(p)?, self.index(q)?);
        let (tp, tq) = (&self.nodes[ip].value, &self.nodes[iq].value);
        if tp.shape() != tq.shape() || tp.rank() != 2 || tp.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                left: tp.shape().to_vec(),
                right: tq.shape().to_vec(),
            });
        }
        let (rows, cols) = tp.dims2()?;
        let log_p = log_softmax_along(tp.data(), tp.shape(), 1);
        let log_q = log_softmax_along(tq.data(), tq.shape(), 1);
        let row_kl: Vec<f64> = (0..rows)
            .map(|i| {
                let r = i * cols..(i + 1) * cols;
                log_p[r.clone()]
                    .iter()
                    .zip(&log_q[r])
                    .map(|(&lp, &lq)| libm::exp(lp) * (lp - lq))
                    .sum()
            })
            .collect();
        let value = Tensor::scalar(row_kl.iter().sum::<f64>() / rows as f64);
        let cache = KlCache {
            p: ip,
            q: iq,
            log_p,
            log_q,
            row_kl,
        };
        self.push_checked(Op::KlDiv(cache), value, &[ip, iq])
    }

    fn binary(
        &self,
        op: &'static str,
        ia: usize,
        ib: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let map_a = broadcast_map(&shape, ta.shape());
        let map_b = broadcast_map(&shape, tb.shape());
        let data = map_a
            .iter()
            .zip(&map_b)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Per-node branch pattern of the piecewise operations (ReLU masks and
    /// `|·|` signs). Two evaluations with equal signatures lie on the same
    /// smooth piece.
    pub fn branch_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(i) => sig.extend(self.nodes[i].value.data().iter().map(|&x| i8::from(x > 0.0))),
                Op::Abs(i) => sig.extend(self.nodes[i].value.data().iter().map(|&x| sign(x) as i8)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every path.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.index(loss)?;
        let loss_value = &self.nodes[root].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].requires_grad {
            grads[root] = Some(Tensor::full(loss_value.shape(), 1.0));
        }
        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.input_grads(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in &mut contributions {
                    c.data_mut().iter_mut().for_each(|v| *v *= 1.1);
                }
            }
            for (input, contribution) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *slot = None;
                continue;
            }
            match slot {
                Some(g) => g.check_finite("backward")?,
                None => *slot = Some(Tensor::zeros(node.value.shape())),
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
        let value_of = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, value_of(*a).shape())),
                (*b, reduce_to(g, value_of(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, value_of(*a).shape())),
                (*b, reduce_to(&g.map(|v| -v), value_of(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (value_of(*a), value_of(*b));
                let shape = g.shape();
                let other = |t: &Tensor| -> Vec<f64> {
                    broadcast_map(shape, t.shape()).iter().map(|&j| t.data()[j]).collect()
                };
                let (ea, eb) = (other(ta), other(tb));
                let ga: Vec<f64> = g.data().iter().zip(&eb).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(&ea).map(|(x, y)| x * y).collect();
                vec![
                    (*a, reduce_to(&Tensor::from_parts(shape.to_vec(), ga), ta.shape())),
                    (*b, reduce_to(&Tensor::from_parts(shape.to_vec(), gb), tb.shape())),
                ]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|v| v * factor))],
            Op::MatMul(a, b) => {
                let (ta, tb) = (value_of(*a), value_of(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut out = Vec::with_capacity(2);
                if self.nodes[*a].requires_grad {
                    let ga = matmul_nt_kernel(g.data(), tb.data(), m, k, n);
                    out.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if self.nodes[*b].requires_grad {
                    let gb = matmul_tn_kernel(ta.data(), g.data(), m, k, n);
                    out.push((*b, Tensor::from_parts(vec![k, n], gb)));
                }
                out
            }
            Op::Relu(a) => {
                let x = value_of(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::Abs(a) => {
                let x = value_of(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * sign(xv)).collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::Square(a) => {
                let x = value_of(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| 2.0 * xv * gv).collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::LogSoftmax { input, axis } => {
                let out = &node.value;
                let data = log_softmax_backward(out.data(), g.data(), out.shape(), *axis);
                vec![(*input, Tensor::from_parts(out.shape().to_vec(), data))]
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                vec![(*a, Tensor::full(value_of(*a).shape(), gv))]
            }
            Op::Mean(a) => {
                let x = value_of(*a);
                let gv = g.data()[0] / x.len() as f64;
                vec![(*a, Tensor::full(x.shape(), gv))]
            }
            Op::Gather { input, indices } => {
                let x = value_of(*input);
                let cols = x.shape()[1];
                let mut out = Tensor::zeros(x.shape());
                for (i, (&k, &gv)) in indices.iter().zip(g.data()).enumerate() {
                    out.data_mut()[i * cols + k] = gv;
                }
                vec![(*input, out)]
            }
            Op::KlDiv(cache) => {
                let shape = value_of(cache.p).shape();
                let (rows, cols) = (shape[0], shape[1]);
                let scale = g.data()[0] / rows as f64;
                let mut gp = Vec::with_capacity(rows * cols);
                let mut gq = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    let kl = cache.row_kl[i];
                    for j in i * cols..(i + 1) * cols {
                        let (lp, lq) = (cache.log_p[j], cache.log_q[j]);
                        let (p, q) = (libm::exp(lp), libm::exp(lq));
                        gp.push(scale * p * ((lp - lq) - kl));
                        gq.push(scale * (q - p));
                    }
                }
                vec![
                    (cache.p, Tensor::from_parts(shape.to_vec(), gp)),
                    (cache.q, Tensor::from_parts(shape.to_vec(), gq)),
                ]
            }
        }
    }
}

/// `sign(x)` with `sign(0) = 0`.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Right-aligned broadcast: missing leading extents count as 1 and an
/// extent of 1 stretches to match the other operand.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index of `in_shape` it reads.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    if out_shape == in_shape {
        return (0..total).collect();
    }
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Sums `g` over the axes along which `shape` was broadcast.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_map(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    for (&j, &gv) in map.iter().zip(g.data()) {
        out.data_mut()[j] += gv;
    }
    out
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn log_softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|k| libm::exp(data[at(k)] - max)).sum();
            let log_sum = libm::log(sum);
            for k in 0..len {
                out[at(k)] = (data[at(k)] - max) - log_sum;
            }
        }
    }
    out
}

fn log_softmax_backward(out: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut grad = vec![0.0; out.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let gsum: f64 = (0..len).map(|k| g[at(k)]).sum();
            for k in 0..len {
                grad[at(k)] = g[at(k)] - libm::exp(out[at(k)]) * gsum;
            }
        }
    }
    grad
}
