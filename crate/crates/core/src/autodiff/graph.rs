use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Primitive operations. Every derivative rule below is written in terms of
/// these same primitives, so gradients are themselves differentiable.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    Sqrt,
    /// `1/x`, with `1/0 := 0`.
    Recip,
    SumAll,
    ExpandAll(Vec<usize>),
    SumAxis(usize),
    ExpandAxis {
        axis: usize,
        len: usize,
    },
    Reshape(Vec<usize>),
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
    Pad {
        start: usize,
        total: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::SumAll => "sum",
            Op::ExpandAll(_) => "expand",
            Op::SumAxis(_) => "sum_axis",
            Op::ExpandAxis { .. } => "expand_axis",
            Op::Reshape(_) => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Single-threaded by construction (`RefCell`); run independent graphs on
/// independent threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
    forward_passes: Cell<usize>,
    backward_passes: Cell<usize>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &n.op)
            .field("shape", &n.value.shape())
            .finish()
    }
}

/// Gradients of one scalar output with respect to a list of leaves.
#[derive(Debug)]
pub struct GradMap<'g> {
    entries: Vec<(NodeId, Var<'g>)>,
    /// Leaves the output does not depend on. Their gradient is zero.
    pub disconnected: Vec<NodeId>,
}

impl<'g> GradMap<'g> {
    pub fn get(&self, leaf: Var<'g>) -> Option<Var<'g>> {
        self.entries
            .iter()
            .find(|(id, _)| *id == leaf.id)
            .map(|(_, g)| *g)
    }

    /// Gradients in the order the leaves were requested.
    pub fn in_order(&self) -> Vec<Var<'g>> {
        self.entries.iter().map(|(_, g)| *g).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Incremented on every call to [`Graph::grad`].
    pub fn generation(&self) -> u64 {
        self.generation.get()
    }

    /// Model code calls this once per full forward pass.
    pub fn count_forward(&self) {
        self.forward_passes.set(self.forward_passes.get() + 1);
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes.get()
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes.get()
    }

    /// Trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Const, Vec::new(), value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn apply(&self, op: Op, inputs: &[NodeId]) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let rg = inputs.iter().any(|&i| nodes[i].requires_grad);
            (eval(&op, &vals)?, rg)
        };
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    /// Concatenate along the leading axis.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let ids: Vec<NodeId> = parts.iter().map(|v| v.id).collect();
        self.apply(Op::Concat, &ids)
    }

    /// Re-evaluate every node from its inputs and compare with the stored
    /// value bit for bit.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().all(|n| match n.op {
            Op::Leaf | Op::Const => true,
            _ => {
                let vals: Vec<&Tensor> =
                    n.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
                match eval(&n.op, &vals) {
                    Ok(t) => {
                        t.shape() == n.value.shape()
                            && t.data()
                                .iter()
                                .zip(n.value.data())
                                .all(|(a, b)| a.to_bits() == b.to_bits())
                    }
                    Err(_) => false,
                }
            }
        })
    }

    fn is_leaf(&self, id: NodeId) -> bool {
        let nodes = self.nodes.borrow();
        nodes[id].op == Op::Leaf
    }

    /// Reverse-mode gradient of a scalar `output` with respect to `leaves`.
    ///
    /// With `create_graph` the returned gradients are graph nodes and can be
    /// differentiated again. Without it the backward nodes are discarded and
    /// the gradients come back as constants.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g>,
        leaves: &[Var<'g>],
        create_graph: bool,
    ) -> Result<GradMap<'g>> {
        let out_shape = output.shape();
        if output.numel() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        for l in leaves {
            if !self.is_leaf(l.id) {
                return Err(Error::NotALeaf(l.id));
            }
        }
        self.backward_passes.set(self.backward_passes.get() + 1);
        self.generation.set(self.generation.get() + 1);

        let mark = self.len();
        let n = output.id + 1;
        let mut relevant = vec![false; n];
        for l in leaves {
            if l.id < n {
                relevant[l.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !relevant[i] && nodes[i].requires_grad {
                    relevant[i] = nodes[i].inputs.iter().any(|&j| relevant[j]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        if relevant[output.id] {
            grads[output.id] = Some(self.constant(Tensor::full(&out_shape, 1.0)));
        }
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs.clone())
            };
            if op == Op::Leaf {
                continue;
            }
            let needed: Vec<bool> = inputs.iter().map(|&j| relevant[j]).collect();
            let contribs = self.vjp(&op, &inputs, Var { graph: self, id: i }, g, &needed)?;
            for (k, c) in contribs.into_iter().enumerate() {
                if let Some(c) = c {
                    let j = inputs[k];
                    grads[j] = Some(match grads[j] {
                        Some(prev) => prev.add(c)?,
                        None => c,
                    });
                }
            }
        }

        let mut values = Vec::with_capacity(leaves.len());
        let mut disconnected = Vec::new();
        for l in leaves {
            match grads.get(l.id).copied().flatten() {
                Some(g) => values.push(g),
                None => {
                    disconnected.push(l.id);
                    values.push(self.constant(Tensor::zeros(&l.shape())));
                }
            }
        }

        let entries = if create_graph {
            leaves.iter().map(|l| l.id).zip(values).collect()
        } else {
            let detached: Vec<Tensor> = values.iter().map(|v| v.value().as_ref().clone()).collect();
            self.nodes.borrow_mut().truncate(mark);
            leaves
                .iter()
                .map(|l| l.id)
                .zip(detached.into_iter().map(|t| self.constant(t)))
                .collect()
        };
        Ok(GradMap {
            entries,
            disconnected,
        })
    }

    /// Vector-Jacobian products for one node. `out` is the node itself.
    fn vjp<'g>(
        &'g self,
        op: &Op,
        inputs: &[NodeId],
        out: Var<'g>,
        g: Var<'g>,
        needed: &[bool],
    ) -> Result<Vec<Option<Var<'g>>>> {
        let x = |k: usize| Var {
            graph: self,
            id: inputs[k],
        };
        let want = |k: usize| needed.get(k).copied().unwrap_or(false);
        let one = |v: Result<Var<'g>>| -> Result<Vec<Option<Var<'g>>>> { Ok(vec![Some(v?)]) };
        match op {
            Op::Leaf | Op::Const => Ok(vec![]),
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => Ok(vec![
                Some(g),
                if want(1) { Some(g.scale(-1.0)?) } else { None },
            ]),
            Op::Mul => Ok(vec![
                if want(0) { Some(g.mul(x(1))?) } else { None },
                if want(1) { Some(g.mul(x(0))?) } else { None },
            ]),
            Op::Scale(c) => one(g.scale(*c)),
            Op::Shift(_) => Ok(vec![Some(g)]),
            Op::MatMul => Ok(vec![
                if want(0) {
                    Some(g.matmul(x(1).t()?)?)
                } else {
                    None
                },
                if want(1) {
                    Some(x(0).t()?.matmul(g)?)
                } else {
                    None
                },
            ]),
            Op::Transpose => one(g.t()),
            Op::Relu => {
                let mask = x(0).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                one(g.mul(self.constant(mask)))
            }
            Op::Exp => one(g.mul(out)),
            Op::Log => one(g.mul(x(0).recip()?)),
            Op::Sqrt => one(g.mul(out.recip()?.scale(0.5)?)),
            Op::Recip => one(g.mul(out.mul(out)?)?.scale(-1.0)),
            Op::SumAll => one(g.expand(&x(0).shape())),
            Op::ExpandAll(_) => one(g.sum()?.reshape(&x(0).shape())),
            Op::SumAxis(axis) => {
                let len = x(0).shape()[*axis];
                one(g.expand_axis(*axis, len))
            }
            Op::ExpandAxis { axis, .. } => one(g.sum_axis(*axis)),
            Op::Reshape(_) => one(g.reshape(&x(0).shape())),
            Op::Concat => {
                let mut res = Vec::with_capacity(inputs.len());
                let mut start = 0;
                for k in 0..inputs.len() {
                    let len = x(k).value().rows();
                    res.push(if want(k) {
                        Some(g.slice_rows(start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                Ok(res)
            }
            Op::Slice { start, .. } => {
                let total = x(0).value().rows();
                one(g.pad_rows(*start, total))
            }
            Op::Pad { start, .. } => {
                let len = x(0).value().rows();
                one(g.slice_rows(*start, len))
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value().as_ref().clone())
    }

    fn unary(&self, op: Op) -> Result<Var<'g>> {
        self.graph.apply(op, &[self.id])
    }

    fn binary(&self, op: Op, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(op, &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Add, rhs)
    }

    pub fn sub(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Sub, rhs)
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Mul, rhs)
    }

    pub fn matmul(&self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::MatMul, rhs)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Shift(c))
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn t(&self) -> Result<Var<'g>> {
        self.unary(Op::Transpose)
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(Op::Relu)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(Op::Exp)
    }

    pub fn ln(&self) -> Result<Var<'g>> {
        self.unary(Op::Log)
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        self.unary(Op::Sqrt)
    }

    pub fn recip(&self) -> Result<Var<'g>> {
        self.unary(Op::Recip)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary(Op::SumAll)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::ExpandAll(shape.to_vec()))
    }

    /// Sum a matrix over `axis`, producing a vector.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        self.unary(Op::SumAxis(axis))
    }

    /// Insert `axis` of length `len` into a vector by repetition.
    pub fn expand_axis(&self, axis: usize, len: usize) -> Result<Var<'g>> {
        self.unary(Op::ExpandAxis { axis, len })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        self.unary(Op::Slice { start, len })
    }

    /// Embed into `total` rows of zeros starting at `start`.
    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Var<'g>> {
        self.unary(Op::Pad { start, total })
    }
}

fn shape_err(op: &Op, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn zip_with(op: &Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn require_rank(op: &Op, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape {
            op: op.name(),
            lhs: t.shape().to_vec(),
            rhs: vec![rank],
        });
    }
    Ok(())
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn eval(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves are not evaluated"),
        Op::Add => zip_with(op, x[0], x[1], |a, b| a + b),
        Op::Sub => zip_with(op, x[0], x[1], |a, b| a - b),
        Op::Mul => zip_with(op, x[0], x[1], |a, b| a * b),
        Op::Scale(c) => Ok(x[0].map(|v| v * c)),
        Op::Shift(c) => Ok(x[0].map(|v| v + c)),
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, a, b));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)
        }
        Op::Transpose => {
            require_rank(op, x[0], 2)?;
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let src = x[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)
        }
        Op::Relu => Ok(x[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Exp => Ok(x[0].map(f64::exp)),
        Op::Log => Ok(x[0].map(f64::ln)),
        Op::Sqrt => Ok(x[0].map(f64::sqrt)),
        Op::Recip => Ok(x[0].map(|v| if v == 0.0 { 0.0 } else { 1.0 / v })),
        Op::SumAll => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Op::ExpandAll(shape) => {
            if x[0].numel() != 1 {
                return Err(Error::Shape {
                    op: op.name(),
                    lhs: x[0].shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(Tensor::full(shape, x[0].item()))
        }
        Op::SumAxis(axis) => {
            require_rank(op, x[0], 2)?;
            let (r, c) = (x[0].shape()[0], x[0].shape()[1]);
            let d = x[0].data();
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, &v) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                    Ok(Tensor::vector(out))
                }
                1 => Ok(Tensor::vector(
                    (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect(),
                )),
                _ => Err(Error::Shape {
                    op: op.name(),
                    lhs: x[0].shape().to_vec(),
                    rhs: vec![*axis],
                }),
            }
        }
        Op::ExpandAxis { axis, len } => {
            require_rank(op, x[0], 1)?;
            let v = x[0].data();
            let n = v.len();
            match axis {
                0 => {
                    let mut out = Vec::with_capacity(len * n);
                    for _ in 0..*len {
                        out.extend_from_slice(v);
                    }
                    Tensor::new(vec![*len, n], out)
                }
                1 => {
                    let mut out = Vec::with_capacity(len * n);
                    for &val in v {
                        out.extend(std::iter::repeat_n(val, *len));
                    }
                    Tensor::new(vec![n, *len], out)
                }
                _ => Err(Error::Shape {
                    op: op.name(),
                    lhs: x[0].shape().to_vec(),
                    rhs: vec![*axis],
                }),
            }
        }
        Op::Reshape(shape) => x[0].clone().reshaped(shape.clone()),
        Op::Concat => {
            let first = x.first().ok_or(Error::Shape {
                op: op.name(),
                lhs: vec![],
                rhs: vec![],
            })?;
            let tail = &first.shape()[first.rank().min(1)..];
            let mut rows = 0;
            let mut data = Vec::new();
            for t in x {
                if t.rank() == 0 || &t.shape()[1..] != tail {
                    return Err(shape_err(op, first, t));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)
        }
        Op::Slice { start, len } => {
            let t = x[0];
            if t.rank() == 0 || start + len > t.rows() {
                return Err(Error::Shape {
                    op: op.name(),
                    lhs: t.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            let w = t.row_len();
            let mut shape = t.shape().to_vec();
            shape[0] = *len;
            Tensor::new(shape, t.data()[start * w..(start + len) * w].to_vec())
        }
        Op::Pad { start, total } => {
            let t = x[0];
            if t.rank() == 0 || start + t.rows() > *total {
                return Err(Error::Shape {
                    op: op.name(),
                    lhs: t.shape().to_vec(),
                    rhs: vec![*start, *total],
                });
            }
            let w = t.row_len();
            let mut data = vec![0.0; total * w];
            data[start * w..start * w + t.numel()].copy_from_slice(t.data());
            let mut shape = t.shape().to_vec();
            shape[0] = *total;
            Tensor::new(shape, data)
        }
    }
}
