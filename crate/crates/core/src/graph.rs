//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Ops execute eagerly and append a node to the graph; `backward` replays the
//! tape in exact reverse recording order, accumulating vector-Jacobian
//! products. Nodes are topologically ordered by construction: every input id
//! precedes its consumer.
//!
//! A graph instance is single-threaded; distinct graphs may run on distinct
//! threads concurrently.

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::Labels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation kind, with its parameters and any state saved at
/// forward time for the backward pass.
#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Leaf,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    AvgPool2d { size: usize, stride: usize },
    MaxPool2d { size: usize, stride: usize, argmax: Vec<usize> },
    AdaptiveAvgPool,
    Relu,
    Concat { axis: usize },
    Add,
    Mul,
    ScalarMul { factor: S },
    Log,
    Exp,
    Sum,
    L2Norm { scale: S },
    Reshape { shape: Vec<usize> },
    Select { index: usize },
    ClampAbs { bound: S },
    SoftmaxCe { labels: Labels<S>, classes: usize },
    ArcMarginCe { labels: Vec<usize>, classes: usize, scale: S, margin: S },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::AdaptiveAvgPool => "adaptive-avgpool",
            Op::Relu => "relu",
            Op::Concat { .. } => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ScalarMul { .. } => "scalar-mul",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sum => "sum",
            Op::L2Norm { .. } => "l2norm",
            Op::Reshape { .. } => "reshape",
            Op::Select { .. } => "select",
            Op::ClampAbs { .. } => "clamp-abs",
            Op::SoftmaxCe { .. } => "softmax-ce",
            Op::ArcMarginCe { .. } => "arc-margin-ce",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::Leaf => n == 0,
            Op::MatMul | Op::Conv2d { .. } | Op::Add | Op::Mul => n == 2,
            Op::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    tensor: Tensor<S>,
}

/// The recorded computation.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Compute the output shape and data for `op` applied to `inputs`.
/// Also refreshes forward-time saved state (maxpool argmax).
fn eval<S: Scalar>(op: &mut Op<S>, inputs: &[&Tensor<S>]) -> Result<(Vec<usize>, Vec<S>)> {
    let name = op.name();
    match op {
        Op::Leaf => unreachable!("leaf nodes are not evaluated"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 {
                return Err(shape_err(name, format!("lhs must be 2-d, got {:?}", a.shape())));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            match b.rank() {
                2 => {
                    let (k2, n) = (b.shape()[0], b.shape()[1]);
                    if k != k2 {
                        return Err(shape_err(
                            name,
                            format!("inner dims differ: lhs {m}x{k} vs rhs {k2}x{n}"),
                        ));
                    }
                    Ok((vec![m, n], ops::matmul(a.data(), b.data(), m, k, n)))
                }
                1 => {
                    let k2 = b.shape()[0];
                    if k != k2 {
                        return Err(shape_err(
                            name,
                            format!("inner dims differ: lhs {m}x{k} vs rhs vector of {k2}"),
                        ));
                    }
                    Ok((vec![m], ops::matmul(a.data(), b.data(), m, k, 1)))
                }
                r => Err(Error::UnsupportedOp {
                    op: name,
                    detail: format!("rhs rank {r} not supported"),
                }),
            }
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (inputs[0], inputs[1]);
            if *stride == 0 {
                return Err(Error::UnsupportedOp { op: name, detail: "stride must be >= 1".into() });
            }
            if x.rank() != 3 || w.rank() != 4 {
                return Err(Error::UnsupportedOp {
                    op: name,
                    detail: format!(
                        "expected input (c,h,w) and filter (co,ci,kh,kw), got {:?} and {:?}",
                        x.shape(),
                        w.shape()
                    ),
                });
            }
            let (ci, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (co, ci2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if ci != ci2 {
                return Err(shape_err(
                    name,
                    format!("input has {ci} channels but filter expects {ci2}"),
                ));
            }
            let oh = ops::conv_out_len(h, kh, *stride, *pad)
                .ok_or_else(|| shape_err(name, format!("kernel {kh} exceeds padded height {h}+2*{pad}")))?;
            let ow = ops::conv_out_len(ww, kw, *stride, *pad)
                .ok_or_else(|| shape_err(name, format!("kernel {kw} exceeds padded width {ww}+2*{pad}")))?;
            let out = ops::conv2d(x.data(), w.data(), ci, h, ww, co, kh, kw, *stride, *pad, oh, ow);
            Ok((vec![co, oh, ow], out))
        }
        Op::AvgPool2d { size, stride } | Op::MaxPool2d { size, stride, .. } => {
            let (size, stride) = (*size, *stride);
            let x = inputs[0];
            if size == 0 || stride == 0 {
                return Err(Error::UnsupportedOp {
                    op: name,
                    detail: "window and stride must be >= 1".into(),
                });
            }
            if x.rank() != 3 {
                return Err(Error::UnsupportedOp {
                    op: name,
                    detail: format!("expected (c,h,w), got {:?}", x.shape()),
                });
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let oh = ops::conv_out_len(h, size, stride, 0)
                .ok_or_else(|| shape_err(name, format!("window {size} exceeds height {h}")))?;
            let ow = ops::conv_out_len(w, size, stride, 0)
                .ok_or_else(|| shape_err(name, format!("window {size} exceeds width {w}")))?;
            match op {
                Op::AvgPool2d { .. } => {
                    Ok((vec![c, oh, ow], ops::avgpool2d(x.data(), c, h, w, size, stride, oh, ow)))
                }
                Op::MaxPool2d { argmax, .. } => {
                    let (out, arg) = ops::maxpool2d(x.data(), c, h, w, size, stride, oh, ow);
                    *argmax = arg;
                    Ok((vec![c, oh, ow], out))
                }
                _ => unreachable!(),
            }
        }
        Op::AdaptiveAvgPool => {
            let x = inputs[0];
            if x.rank() != 3 {
                return Err(Error::UnsupportedOp {
                    op: name,
                    detail: format!("expected (c,h,w), got {:?}", x.shape()),
                });
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            Ok((vec![c], ops::adaptive_avgpool(x.data(), c, h, w)))
        }
        Op::Relu => Ok((inputs[0].shape().to_vec(), ops::relu(inputs[0].data()))),
        Op::Concat { axis } => {
            let rank = inputs[0].rank();
            if *axis >= rank {
                return Err(Error::UnsupportedOp {
                    op: name,
                    detail: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            let mut axis_total = 0usize;
            for t in inputs {
                if t.rank() != rank {
                    return Err(shape_err(
                        name,
                        format!("rank mismatch: {:?} vs {:?}", inputs[0].shape(), t.shape()),
                    ));
                }
                for d in 0..rank {
                    if d != *axis && t.shape()[d] != inputs[0].shape()[d] {
                        return Err(shape_err(
                            name,
                            format!(
                                "dim {d} differs: {:?} vs {:?}",
                                inputs[0].shape(),
                                t.shape()
                            ),
                        ));
                    }
                }
                axis_total += t.shape()[*axis];
            }
            let mut out_shape = inputs[0].shape().to_vec();
            out_shape[*axis] = axis_total;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let mut data = vec![S::zero(); out_shape.iter().product()];
            let mut axis_offset = 0usize;
            for t in inputs {
                let a = t.shape()[*axis];
                for o in 0..outer {
                    let src = &t.data()[o * a * inner..(o + 1) * a * inner];
                    let dst_start = (o * axis_total + axis_offset) * inner;
                    data[dst_start..dst_start + a * inner].copy_from_slice(src);
                }
                axis_offset += a;
            }
            Ok((out_shape, data))
        }
        Op::Add | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(
                    name,
                    format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if matches!(op, Op::Add) { x + y } else { x * y })
                .collect();
            Ok((a.shape().to_vec(), data))
        }
        Op::ScalarMul { factor } => {
            if !factor.is_finite() {
                return Err(Error::NonFinite("scalar-mul factor".into()));
            }
            let f = *factor;
            Ok((inputs[0].shape().to_vec(), inputs[0].data().iter().map(|&v| v * f).collect()))
        }
        Op::Log => {
            let x = inputs[0];
            if x.data().iter().any(|&v| v <= S::zero()) {
                return Err(Error::NonFinite("log of non-positive input".into()));
            }
            Ok((x.shape().to_vec(), x.data().iter().map(|&v| v.ln()).collect()))
        }
        Op::Exp => {
            Ok((inputs[0].shape().to_vec(), inputs[0].data().iter().map(|&v| v.exp()).collect()))
        }
        Op::Sum => {
            let total = inputs[0].data().iter().fold(S::zero(), |a, &v| a + v);
            Ok((vec![1], vec![total]))
        }
        Op::L2Norm { scale } => {
            let x = inputs[0];
            if *scale <= S::zero() {
                return Err(Error::UnsupportedOp { op: name, detail: "scale must be > 0".into() });
            }
            let dim = *x.shape().last().expect("rank >= 1");
            let rows = x.numel() / dim;
            let out = ops::l2norm(x.data(), rows, dim, *scale).ok_or(Error::DegenerateVector)?;
            Ok((x.shape().to_vec(), out))
        }
        Op::Reshape { shape } => {
            let numel: usize = shape.iter().product();
            if numel != inputs[0].numel() || shape.iter().any(|&d| d == 0) {
                return Err(shape_err(
                    name,
                    format!("cannot reshape {:?} into {:?}", inputs[0].shape(), shape),
                ));
            }
            Ok((shape.clone(), inputs[0].data().to_vec()))
        }
        Op::Select { index } => {
            let x = inputs[0];
            if *index >= x.numel() {
                return Err(shape_err(
                    name,
                    format!("index {index} out of range for {} elements", x.numel()),
                ));
            }
            Ok((vec![1], vec![x.data()[*index]]))
        }
        Op::ClampAbs { bound } => {
            if !(*bound > S::zero()) {
                return Err(Error::UnsupportedOp { op: name, detail: "bound must be > 0".into() });
            }
            Ok((inputs[0].shape().to_vec(), ops::clamp_abs(inputs[0].data(), *bound)))
        }
        Op::SoftmaxCe { labels, classes } => {
            let z = inputs[0];
            let (batch, k) = check_batch_logits(name, z, *classes)?;
            match labels {
                Labels::Hard(idx) => {
                    if idx.len() != batch {
                        return Err(shape_err(
                            name,
                            format!("{} labels for batch of {batch}", idx.len()),
                        ));
                    }
                    for &mut l in idx {
                        if l >= k {
                            return Err(Error::LabelOutOfRange { label: l, num_classes: k });
                        }
                    }
                }
                Labels::Soft(y) => {
                    if y.len() != batch * k {
                        return Err(shape_err(
                            name,
                            format!("soft labels of len {} for {batch}x{k} logits", y.len()),
                        ));
                    }
                }
            }
            Ok((vec![1], vec![ops::softmax_ce(z.data(), labels, batch, k)]))
        }
        Op::ArcMarginCe { labels, classes, scale, margin } => {
            let c = inputs[0];
            let (batch, k) = check_batch_logits(name, c, *classes)?;
            if labels.len() != batch {
                return Err(shape_err(name, format!("{} labels for batch of {batch}", labels.len())));
            }
            for &l in labels.iter() {
                if l >= k {
                    return Err(Error::LabelOutOfRange { label: l, num_classes: k });
                }
            }
            Ok((vec![1], vec![ops::arc_margin_ce(c.data(), labels, batch, k, *scale, *margin)]))
        }
    }
}

fn check_batch_logits<S: Scalar>(
    name: &'static str,
    t: &Tensor<S>,
    classes: usize,
) -> Result<(usize, usize)> {
    if t.rank() != 2 || t.shape()[1] != classes {
        return Err(shape_err(
            name,
            format!("expected batch x {classes} matrix, got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], classes))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor as a leaf node.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), tensor });
        id
    }

    /// Record one operation: validate, execute eagerly, append the node.
    pub fn apply(&mut self, mut op: Op<S>, inputs: &[NodeId]) -> Result<NodeId> {
        if !op.arity_ok(inputs.len()) {
            return Err(Error::UnsupportedOp {
                op: op.name(),
                detail: format!("wrong number of inputs: {}", inputs.len()),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnsupportedOp {
                    op: op.name(),
                    detail: format!("input node {} not in graph", id.0),
                });
            }
        }
        let tensors: Vec<&Tensor<S>> = inputs.iter().map(|id| &self.nodes[id.0].tensor).collect();
        let (shape, data) = eval(&mut op, &tensors)?;
        let tensor = Tensor::from_vec(shape, data)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs: inputs.to_vec(), tensor });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w])
    }

    pub fn avgpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        self.apply(Op::AvgPool2d { size, stride }, &[x])
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        self.apply(Op::MaxPool2d { size, stride, argmax: Vec::new() }, &[x])
    }

    pub fn adaptive_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::AdaptiveAvgPool, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        self.apply(Op::ScalarMul { factor }, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    /// Normalize along the last axis to L2 norm `scale`.
    pub fn l2norm(&mut self, x: NodeId, scale: S) -> Result<NodeId> {
        self.apply(Op::L2Norm { scale }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape { shape }, &[x])
    }

    /// Pick a single element by flat index.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.apply(Op::Select { index }, &[x])
    }

    pub fn clamp_abs(&mut self, x: NodeId, bound: S) -> Result<NodeId> {
        self.apply(Op::ClampAbs { bound }, &[x])
    }

    /// Fused mean cross-entropy over `batch x classes` logits.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: Labels<S>, classes: usize) -> Result<NodeId> {
        self.apply(Op::SoftmaxCe { labels, classes }, &[logits])
    }

    /// Fused angular-margin cross-entropy over `batch x classes` cosines.
    pub fn arc_margin_ce(
        &mut self,
        cosines: NodeId,
        labels: Vec<usize>,
        classes: usize,
        scale: S,
        margin: S,
    ) -> Result<NodeId> {
        self.apply(Op::ArcMarginCe { labels, classes, scale, margin }, &[cosines])
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last `backward` target w.r.t. this node, if it flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Overwrite a node's value in place (same shape). Downstream nodes keep
    /// stale values until `replay_from` recomputes them.
    pub fn set_value(&mut self, id: NodeId, data: Vec<S>) -> Result<()> {
        self.nodes[id.0].tensor.set_data(data)
    }

    /// Recompute every node recorded after `id`, in recording order.
    pub fn replay_from(&mut self, id: NodeId) -> Result<()> {
        for idx in id.0 + 1..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let tensors: Vec<&Tensor<S>> =
                node.inputs.iter().map(|i| &before[i.0].tensor).collect();
            let (shape, data) = eval(&mut node.op, &tensors)?;
            debug_assert_eq!(shape, node.tensor.shape());
            node.tensor.set_data(data)?;
        }
        Ok(())
    }

    /// Reverse pass from a scalar node. Populates `grad` on every node the
    /// gradient reaches; fan-out accumulates additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let numel = self.nodes[loss.0].tensor.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = grads[idx].take() else { continue };
            self.backprop_node(idx, &grad_out, &mut grads);
            grads[idx] = Some(grad_out);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.set_grad(g);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, grad_out: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let input = |i: usize| &self.nodes[node.inputs[i].0].tensor;
        let accum = |grads: &mut [Option<Vec<S>>], i: usize, contribution: &[S]| {
            let slot =
                grads[node.inputs[i].0].get_or_insert_with(|| vec![S::zero(); input(i).numel()]);
            for (g, &c) in slot.iter_mut().zip(contribution) {
                *g = *g + c;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.rank() == 2 { b.shape()[1] } else { 1 };
                let mut ga = vec![S::zero(); a.numel()];
                let mut gb = vec![S::zero(); b.numel()];
                ops::matmul_backward(grad_out, a.data(), b.data(), m, k, n, &mut ga, &mut gb);
                accum(grads, 0, &ga);
                accum(grads, 1, &gb);
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (input(0), input(1));
                let (ci, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (node.tensor.shape()[1], node.tensor.shape()[2]);
                let mut gx = vec![S::zero(); x.numel()];
                let mut gw = vec![S::zero(); w.numel()];
                ops::conv2d_backward(
                    grad_out, x.data(), w.data(), ci, h, ww, co, kh, kw, *stride, *pad, oh, ow,
                    &mut gx, &mut gw,
                );
                accum(grads, 0, &gx);
                accum(grads, 1, &gw);
            }
            Op::AvgPool2d { size, stride } => {
                let x = input(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (node.tensor.shape()[1], node.tensor.shape()[2]);
                let mut gx = vec![S::zero(); x.numel()];
                ops::avgpool2d_backward(grad_out, c, h, w, *size, *stride, oh, ow, &mut gx);
                accum(grads, 0, &gx);
            }
            Op::MaxPool2d { argmax, .. } => {
                let mut gx = vec![S::zero(); input(0).numel()];
                ops::maxpool2d_backward(grad_out, argmax, &mut gx);
                accum(grads, 0, &gx);
            }
            Op::AdaptiveAvgPool => {
                let x = input(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gx = vec![S::zero(); x.numel()];
                ops::adaptive_avgpool_backward(grad_out, c, h, w, &mut gx);
                accum(grads, 0, &gx);
            }
            Op::Relu => {
                let mut gx = vec![S::zero(); input(0).numel()];
                ops::relu_backward(grad_out, input(0).data(), &mut gx);
                accum(grads, 0, &gx);
            }
            Op::Concat { axis } => {
                let out_shape = node.tensor.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut axis_offset = 0usize;
                for i in 0..node.inputs.len() {
                    let a = input(i).shape()[*axis];
                    let mut gx = vec![S::zero(); input(i).numel()];
                    for o in 0..outer {
                        let src_start = (o * axis_total + axis_offset) * inner;
                        gx[o * a * inner..(o + 1) * a * inner]
                            .copy_from_slice(&grad_out[src_start..src_start + a * inner]);
                    }
                    accum(grads, i, &gx);
                    axis_offset += a;
                }
            }
            Op::Add => {
                accum(grads, 0, grad_out);
                accum(grads, 1, grad_out);
            }
            Op::Mul => {
                let ga: Vec<S> =
                    grad_out.iter().zip(input(1).data()).map(|(&g, &b)| g * b).collect();
                let gb: Vec<S> =
                    grad_out.iter().zip(input(0).data()).map(|(&g, &a)| g * a).collect();
                accum(grads, 0, &ga);
                accum(grads, 1, &gb);
            }
            Op::ScalarMul { factor } => {
                let f = *factor;
                let gx: Vec<S> = grad_out.iter().map(|&g| g * f).collect();
                accum(grads, 0, &gx);
            }
            Op::Log => {
                let gx: Vec<S> =
                    grad_out.iter().zip(input(0).data()).map(|(&g, &x)| g / x).collect();
                accum(grads, 0, &gx);
            }
            Op::Exp => {
                let gx: Vec<S> =
                    grad_out.iter().zip(node.tensor.data()).map(|(&g, &y)| g * y).collect();
                accum(grads, 0, &gx);
            }
            Op::Sum => {
                let g = grad_out[0];
                let gx = vec![g; input(0).numel()];
                accum(grads, 0, &gx);
            }
            Op::L2Norm { scale } => {
                let x = input(0);
                let dim = *x.shape().last().expect("rank >= 1");
                let rows = x.numel() / dim;
                let mut gx = vec![S::zero(); x.numel()];
                ops::l2norm_backward(grad_out, x.data(), rows, dim, *scale, &mut gx);
                accum(grads, 0, &gx);
            }
            Op::Reshape { .. } => {
                accum(grads, 0, grad_out);
            }
            Op::Select { index } => {
                let mut gx = vec![S::zero(); input(0).numel()];
                gx[*index] = grad_out[0];
                accum(grads, 0, &gx);
            }
            Op::ClampAbs { bound } => {
                let mut gx = vec![S::zero(); input(0).numel()];
                ops::clamp_abs_backward(grad_out, input(0).data(), *bound, &mut gx);
                accum(grads, 0, &gx);
            }
            Op::SoftmaxCe { labels, classes } => {
                let z = input(0);
                let batch = z.shape()[0];
                let mut gx = vec![S::zero(); z.numel()];
                ops::softmax_ce_backward(grad_out[0], z.data(), labels, batch, *classes, &mut gx);
                accum(grads, 0, &gx);
            }
            Op::ArcMarginCe { labels, classes, scale, margin } => {
                let c = input(0);
                let batch = c.shape()[0];
                let mut gx = vec![S::zero(); c.numel()];
                ops::arc_margin_ce_backward(
                    grad_out[0], c.data(), labels, batch, *classes, *scale, *margin, &mut gx,
                );
                accum(grads, 0, &gx);
            }
        }
    }
}
