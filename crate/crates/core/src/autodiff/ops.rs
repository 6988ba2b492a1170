//! Op kinds: shape rules, forward kernels and symbolic vector-Jacobian products.
//!
//! Every vjp is written in terms of other ops from this closed set, which is
//! what makes gradients differentiable to arbitrary order.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a / b`, defined as 0 wherever `b == 0`.
    SafeDiv(NodeId, NodeId),
    Neg(NodeId),
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    /// Adds a per-channel vector along axis 1.
    BiasAdd {
        x: NodeId,
        bias: NodeId,
    },
    ChannelSum(NodeId),
    ChannelBroadcast(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Conv2dInputGrad {
        g: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Conv2dWeightGrad {
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
    },
    Sigmoid(NodeId),
    Swish(NodeId),
    Exp(NodeId),
    LogSumExp(NodeId),
    SumLast(NodeId),
    BroadcastLast(NodeId),
    /// Euclidean norm over the last axis, with zero subgradient at the origin.
    NormLast(NodeId),
    Sum(NodeId),
    Fill(NodeId),
    Reshape(NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
    },
    PadLast {
        x: NodeId,
        start: usize,
    },
}

pub(crate) struct Inputs {
    items: [Option<NodeId>; 2],
    pos: usize,
}

impl Iterator for Inputs {
    type Item = NodeId;
    fn next(&mut self) -> Option<NodeId> {
        while self.pos < 2 {
            let item = self.items[self.pos];
            self.pos += 1;
            if item.is_some() {
                return item;
            }
        }
        None
    }
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::SafeDiv(..) => "safe_div",
            Op::Neg(..) => "neg",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::BiasAdd { .. } => "bias_add",
            Op::ChannelSum(..) => "channel_sum",
            Op::ChannelBroadcast(..) => "channel_broadcast",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Sigmoid(..) => "sigmoid",
            Op::Swish(..) => "swish",
            Op::Exp(..) => "exp",
            Op::LogSumExp(..) => "logsumexp",
            Op::SumLast(..) => "sum_last",
            Op::BroadcastLast(..) => "broadcast_last",
            Op::NormLast(..) => "norm_last",
            Op::Sum(..) => "sum",
            Op::Fill(..) => "fill",
            Op::Reshape(..) => "reshape",
            Op::SliceLast { .. } => "slice",
            Op::PadLast { .. } => "pad",
        }
    }

    pub(crate) fn inputs(&self) -> Inputs {
        let items = match *self {
            Op::Leaf | Op::Constant => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SafeDiv(a, b) => [Some(a), Some(b)],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::BiasAdd { x, bias } => [Some(x), Some(bias)],
            Op::Conv2d { x, w, .. } => [Some(x), Some(w)],
            Op::Conv2dInputGrad { g, w, .. } => [Some(g), Some(w)],
            Op::Conv2dWeightGrad { x, g, .. } => [Some(x), Some(g)],
            Op::Neg(x)
            | Op::Affine { x, .. }
            | Op::ChannelSum(x)
            | Op::ChannelBroadcast(x)
            | Op::Sigmoid(x)
            | Op::Swish(x)
            | Op::Exp(x)
            | Op::LogSumExp(x)
            | Op::SumLast(x)
            | Op::BroadcastLast(x)
            | Op::NormLast(x)
            | Op::Sum(x)
            | Op::Fill(x)
            | Op::Reshape(x)
            | Op::SliceLast { x, .. }
            | Op::PadLast { x, .. } => [Some(x), None],
        };
        Inputs { items, pos: 0 }
    }
}

fn last_dim(shape: &[usize]) -> Option<usize> {
    shape.last().copied()
}

impl Graph {
    fn pending(&self, kind: &str) -> String {
        format!("{kind} (node #{})", self.len())
    }

    fn same_shape(&self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.pending(kind),
                format!(
                    "operands {} {:?} and {} {:?} differ",
                    self.describe(a),
                    self.shape(a),
                    self.describe(b),
                    self.shape(b)
                ),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn safe_div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("safe_div", a, b)?;
        Ok(self.push(Op::SafeDiv(a, b), s))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Neg(x), s))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Affine { x, scale, shift }, s))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.affine(x, c, 0.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` with optional transposition of each 2-D operand.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(
                self.pending("matmul"),
                format!("operands must be 2-D, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(
                self.pending("matmul"),
                format!(
                    "inner dimensions differ: {} {sa:?}{} vs {} {sb:?}{}",
                    self.describe(a),
                    if ta { "ᵀ" } else { "" },
                    self.describe(b),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n]))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape(
                self.pending("bias_add"),
                format!("bias {sb:?} does not match channel axis of {sx:?}"),
            ));
        }
        let s = sx.to_vec();
        Ok(self.push(Op::BiasAdd { x, bias }, s))
    }

    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::shape(
                self.pending("channel_sum"),
                format!("need at least 2 axes, got {sx:?}"),
            ));
        }
        let c = sx[1];
        Ok(self.push(Op::ChannelSum(x), vec![c]))
    }

    pub fn channel_broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 1 || shape.len() < 2 || shape[1] != sx[0] {
            return Err(Error::shape(
                self.pending("channel_broadcast"),
                format!("cannot broadcast {sx:?} over channel axis of {shape:?}"),
            ));
        }
        Ok(self.push(Op::ChannelBroadcast(x), shape.to_vec()))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad).ok_or_else(|| {
            Error::shape(
                self.pending("conv2d"),
                format!(
                    "input {:?} incompatible with filter {:?} (stride {stride}, pad {pad})",
                    self.shape(x),
                    self.shape(w)
                ),
            )
        })?;
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, geo.out_shape()))
    }

    pub fn conv2d_input_grad(
        &mut self,
        g: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        x_shape: &[usize],
    ) -> Result<NodeId> {
        match ConvGeometry::new(x_shape, self.shape(w), stride, pad) {
            Some(geo) if geo.out_shape() == self.shape(g) => {}
            _ => {
                return Err(Error::shape(
                    self.pending("conv2d_input_grad"),
                    format!(
                        "cotangent {:?} is not the output of input {x_shape:?} with filter {:?}",
                        self.shape(g),
                        self.shape(w)
                    ),
                ))
            }
        }
        Ok(self.push(Op::Conv2dInputGrad { g, w, stride, pad }, x_shape.to_vec()))
    }

    pub fn conv2d_weight_grad(
        &mut self,
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        w_shape: &[usize],
    ) -> Result<NodeId> {
        match ConvGeometry::new(self.shape(x), w_shape, stride, pad) {
            Some(geo) if geo.out_shape() == self.shape(g) => {}
            _ => {
                return Err(Error::shape(
                    self.pending("conv2d_weight_grad"),
                    format!(
                        "cotangent {:?} is not the output of input {:?} with filter {w_shape:?}",
                        self.shape(g),
                        self.shape(x)
                    ),
                ))
            }
        }
        Ok(self.push(Op::Conv2dWeightGrad { x, g, stride, pad }, w_shape.to_vec()))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Sigmoid(x), s))
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Swish(x), s))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Exp(x), s))
    }

    fn drop_last(&self, kind: &str, x: NodeId) -> Result<Vec<usize>> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape(self.pending(kind), "operand is a scalar"));
        }
        Ok(s[..s.len() - 1].to_vec())
    }

    /// Log-sum-exp over the last axis.
    pub fn logsumexp_last(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.drop_last("logsumexp", x)?;
        Ok(self.push(Op::LogSumExp(x), s))
    }

    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.drop_last("sum_last", x)?;
        Ok(self.push(Op::SumLast(x), s))
    }

    pub fn norm_last(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.drop_last("norm_last", x)?;
        Ok(self.push(Op::NormLast(x), s))
    }

    pub fn broadcast_last(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let mut s = self.shape(x).to_vec();
        s.push(n);
        Ok(self.push(Op::BroadcastLast(x), s))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum(x), Vec::new()))
    }

    /// Tensor of `shape` filled with scalar `x`.
    pub fn fill(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.shape(x).is_empty() {
            return Err(Error::shape(
                self.pending("fill"),
                format!("fill value must be scalar, got {:?}", self.shape(x)),
            ));
        }
        Ok(self.push(Op::Fill(x), shape.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.numel(x) != shape.iter().product::<usize>() {
            return Err(Error::shape(
                self.pending("reshape"),
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x);
        match last_dim(s) {
            Some(n) if start < end && end <= n => {}
            _ => {
                return Err(Error::shape(
                    self.pending("slice"),
                    format!("range {start}..{end} out of bounds for {s:?}"),
                ))
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = end - start;
        Ok(self.push(Op::SliceLast { x, start }, shape))
    }

    /// Zero-pads the last axis to `total`, placing `x` at offset `start`.
    pub fn pad_last(&mut self, x: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(x);
        match last_dim(s) {
            Some(n) if start + n <= total => {}
            _ => {
                return Err(Error::shape(
                    self.pending("pad"),
                    format!("cannot place {s:?} at {start} within width {total}"),
                ))
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = total;
        Ok(self.push(Op::PadLast { x, start }, shape))
    }

    /// `Σ a∘b` as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        self.val(x).map(f)
    }

    fn binary(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.val(a).zip_map(self.val(b), f).expect("validated at build")
    }

    pub(super) fn compute(&self, id: NodeId) -> Tensor {
        let shape = self.shape(id).to_vec();
        match *self.op(id) {
            Op::Leaf | Op::Constant => unreachable!("leaves are bound, not computed"),
            Op::Add(a, b) => self.binary(a, b, |x, y| x + y),
            Op::Sub(a, b) => self.binary(a, b, |x, y| x - y),
            Op::Mul(a, b) => self.binary(a, b, |x, y| x * y),
            Op::SafeDiv(a, b) => self.binary(a, b, |x, y| if y == 0.0 { 0.0 } else { x / y }),
            Op::Neg(x) => self.unary(x, |v| -v),
            Op::Affine { x, scale, shift } => self.unary(x, |v| scale * v + shift),
            Op::MatMul { a, b, ta, tb } => kernels::matmul(self.val(a), self.val(b), ta, tb),
            Op::BiasAdd { x, bias } => kernels::bias_add(self.val(x), self.val(bias)),
            Op::ChannelSum(x) => kernels::channel_sum(self.val(x)),
            Op::ChannelBroadcast(x) => kernels::channel_broadcast(self.val(x), &shape),
            Op::Conv2d { x, w, stride, pad } => {
                let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad).unwrap();
                kernels::conv2d(self.val(x), self.val(w), &geo)
            }
            Op::Conv2dInputGrad { g, w, stride, pad } => {
                let geo = ConvGeometry::new(&shape, self.shape(w), stride, pad).unwrap();
                kernels::conv2d_input_grad(self.val(g), self.val(w), &geo)
            }
            Op::Conv2dWeightGrad { x, g, stride, pad } => {
                let geo = ConvGeometry::new(self.shape(x), &shape, stride, pad).unwrap();
                kernels::conv2d_weight_grad(self.val(x), self.val(g), &geo)
            }
            Op::Sigmoid(x) => self.unary(x, kernels::sigmoid),
            Op::Swish(x) => self.unary(x, kernels::swish),
            Op::Exp(x) => self.unary(x, f64::exp),
            Op::LogSumExp(x) => kernels::reduce_last(self.val(x), kernels::logsumexp),
            Op::SumLast(x) => kernels::reduce_last(self.val(x), |r| r.iter().sum()),
            Op::NormLast(x) => kernels::reduce_last(self.val(x), |r| r.iter().map(|v| v * v).sum::<f64>().sqrt()),
            Op::BroadcastLast(x) => kernels::broadcast_last(self.val(x), *shape.last().unwrap()),
            Op::Sum(x) => Tensor::scalar(self.val(x).sum()),
            Op::Fill(x) => Tensor::full(&shape, self.val(x).item()),
            Op::Reshape(x) => self.val(x).clone().reshape(&shape).expect("validated"),
            Op::SliceLast { x, start } => kernels::slice_last(self.val(x), start, start + *shape.last().unwrap()),
            Op::PadLast { x, start } => kernels::pad_last(self.val(x), start, *shape.last().unwrap()),
        }
    }

    /// Cotangent contributions of node `id` to its inputs, given cotangent `g`.
    /// `need[i]` is false for inputs that do not lead to a differentiated leaf.
    pub(super) fn vjp(&mut self, id: NodeId, g: NodeId, need: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        let op = self.op(id).clone();
        let out: Vec<Option<NodeId>> = match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(_, _) => vec![Some(g), Some(g)],
            Op::Sub(_, _) => {
                let nb = if want(1) { Some(self.neg(g)?) } else { None };
                vec![Some(g), nb]
            }
            Op::Mul(a, b) => {
                let da = if want(0) { Some(self.mul(g, b)?) } else { None };
                let db = if want(1) { Some(self.mul(g, a)?) } else { None };
                vec![da, db]
            }
            Op::SafeDiv(_, b) => {
                let da = if want(0) { Some(self.safe_div(g, b)?) } else { None };
                let db = if want(1) {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, id)?;
                    let t = self.safe_div(t, b)?;
                    Some(self.neg(t)?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Neg(_) => vec![Some(self.neg(g)?)],
            Op::Affine { scale, .. } => vec![Some(self.affine(g, scale, 0.0)?)],
            Op::MatMul { a, b, ta, tb } => {
                let da = if !want(0) {
                    None
                } else if ta {
                    Some(self.matmul_t(b, g, tb, true)?)
                } else {
                    Some(self.matmul_t(g, b, false, !tb)?)
                };
                let db = if !want(1) {
                    None
                } else if tb {
                    Some(self.matmul_t(g, a, true, ta)?)
                } else {
                    Some(self.matmul_t(a, g, !ta, false)?)
                };
                vec![da, db]
            }
            Op::BiasAdd { .. } => {
                let db = if want(1) { Some(self.channel_sum(g)?) } else { None };
                vec![Some(g), db]
            }
            Op::ChannelSum(x) => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.channel_broadcast(g, &shape)?)]
            }
            Op::ChannelBroadcast(_) => vec![Some(self.channel_sum(g)?)],
            Op::Conv2d { x, w, stride, pad } => {
                let dx = if want(0) {
                    let xs = self.shape(x).to_vec();
                    Some(self.conv2d_input_grad(g, w, stride, pad, &xs)?)
                } else {
                    None
                };
                let dw = if want(1) {
                    let ws = self.shape(w).to_vec();
                    Some(self.conv2d_weight_grad(x, g, stride, pad, &ws)?)
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::Conv2dInputGrad { g: g0, w, stride, pad } => {
                // output = Cᵀ_w g0; <Cᵀ_w g0, u> = <g0, C_w u>
                let dg = if want(0) {
                    Some(self.conv2d(g, w, stride, pad)?)
                } else {
                    None
                };
                let dw = if want(1) {
                    let ws = self.shape(w).to_vec();
                    Some(self.conv2d_weight_grad(g, g0, stride, pad, &ws)?)
                } else {
                    None
                };
                vec![dg, dw]
            }
            Op::Conv2dWeightGrad { x, g: g0, stride, pad } => {
                // <W(x, g0), U> = <g0, C(x, U)>
                let dx = if want(0) {
                    let xs = self.shape(x).to_vec();
                    Some(self.conv2d_input_grad(g0, g, stride, pad, &xs)?)
                } else {
                    None
                };
                let dg = if want(1) {
                    Some(self.conv2d(x, g, stride, pad)?)
                } else {
                    None
                };
                vec![dx, dg]
            }
            Op::Sigmoid(_) => {
                let one_minus = self.affine(id, -1.0, 1.0)?;
                let d = self.mul(id, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Swish(x) => {
                // swish'(x) = σ(x) + swish(x)·(1 − σ(x))
                let s = self.sigmoid(x)?;
                let one_minus = self.affine(s, -1.0, 1.0)?;
                let t = self.mul(id, one_minus)?;
                let d = self.add(s, t)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Exp(_) => vec![Some(self.mul(g, id)?)],
            Op::LogSumExp(x) => {
                let n = *self.shape(x).last().unwrap();
                let lse = self.broadcast_last(id, n)?;
                let shifted = self.sub(x, lse)?;
                let softmax = self.exp(shifted)?;
                let gb = self.broadcast_last(g, n)?;
                vec![Some(self.mul(gb, softmax)?)]
            }
            Op::SumLast(x) => {
                let n = *self.shape(x).last().unwrap();
                vec![Some(self.broadcast_last(g, n)?)]
            }
            Op::BroadcastLast(_) => vec![Some(self.sum_last(g)?)],
            Op::NormLast(x) => {
                let n = *self.shape(x).last().unwrap();
                let scaled = self.safe_div(g, id)?;
                let b = self.broadcast_last(scaled, n)?;
                vec![Some(self.mul(b, x)?)]
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.fill(g, &shape)?)]
            }
            Op::Fill(_) => vec![Some(self.sum(g)?)],
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Op::SliceLast { x, start } => {
                let total = *self.shape(x).last().unwrap();
                vec![Some(self.pad_last(g, start, total)?)]
            }
            Op::PadLast { x, start } => {
                let width = *self.shape(x).last().unwrap();
                vec![Some(self.slice_last(g, start, start + width)?)]
            }
        };
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(i, c)| if want(i) { c } else { None })
            .collect())
    }
}
