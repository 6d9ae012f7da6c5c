//! Dynamic reverse-mode tape.
//!
//! Ops are recorded as they execute (define-by-run), so control flow in the
//! caller needs no special handling. Nodes are appended in execution order,
//! which is already a topological order; backward is a single reverse sweep.
//! Each op stores the handles of its inputs plus whatever the vector-Jacobian
//! product needs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{lane_dims, Tensor};

#[cfg(test)]
use super::DType;
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape. Copyable and cheap; using a `Var`
/// with a different tape than the one that issued it is an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

impl Var {
    fn i(self) -> usize {
        self.idx as usize
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div { a: Var, b: Var, eps: f64 },
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    BatchedMatmul(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    MaxAxis { a: Var, axis: usize, argmax: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose(Var),
    Relu(Var),
    Softmax { a: Var, axis: usize },
    L2NormAxis { a: Var, axis: usize },
    NormAll(Var),
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    SegmentSum { a: Var, seg: Arc<Vec<usize>> },
    ScaleRows { a: Var, s: Var },
    MulBcastLast { a: Var, b: Var },
    RepeatRows { a: Var },
    Reshape { a: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires: bool,
}

/// Recording context for one forward computation. Single-threaded by design;
/// independent tapes may live on independent threads.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::TapeMismatch { expected: self.id, got: v.tape });
        }
        Ok(())
    }

    fn ready(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { op, value, requires });
        self.grads.push(None);
        Var { tape: self.id, idx }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.i()].requires
    }

    /// Registers an input value. Only nodes created with `requires_grad` can
    /// receive gradients; everything else never allocates a grad buffer.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.clone(), requires_grad)
    }

    /// A leaf that never takes gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Value of a node. Panics if the handle belongs to a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        &self.nodes[v.i()].value
    }

    /// Gradient accumulated into a node by `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        self.grads[v.i()].as_ref()
    }

    /// Gradient of a node, or zeros when the node never received one (e.g. a
    /// parameter the loss does not depend on).
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let val = self.value(v);
                Tensor::zeros(val.shape().to_vec(), val.dtype())
            }
        }
    }

    // ---- recorded operations ------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>, op: fn(Var, Var) -> Op) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        self.check(b)?;
        let value = f(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(op(a, b), value, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add_t(y), Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.sub_t(y), Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.mul_t(y), Op::Mul)
    }

    /// Elementwise division. Refuses denominators with magnitude below 1e-12;
    /// use [`Tape::div_eps`] when a guard is intended.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        self.check(b)?;
        let min_abs = self.value(b).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min_abs < 1e-12 {
            return Err(Error::DivNearZero { min_abs });
        }
        let value = self.value(a).div_shifted(self.value(b), 0.0)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Div { a, b, eps: 0.0 }, value, req))
    }

    /// Division with denominators shifted by `eps > 0`. Intended for
    /// nonnegative denominators (norms, weight sums).
    pub fn div_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        self.check(b)?;
        if eps <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "div_eps",
                reason: format!("epsilon must be positive, got {eps}"),
            });
        }
        let min_abs = self
            .value(b)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min((v + eps).abs()));
        if min_abs < 1e-12 {
            return Err(Error::DivNearZero { min_abs });
        }
        let value = self.value(a).div_shifted(self.value(b), eps)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Div { a, b, eps }, value, req))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).shift(c);
        let req = self.requires(a);
        Ok(self.push(Op::AddScalar(a), value, req))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).scale(c);
        let req = self.requires(a);
        Ok(self.push(Op::MulScalar(a, c), value, req))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul_t(y), Op::Matmul)
    }

    /// Batched matmul `[B,M,K] x [B,K,N] -> [B,M,N]`; a 2-D operand on either
    /// side is shared across the batch.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.batched_matmul_t(y), Op::BatchedMatmul)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).sum_all_t();
        let req = self.requires(a);
        Ok(self.push(Op::SumAll(a), value, req))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).mean_all_t();
        let req = self.requires(a);
        Ok(self.push(Op::MeanAll(a), value, req))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).sum_axis_t(axis)?;
        let req = self.requires(a);
        Ok(self.push(Op::SumAxis { a, axis }, value, req))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).mean_axis_t(axis)?;
        let req = self.requires(a);
        Ok(self.push(Op::MeanAxis { a, axis }, value, req))
    }

    /// Max along an axis. Backward routes the gradient to the first maximal
    /// element of each lane.
    pub fn max_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let (value, argmax) = self.value(a).max_axis_t(axis)?;
        let req = self.requires(a);
        Ok(self.push(Op::MaxAxis { a, axis, argmax }, value, req))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.ready()?;
        for &p in parts {
            self.check(p)?;
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_t(&tensors, axis)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, value, req))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).slice_t(axis, start, len)?;
        let req = self.requires(a);
        Ok(self.push(Op::Slice { a, axis, start }, value, req))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).transpose_t()?;
        let req = self.requires(a);
        Ok(self.push(Op::Transpose(a), value, req))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).relu_t();
        let req = self.requires(a);
        Ok(self.push(Op::Relu(a), value, req))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).softmax_t(axis)?;
        let req = self.requires(a);
        Ok(self.push(Op::Softmax { a, axis }, value, req))
    }

    /// Euclidean norm along `axis` (axis removed from the shape).
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).l2_norm_axis_t(axis)?;
        let req = self.requires(a);
        Ok(self.push(Op::L2NormAxis { a, axis }, value, req))
    }

    /// Frobenius norm of the whole tensor, as a scalar node.
    pub fn norm_all(&mut self, a: Var) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).norm_all_t();
        let req = self.requires(a);
        Ok(self.push(Op::NormAll(a), value, req))
    }

    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<Vec<usize>>>) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let idx = idx.into();
        let value = self.value(a).gather_rows_t(&idx)?;
        let req = self.requires(a);
        Ok(self.push(Op::GatherRows { a, idx }, value, req))
    }

    pub fn segment_sum(&mut self, a: Var, seg: impl Into<Arc<Vec<usize>>>, n_out: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let seg = seg.into();
        let value = self.value(a).segment_sum_t(&seg, n_out)?;
        let req = self.requires(a);
        Ok(self.push(Op::SegmentSum { a, seg }, value, req))
    }

    /// Multiplies each leading-axis row of `a` by the matching entry of the
    /// 1-D tensor `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.binary(a, s, |x, y| x.scale_rows_t(y), |a, s| Op::ScaleRows { a, s })
    }

    /// Elementwise product with `b` broadcast along the last axis of `a`.
    pub fn mul_bcast_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.mul_bcast_last_t(y), |a, b| Op::MulBcastLast { a, b })
    }

    /// Repeats a `[1, ...]` tensor `n` times along axis 0 (the explicit
    /// broadcast op; no implicit broadcasting exists elsewhere).
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).repeat_rows_t(n)?;
        let req = self.requires(a);
        Ok(self.push(Op::RepeatRows { a }, value, req))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.ready()?;
        self.check(a)?;
        let value = self.value(a).reshape_t(shape)?;
        let req = self.requires(a);
        Ok(self.push(Op::Reshape { a }, value, req))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape: no further ops or
    /// backward calls are accepted afterwards, while recorded values and leaf
    /// gradients stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.ready()?;
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.consumed = true;
        if self.nodes[loss.i()].requires {
            let dtype = self.value(loss).dtype();
            let seed_shape = self.value(loss).shape().to_vec();
            self.grads[loss.i()] = Some(Tensor::full(seed_shape, 1.0, dtype));
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) -> Result<()> {
        if !self.nodes[v.i()].requires {
            return Ok(());
        }
        let slot = &mut self.grads[v.i()];
        *slot = Some(match slot.take() {
            Some(g) => g.add_t(&delta)?,
            None => delta,
        });
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Values are read through raw pointers-free helper closures; the op is
        // matched by value to keep the borrow checker out of the way.
        macro_rules! val {
            ($v:expr) => {
                &self.nodes[$v.i()].value
            };
        }
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone())?;
                self.accumulate(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone())?;
                self.accumulate(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.nodes[a.i()].requires {
                    let da = g.mul_t(val!(b))?;
                    self.accumulate(*a, da)?;
                }
                if self.nodes[b.i()].requires {
                    let db = g.mul_t(val!(a))?;
                    self.accumulate(*b, db)?;
                }
            }
            Op::Div { a, b, eps } => {
                if self.nodes[a.i()].requires {
                    let da = g.div_shifted(val!(b), *eps)?;
                    self.accumulate(*a, da)?;
                }
                if self.nodes[b.i()].requires {
                    let out = self.nodes[i].value.clone();
                    let db = g.mul_t(&out)?.div_shifted(val!(b), *eps)?.scale(-1.0);
                    self.accumulate(*b, db)?;
                }
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, g.clone())?;
            }
            Op::MulScalar(a, c) => {
                self.accumulate(*a, g.scale(*c))?;
            }
            Op::Matmul(a, b) => {
                if self.nodes[a.i()].requires {
                    let da = g.matmul_t(&val!(b).transpose_t()?)?;
                    self.accumulate(*a, da)?;
                }
                if self.nodes[b.i()].requires {
                    let db = val!(a).transpose_t()?.matmul_t(g)?;
                    self.accumulate(*b, db)?;
                }
            }
            Op::BatchedMatmul(a, b) => {
                if self.nodes[a.i()].requires {
                    let bt = val!(b).transpose_t()?;
                    let mut da = g.batched_matmul_t(&bt)?;
                    if val!(a).shape().len() == 2 {
                        let collapsed = da.sum_axis_t(0)?;
                        da = collapsed;
                    }
                    self.accumulate(*a, da)?;
                }
                if self.nodes[b.i()].requires {
                    let at = val!(a).transpose_t()?;
                    let mut db = at.batched_matmul_t(g)?;
                    if val!(b).shape().len() == 2 {
                        let collapsed = db.sum_axis_t(0)?;
                        db = collapsed;
                    }
                    self.accumulate(*b, db)?;
                }
            }
            Op::SumAll(a) => {
                let shape = val!(a).shape().to_vec();
                let d = Tensor::full(shape, g.item()?, g.dtype());
                self.accumulate(*a, d)?;
            }
            Op::MeanAll(a) => {
                let shape = val!(a).shape().to_vec();
                let n = val!(a).numel().max(1) as f64;
                let d = Tensor::full(shape, g.item()? / n, g.dtype());
                self.accumulate(*a, d)?;
            }
            Op::SumAxis { a, axis } => {
                let d = broadcast_axis(g, val!(a).shape(), *axis, 1.0);
                self.accumulate(*a, d)?;
            }
            Op::MeanAxis { a, axis } => {
                let lane = val!(a).shape()[*axis].max(1) as f64;
                let d = broadcast_axis(g, val!(a).shape(), *axis, 1.0 / lane);
                self.accumulate(*a, d)?;
            }
            Op::MaxAxis { a, axis, argmax } => {
                let shape = val!(a).shape().to_vec();
                let (outer, lane, inner) = lane_dims(&shape, *axis);
                let mut d = vec![0.0; outer * lane * inner];
                for o in 0..outer {
                    for inn in 0..inner {
                        let slot = o * inner + inn;
                        d[(o * lane + argmax[slot]) * inner + inn] = g.data()[slot];
                    }
                }
                self.accumulate(*a, Tensor::from_vec(shape, d, g.dtype())?)?;
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let extent = val!(p).shape()[*axis];
                    let d = g.slice_t(*axis, offset, extent)?;
                    offset += extent;
                    self.accumulate(p, d)?;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = val!(a).shape().to_vec();
                let (outer, lane, inner) = lane_dims(&shape, *axis);
                let slice_lane = g.shape()[*axis];
                let mut d = vec![0.0; outer * lane * inner];
                for o in 0..outer {
                    let src = o * slice_lane * inner;
                    let dst = (o * lane + start) * inner;
                    d[dst..dst + slice_lane * inner].copy_from_slice(&g.data()[src..src + slice_lane * inner]);
                }
                self.accumulate(*a, Tensor::from_vec(shape, d, g.dtype())?)?;
            }
            Op::Transpose(a) => {
                self.accumulate(*a, g.transpose_t()?)?;
            }
            Op::Relu(a) => {
                let d = g.zip(val!(a), "relu_vjp", |gv, av| if av > 0.0 { gv } else { 0.0 })?;
                self.accumulate(*a, d)?;
            }
            Op::Softmax { a, axis } => {
                let s = self.nodes[i].value.clone();
                let gs = g.mul_t(&s)?;
                let dot = gs.sum_axis_t(*axis)?;
                let dot_b = broadcast_axis(&dot, s.shape(), *axis, 1.0);
                let d = s.mul_t(&g.sub_t(&dot_b)?)?;
                self.accumulate(*a, d)?;
            }
            Op::L2NormAxis { a, axis } => {
                let x = val!(a);
                let n = &self.nodes[i].value;
                let guarded = n.map(|v| v.max(1e-12));
                let scale = g.zip(&guarded, "l2norm_vjp", |gv, nv| gv / nv)?;
                let scale_b = broadcast_axis(&scale, x.shape(), *axis, 1.0);
                let d = scale_b.mul_t(x)?;
                self.accumulate(*a, d)?;
            }
            Op::NormAll(a) => {
                let n = self.nodes[i].value.item()?.max(1e-12);
                let d = val!(a).scale(g.item()? / n);
                self.accumulate(*a, d)?;
            }
            Op::GatherRows { a, idx } => {
                let shape = val!(a).shape().to_vec();
                let stride: usize = shape[1..].iter().product();
                let mut d = vec![0.0; val!(a).numel()];
                for (e, &r) in idx.iter().enumerate() {
                    for s in 0..stride {
                        d[r * stride + s] += g.data()[e * stride + s];
                    }
                }
                self.accumulate(*a, Tensor::from_vec(shape, d, g.dtype())?)?;
            }
            Op::SegmentSum { a, seg } => {
                let d = g.gather_rows_t(seg)?;
                self.accumulate(*a, d)?;
            }
            Op::ScaleRows { a, s } => {
                if self.nodes[a.i()].requires {
                    let da = g.scale_rows_t(val!(s))?;
                    self.accumulate(*a, da)?;
                }
                if self.nodes[s.i()].requires {
                    let prod = g.mul_t(val!(a))?;
                    let rows = val!(a).shape()[0];
                    let stride: usize = val!(a).shape()[1..].iter().product();
                    let flat = prod.reshape_t(vec![rows, stride])?;
                    let ds = flat.sum_axis_t(1)?;
                    self.accumulate(*s, ds)?;
                }
            }
            Op::MulBcastLast { a, b } => {
                if self.nodes[a.i()].requires {
                    let da = g.mul_bcast_last_t(val!(b))?;
                    self.accumulate(*a, da)?;
                }
                if self.nodes[b.i()].requires {
                    let prod = g.mul_t(val!(a))?;
                    let last_axis = val!(a).shape().len() - 1;
                    let db = prod.sum_axis_t(last_axis)?;
                    self.accumulate(*b, db)?;
                }
            }
            Op::RepeatRows { a } => {
                let summed = g.sum_axis_t(0)?;
                let mut shape = vec![1];
                shape.extend_from_slice(summed.shape());
                let d = summed.reshape_t(shape)?;
                self.accumulate(*a, d)?;
            }
            Op::Reshape { a } => {
                let d = g.reshape_t(val!(a).shape().to_vec())?;
                self.accumulate(*a, d)?;
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Expands a reduced tensor back to `shape` by repeating (and optionally
/// scaling) along `axis`.
fn broadcast_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, lane, inner) = lane_dims(shape, axis);
    let mut out = vec![0.0; outer * lane * inner];
    for o in 0..outer {
        for l in 0..lane {
            for i in 0..inner {
                out[(o * lane + l) * inner + i] = g.data()[o * inner + i] * scale;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out, g.dtype()).expect("broadcast shape")
}
