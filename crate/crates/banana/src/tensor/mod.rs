//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: shape, dtype, and a flat buffer. Gradient
//! tracking lives entirely in [`Tape`]: operations recorded through a tape
//! return lightweight [`Var`] handles, and [`Tape::backward`] fills per-node
//! gradients by walking the recording in reverse. Tensors outside a tape are
//! immutable values and can be shared freely between threads; a tape is a
//! single-threaded context.

mod checkpoint;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use tape::{Tape, Var};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Element precision. Storage and arithmetic run in f64; `F32` rounds every
/// constructed or computed value through f32, so results match a true
/// single-precision pipeline value-for-value and serialize to 4-byte records.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

/// Dense row-major tensor. Scalars use an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` at `axis` into (outer, lane, inner) extents for strided
/// reduction loops.
pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::InvalidArgument {
                op: "Tensor::from_vec",
                reason: format!("shape {:?} needs {} elements, got {}", shape, numel_of(&shape), data.len()),
            });
        }
        let mut data = data;
        if dtype == DType::F32 {
            round_f32(&mut data);
        }
        Ok(Self { shape, data, dtype })
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = numel_of(&shape);
        Self { shape, data: vec![0.0; n], dtype }
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: DType) -> Self {
        let n = numel_of(&shape);
        let mut t = Self { shape, data: vec![value; n], dtype };
        if dtype == DType::F32 {
            round_f32(&mut t.data);
        }
        t
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(vec![], value, dtype)
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>], dtype: DType) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument {
                    op: "Tensor::from_rows",
                    reason: format!("ragged rows: {} vs {}", row.len(), c),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(vec![r, c], data, dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar extraction; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument {
                op: "Tensor::item",
                reason: format!("expected one element, shape is {:?}", self.shape),
            })
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit-level equality, distinguishing -0.0 from 0.0 and comparing
    /// NaN payloads. Used by determinism and round-trip tests.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn finish(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Tensor {
        if dtype == DType::F32 {
            round_f32(&mut data);
        }
        Tensor { shape, data, dtype }
    }

    fn binary_dtype(&self, other: &Tensor, op: &'static str) -> Result<DType> {
        if self.dtype != other.dtype {
            return Err(Error::DTypeMismatch { op, lhs: self.dtype, rhs: other.dtype });
        }
        Ok(self.dtype)
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    // ---- value-space kernels -------------------------------------------------
    //
    // These implement the actual numerics. The tape records which kernel
    // produced a node and replays the matching VJP in backward; both forward
    // and backward go through this single set of loops.

    pub(crate) fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let dtype = self.binary_dtype(other, op)?;
        self.require_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Tensor::finish(self.shape.clone(), data, dtype))
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|v| f(*v)).collect();
        Tensor::finish(self.shape.clone(), data, self.dtype)
    }

    pub fn add_t(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub_t(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Elementwise division with denominators shifted by `eps`. `eps = 0`
    /// is the unguarded form; callers must check magnitudes beforehand.
    pub(crate) fn div_shifted(&self, other: &Tensor, eps: f64) -> Result<Tensor> {
        self.zip(other, "div", |a, b| a / (b + eps))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn shift(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// 2-D matrix product.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let dtype = self.binary_dtype(other, "matmul")?;
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::finish(vec![m, n], out, dtype))
    }

    /// Batched matrix product on 3-D tensors `[B, M, K] x [B, K, N]`.
    /// Either side may be 2-D, in which case it is shared across the batch.
    pub fn batched_matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let dtype = self.binary_dtype(other, "batched_matmul")?;
        let err = || Error::ShapeMismatch {
            op: "batched_matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (b, m, k, n) = match (self.shape.len(), other.shape.len()) {
            (3, 3) => {
                if self.shape[0] != other.shape[0] || self.shape[2] != other.shape[1] {
                    return Err(err());
                }
                (self.shape[0], self.shape[1], self.shape[2], other.shape[2])
            }
            (2, 3) => {
                if self.shape[1] != other.shape[1] {
                    return Err(err());
                }
                (other.shape[0], self.shape[0], self.shape[1], other.shape[2])
            }
            (3, 2) => {
                if self.shape[2] != other.shape[0] {
                    return Err(err());
                }
                (self.shape[0], self.shape[1], self.shape[2], other.shape[1])
            }
            _ => return Err(err()),
        };
        let mut out = vec![0.0; b * m * n];
        let lstride = if self.shape.len() == 3 { m * k } else { 0 };
        let rstride = if other.shape.len() == 3 { k * n } else { 0 };
        for i in 0..b {
            matmul_raw(
                &self.data[i * lstride..i * lstride + m * k],
                &other.data[i * rstride..i * rstride + k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(Tensor::finish(vec![b, m, n], out, dtype))
    }

    pub fn sum_all_t(&self) -> Tensor {
        Tensor::finish(vec![], vec![self.data.iter().sum()], self.dtype)
    }

    pub fn mean_all_t(&self) -> Tensor {
        let n = self.data.len().max(1) as f64;
        Tensor::finish(vec![], vec![self.data.iter().sum::<f64>() / n], self.dtype)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidArgument {
                op,
                reason: format!("axis {} out of range for shape {:?}", axis, self.shape),
            });
        }
        Ok(())
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut s = self.shape.clone();
        s.remove(axis);
        s
    }

    pub fn sum_axis_t(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, lane, inner) = lane_dims(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        Ok(Tensor::finish(self.reduced_shape(axis), out, self.dtype))
    }

    pub fn mean_axis_t(&self, axis: usize) -> Result<Tensor> {
        let lane = self.shape.get(axis).copied().unwrap_or(0).max(1) as f64;
        Ok(self.sum_axis_t(axis)?.scale(1.0 / lane))
    }

    /// Max along an axis. Returns the reduced tensor and, per output slot, the
    /// lane index of the first maximal element (the tie-break rule backward
    /// relies on).
    pub fn max_axis_t(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        self.check_axis(axis, "max_reduce")?;
        if self.shape[axis] == 0 {
            return Err(Error::InvalidArgument {
                op: "max_reduce",
                reason: "cannot reduce over an empty axis".into(),
            });
        }
        let (outer, lane, inner) = lane_dims(&self.shape, axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        Ok((Tensor::finish(self.reduced_shape(axis), out, self.dtype), arg))
    }

    pub fn concat_t(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "concat",
            reason: "empty input list".into(),
        })?;
        first.check_axis(axis, "concat")?;
        let dtype = first.dtype;
        let mut cat = first.shape.clone();
        for p in &parts[1..] {
            if p.dtype != dtype {
                return Err(Error::DTypeMismatch { op: "concat", lhs: dtype, rhs: p.dtype });
            }
            if p.shape.len() != first.shape.len()
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first.shape[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            cat[axis] += p.shape[axis];
        }
        let (outer, _, inner) = lane_dims(&first.shape, axis);
        let lane_total = cat[axis];
        let mut out = vec![0.0; outer * lane_total * inner];
        let mut offset = 0;
        for p in parts {
            let lane = p.shape[axis];
            for o in 0..outer {
                let src = o * lane * inner;
                let dst = (o * lane_total + offset) * inner;
                out[dst..dst + lane * inner].copy_from_slice(&p.data[src..src + lane * inner]);
            }
            offset += lane;
        }
        Ok(Tensor::finish(cat, out, dtype))
    }

    pub fn slice_t(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis, "slice")?;
        if start + len > self.shape[axis] {
            return Err(Error::InvalidArgument {
                op: "slice",
                reason: format!(
                    "range {}..{} out of bounds for axis {} of extent {}",
                    start,
                    start + len,
                    axis,
                    self.shape[axis]
                ),
            });
        }
        let (outer, lane, inner) = lane_dims(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * lane + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Ok(Tensor::finish(shape, out, self.dtype))
    }

    /// Swaps the last two axes (full transpose for 2-D input).
    pub fn transpose_t(&self) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                reason: format!("need at least 2 axes, got shape {:?}", self.shape),
            });
        }
        let nd = self.shape.len();
        let (r, c) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch: usize = self.shape[..nd - 2].iter().product();
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = self.data[base + i * c + j];
                }
            }
        }
        Ok(Tensor::finish(shape, out, self.dtype))
    }

    pub fn relu_t(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_t(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let (outer, lane, inner) = lane_dims(&self.shape, axis);
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(self.data[idx(l)]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    let e = (self.data[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..lane {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(Tensor::finish(self.shape.clone(), out, self.dtype))
    }

    /// Euclidean norm along `axis`; the reduced axis is removed.
    pub fn l2_norm_axis_t(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "l2_norm")?;
        let (outer, lane, inner) = lane_dims(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i] * self.data[base + i];
                }
            }
        }
        for v in &mut out {
            *v = v.sqrt();
        }
        Ok(Tensor::finish(self.reduced_shape(axis), out, self.dtype))
    }

    /// Frobenius norm of the whole tensor as a scalar.
    pub fn norm_all_t(&self) -> Tensor {
        let s: f64 = self.data.iter().map(|v| v * v).sum();
        Tensor::finish(vec![], vec![s.sqrt()], self.dtype)
    }

    /// Gathers rows (leading-axis slices) by index; indices may repeat.
    pub fn gather_rows_t(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                reason: "scalar input has no rows".into(),
            });
        }
        let rows = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut out = vec![0.0; idx.len() * stride];
        for (e, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("index {} out of range for {} rows", r, rows),
                });
            }
            out[e * stride..(e + 1) * stride].copy_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor::finish(shape, out, self.dtype))
    }

    /// Sums rows into `n_out` output rows according to `seg` (one target id
    /// per input row). Accumulation order follows input order, so results are
    /// deterministic.
    pub fn segment_sum_t(&self, seg: &[usize], n_out: usize) -> Result<Tensor> {
        if self.shape.is_empty() || seg.len() != self.shape[0] {
            return Err(Error::InvalidArgument {
                op: "segment_sum",
                reason: format!(
                    "segment list of length {} does not match leading extent of {:?}",
                    seg.len(),
                    self.shape
                ),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut out = vec![0.0; n_out * stride];
        for (e, &s) in seg.iter().enumerate() {
            if s >= n_out {
                return Err(Error::InvalidArgument {
                    op: "segment_sum",
                    reason: format!("segment id {} out of range for {} outputs", s, n_out),
                });
            }
            for i in 0..stride {
                out[s * stride + i] += self.data[e * stride + i];
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = n_out;
        Ok(Tensor::finish(shape, out, self.dtype))
    }

    /// Multiplies row `r` of `self` by `scales[r]` (leading-axis broadcast).
    pub fn scale_rows_t(&self, scales: &Tensor) -> Result<Tensor> {
        if scales.shape.len() != 1 || self.shape.is_empty() || scales.shape[0] != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape.clone(),
                rhs: scales.shape.clone(),
            });
        }
        let dtype = self.binary_dtype(scales, "scale_rows")?;
        let stride: usize = self.shape[1..].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.shape[0] {
            let s = scales.data[r];
            for i in 0..stride {
                out[r * stride + i] = self.data[r * stride + i] * s;
            }
        }
        Ok(Tensor::finish(self.shape.clone(), out, dtype))
    }

    /// Elementwise product where `b` lacks the last axis of `self` and is
    /// broadcast along it.
    pub fn mul_bcast_last_t(&self, b: &Tensor) -> Result<Tensor> {
        let nd = self.shape.len();
        if nd == 0 || b.shape != self.shape[..nd - 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_bcast_last",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let dtype = self.binary_dtype(b, "mul_bcast_last")?;
        let last = self.shape[nd - 1];
        let mut out = vec![0.0; self.data.len()];
        for (slot, bv) in b.data.iter().enumerate() {
            for i in 0..last {
                out[slot * last + i] = self.data[slot * last + i] * bv;
            }
        }
        Ok(Tensor::finish(self.shape.clone(), out, dtype))
    }

    /// Repeats a leading-extent-1 tensor `n` times along axis 0.
    pub fn repeat_rows_t(&self, n: usize) -> Result<Tensor> {
        if self.shape.first() != Some(&1) {
            return Err(Error::InvalidArgument {
                op: "repeat_rows",
                reason: format!("leading extent must be 1, shape is {:?}", self.shape),
            });
        }
        let stride = self.data.len();
        let mut out = vec![0.0; n * stride];
        for r in 0..n {
            out[r * stride..(r + 1) * stride].copy_from_slice(&self.data);
        }
        let mut shape = self.shape.clone();
        shape[0] = n;
        Ok(Tensor::finish(shape, out, self.dtype))
    }

    /// Re-rounds the data under a new precision. Casting to the current
    /// dtype is the identity.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Tensor::finish(self.shape.clone(), self.data.clone(), dtype)
    }

    pub fn reshape_t(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor { shape, data: self.data.clone(), dtype: self.dtype })
    }
}

/// Row-major `[m,k] x [k,n]` product into `out`. The i-k-j loop order keeps
/// the inner loop stride-1 over both `b` and `out`.
fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
