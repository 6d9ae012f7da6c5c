//! Soft segmentations, the permutation quotient they live in, and the
//! matching machinery for comparing them.
//!
//! A segmentation assigns every point a probability row over parts. Two
//! segmentations that differ only by a relabeling of parts describe the
//! same decomposition, so distances and scores are always computed after
//! solving for the best column matching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{DType, Tensor};
use crate::{Error, Result};

const ENTRY_SLACK: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-6;

/// A bijection on part indices. `map[j]` names the source column that
/// lands in target position `j` under [`SoftSegmentation::permute_columns`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartPermutation {
    map: Vec<usize>,
}

impl PartPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let p = map.len();
        let mut seen = vec![false; p];
        for &m in &map {
            if m >= p || seen[m] {
                return Err(Error::InvalidArgument {
                    op: "PartPermutation::new",
                    reason: format!("{map:?} is not a permutation of 0..{p}"),
                });
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            map: (0..p).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// Source column that fills target position `j`.
    pub fn source_of(&self, j: usize) -> usize {
        self.map[j]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> PartPermutation {
        let mut inv = vec![0; self.map.len()];
        for (j, &m) in self.map.iter().enumerate() {
            inv[m] = j;
        }
        PartPermutation { map: inv }
    }
}

/// Row-stochastic part assignment for a pointcloud, shape `[N, P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation {
    y: Tensor,
}

impl SoftSegmentation {
    /// Validates and adopts a `[N, P]` tensor. Entries may overshoot the
    /// unit interval by at most `1e-9` (they are clamped); each row must
    /// sum to 1 within `1e-6`.
    pub fn new(mut y: Tensor) -> Result<Self> {
        let shape = y.shape().to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::InvalidSegmentation {
                reason: format!("expected [N, P] with P >= 1, got {shape:?}"),
            });
        }
        let (n, p) = (shape[0], shape[1]);
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..p {
                let v = y.data()[i * p + j];
                if !v.is_finite() {
                    return Err(Error::InvalidSegmentation {
                        reason: format!("non-finite entry at row {i}"),
                    });
                }
                if !(-ENTRY_SLACK..=1.0 + ENTRY_SLACK).contains(&v) {
                    return Err(Error::InvalidSegmentation {
                        reason: format!("entry {v} at row {i} outside [0, 1]"),
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidSegmentation {
                    reason: format!("row {i} sums to {sum}, expected 1"),
                });
            }
        }
        for v in y.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { y })
    }

    /// Adopts the tensor without validation. For callers that construct
    /// rows which are stochastic by construction.
    pub fn new_unchecked(y: Tensor) -> Self {
        Self { y }
    }

    /// One-hot segmentation from hard labels.
    pub fn from_labels(labels: &[usize], num_parts: usize) -> Result<Self> {
        if num_parts == 0 {
            return Err(Error::InvalidSegmentation {
                reason: "need at least one part".into(),
            });
        }
        let n = labels.len();
        let mut data = vec![0.0; n * num_parts];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_parts {
                return Err(Error::InvalidSegmentation {
                    reason: format!("label {l} at row {i} exceeds part count {num_parts}"),
                });
            }
            data[i * num_parts + l] = 1.0;
        }
        Ok(Self {
            y: Tensor::from_vec(vec![n, num_parts], data, DType::F64)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.y
    }

    pub fn into_tensor(self) -> Tensor {
        self.y
    }

    pub fn num_points(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn num_parts(&self) -> usize {
        self.y.shape()[1]
    }

    /// Hard labels by row argmax; ties go to the lowest part index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        let (n, p) = (self.num_points(), self.num_parts());
        let mut out = vec![0; n];
        for i in 0..n {
            let mut best = 0;
            let mut best_v = self.y.data()[i * p];
            for j in 1..p {
                let v = self.y.data()[i * p + j];
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            out[i] = best;
        }
        out
    }

    /// True when every entry is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.y.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Reorders columns: target column `j` takes source column
    /// `perm.source_of(j)`.
    pub fn permute_columns(&self, perm: &PartPermutation) -> Result<SoftSegmentation> {
        let p = self.num_parts();
        if perm.len() != p {
            return Err(Error::PartCountMismatch {
                lhs: p,
                rhs: perm.len(),
            });
        }
        let n = self.num_points();
        let mut data = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                data[i * p + j] = self.y.data()[i * p + perm.source_of(j)];
            }
        }
        Ok(SoftSegmentation {
            y: Tensor::from_vec(vec![n, p], data, self.y.dtype())?,
        })
    }
}

/// Normalized Frobenius residual between two `[N, P]` tensors,
/// `|a - b|_F / sqrt(N)`. The same scale the fixed-point loop uses for
/// its stopping rule.
pub fn seg_residual(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "seg_residual",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.shape()[0].max(1) as f64;
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    Ok((acc / n).sqrt())
}

/// Solves the maximum-profit assignment over a square `[P, P]` matrix.
///
/// Returns the permutation (target column `j` takes source row
/// `perm.source_of(j)`) and the total profit it collects. Exact in
/// O(P^3) via shortest augmenting paths on dual potentials.
pub fn assignment_solve(profit: &Tensor) -> Result<(PartPermutation, f64)> {
    let shape = profit.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::InvalidArgument {
            op: "assignment_solve",
            reason: format!("expected square nonempty matrix, got {shape:?}"),
        });
    }
    if !profit.is_finite() {
        return Err(Error::InvalidArgument {
            op: "assignment_solve",
            reason: "profit matrix has non-finite entries".into(),
        });
    }
    let n = shape[0];
    let cost = |i: usize, j: usize| -profit.data()[i * n + j];

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut map = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        map[j - 1] = assigned_row[j] - 1;
        total += profit.data()[(assigned_row[j] - 1) * n + (j - 1)];
    }
    Ok((PartPermutation::new(map)?, total))
}

/// Distance between segmentations in the quotient by part relabeling:
/// the minimum Frobenius distance over all column permutations of `a`,
/// together with the permutation that attains it.
pub fn quotient_distance(
    a: &SoftSegmentation,
    b: &SoftSegmentation,
) -> Result<(f64, PartPermutation)> {
    if a.num_parts() != b.num_parts() {
        return Err(Error::PartCountMismatch {
            lhs: a.num_parts(),
            rhs: b.num_parts(),
        });
    }
    if a.num_points() != b.num_points() {
        return Err(Error::ShapeMismatch {
            op: "quotient_distance",
            lhs: a.tensor().shape().to_vec(),
            rhs: b.tensor().shape().to_vec(),
        });
    }
    let (n, p) = (a.num_points(), a.num_parts());
    // |a sigma - b|^2 = |a|^2 + |b|^2 - 2 <a sigma, b>; the inner product
    // decomposes over columns into the Gram matrix a^T b, so the best
    // permutation is a maximum-profit assignment on it.
    let mut gram = vec![0.0; p * p];
    for i in 0..n {
        for s in 0..p {
            let av = a.tensor().data()[i * p + s];
            if av == 0.0 {
                continue;
            }
            for t in 0..p {
                gram[s * p + t] += av * b.tensor().data()[i * p + t];
            }
        }
    }
    let gram = Tensor::from_vec(vec![p, p], gram, DType::F64)?;
    let (perm, _) = assignment_solve(&gram)?;
    // Evaluate the distance directly at the chosen permutation; the
    // inner-product shortcut cancels catastrophically near zero.
    let mut d2 = 0.0;
    for i in 0..n {
        for j in 0..p {
            let diff = a.tensor().data()[i * p + perm.source_of(j)] - b.tensor().data()[i * p + j];
            d2 += diff * diff;
        }
    }
    Ok((d2.sqrt(), perm))
}

/// Outcome of [`matched_iou`]: the score averages per-part IoU between
/// hardened prediction and ground truth under the best part matching,
/// skipping parts with no ground-truth support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedIou {
    pub mean_iou: f64,
    pub per_part: Vec<Option<f64>>,
    pub matching: PartPermutation,
}

/// Per-part intersection-over-union after hardening both segmentations
/// and matching predicted parts to ground-truth parts.
///
/// `groups` restricts the matching: each group lists part indices that
/// may be exchanged for one another, and every part index must appear in
/// exactly one group. Pass a single group of all parts for unrestricted
/// matching. Ground-truth parts with no points are excluded from the
/// mean and reported as `None`.
pub fn matched_iou(
    pred: &SoftSegmentation,
    gt: &SoftSegmentation,
    groups: &[Vec<usize>],
) -> Result<MatchedIou> {
    if pred.num_parts() != gt.num_parts() {
        return Err(Error::PartCountMismatch {
            lhs: pred.num_parts(),
            rhs: gt.num_parts(),
        });
    }
    if pred.num_points() != gt.num_points() {
        return Err(Error::ShapeMismatch {
            op: "matched_iou",
            lhs: pred.tensor().shape().to_vec(),
            rhs: gt.tensor().shape().to_vec(),
        });
    }
    let p = pred.num_parts();
    let mut seen = vec![false; p];
    for g in groups {
        for &idx in g {
            if idx >= p || seen[idx] {
                return Err(Error::InvalidArgument {
                    op: "matched_iou",
                    reason: format!("groups must partition 0..{p}, got {groups:?}"),
                });
            }
            seen[idx] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::InvalidArgument {
            op: "matched_iou",
            reason: format!("groups must cover every part, got {groups:?}"),
        });
    }

    let pred_l = pred.argmax_labels();
    let gt_l = gt.argmax_labels();
    let iou_of = |pi: usize, gj: usize| -> f64 {
        let mut inter = 0usize;
        let mut uni = 0usize;
        for i in 0..pred_l.len() {
            let in_p = pred_l[i] == pi;
            let in_g = gt_l[i] == gj;
            if in_p && in_g {
                inter += 1;
            }
            if in_p || in_g {
                uni += 1;
            }
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    };

    let mut map = vec![usize::MAX; p];
    for g in groups {
        if g.len() == 1 {
            map[g[0]] = g[0];
            continue;
        }
        let k = g.len();
        let mut profit = vec![0.0; k * k];
        for (a, &pi) in g.iter().enumerate() {
            for (b, &gj) in g.iter().enumerate() {
                profit[a * k + b] = iou_of(pi, gj);
            }
        }
        let profit = Tensor::from_vec(vec![k, k], profit, DType::F64)?;
        let (local, _) = assignment_solve(&profit)?;
        for (b, &gj) in g.iter().enumerate() {
            map[gj] = g[local.source_of(b)];
        }
    }
    let matching = PartPermutation::new(map)?;

    let mut per_part = vec![None; p];
    let mut total = 0.0;
    let mut counted = 0usize;
    for gj in 0..p {
        let support = gt_l.iter().filter(|&&l| l == gj).count();
        if support == 0 {
            log::warn!("part {gj} has no ground-truth points; excluded from mean IoU");
            continue;
        }
        let v = iou_of(matching.source_of(gj), gj);
        per_part[gj] = Some(v);
        total += v;
        counted += 1;
    }
    let mean_iou = if counted == 0 {
        0.0
    } else {
        total / counted as f64
    };
    Ok(MatchedIou {
        mean_iou,
        per_part,
        matching,
    })
}

/// Blends ground truth toward a random simplex point: each row becomes
/// `(1 - alpha) * gt + alpha * noise`, renormalized. At `alpha = 0` a
/// binary input passes through bit for bit.
pub fn noisy_init<R: Rng>(
    gt: &SoftSegmentation,
    alpha: f64,
    rng: &mut R,
) -> Result<SoftSegmentation> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument {
            op: "noisy_init",
            reason: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    let (n, p) = (gt.num_points(), gt.num_parts());
    let mut data = vec![0.0; n * p];
    for i in 0..n {
        // uniform over the simplex via normalized exponentials
        let mut noise = vec![0.0; p];
        let mut norm = 0.0;
        for x in noise.iter_mut() {
            let u: f64 = rng.gen_range(1e-12..1.0);
            *x = -u.ln();
            norm += *x;
        }
        let mut sum = 0.0;
        for j in 0..p {
            let v = (1.0 - alpha) * gt.tensor().data()[i * p + j] + alpha * (noise[j] / norm);
            data[i * p + j] = v;
            sum += v;
        }
        for j in 0..p {
            data[i * p + j] /= sum;
        }
    }
    Ok(SoftSegmentation {
        y: Tensor::from_vec(vec![n, p], data, gt.tensor().dtype())?,
    })
}

/// Fully random row-stochastic segmentation: per-row softmax of
/// standard normals.
pub fn uniform_random_init<R: Rng>(n: usize, p: usize, rng: &mut R) -> Result<SoftSegmentation> {
    if p == 0 {
        return Err(Error::InvalidSegmentation {
            reason: "need at least one part".into(),
        });
    }
    let mut data = vec![0.0; n * p];
    for i in 0..n {
        let row: Vec<f64> = (0..p).map(|_| crate::util::std_normal(rng)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..p {
            let e = (row[j] - m).exp();
            data[i * p + j] = e;
            sum += e;
        }
        for j in 0..p {
            data[i * p + j] /= sum;
        }
    }
    Ok(SoftSegmentation {
        y: Tensor::from_vec(vec![n, p], data, DType::F64)?,
    })
}
