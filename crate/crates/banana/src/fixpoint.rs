//! Fixed-point inference, contraction diagnostics, and training.
//!
//! Inference iterates a refinement map from an initial guess until the
//! update falls below tolerance. When the map contracts (Lipschitz
//! constant below one) the iteration converges to its unique fixed point
//! from any start, and a one-step residual of `eps` at a reference
//! segmentation pins the fixed point within `eps / (1 - L)` of it.
//! Training pushes the map toward making the ground truth that fixed
//! point: one pass evaluated at the ground truth, with the normalized
//! residual as the loss.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::net::{CloudContext, PartNetwork};
use crate::se3::PartTransform;
use crate::seg::{
    matched_iou, noisy_init, quotient_distance, seg_residual, uniform_random_init,
    SoftSegmentation,
};
use crate::tensor::{Checkpoint, Tape, Tensor};
use crate::util::{rng_from_seed, subseed};
use crate::{Error, Result};

/// A segmentation refinement map with its geometry already fixed.
pub trait SegmentationMap {
    fn num_parts(&self) -> usize;
    fn num_points(&self) -> usize;
    /// One application of the map to a `[N, P]` segmentation tensor.
    fn step(&self, y: &Tensor) -> Result<Tensor>;
}

/// A network bound to one cloud's precomputed neighborhoods.
pub struct NetworkMap<'a> {
    net: &'a PartNetwork,
    ctx: CloudContext,
}

impl<'a> NetworkMap<'a> {
    pub fn new(net: &'a PartNetwork, x: &Tensor) -> Result<Self> {
        Ok(Self {
            net,
            ctx: net.context(x)?,
        })
    }

    pub fn from_context(net: &'a PartNetwork, ctx: CloudContext) -> Self {
        Self { net, ctx }
    }

    pub fn context(&self) -> &CloudContext {
        &self.ctx
    }
}

impl SegmentationMap for NetworkMap<'_> {
    fn num_parts(&self) -> usize {
        self.net.config().num_parts
    }

    fn num_points(&self) -> usize {
        self.ctx.num_points()
    }

    fn step(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.net.apply(&self.ctx, y)?.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixpointConfig {
    /// Damping: the update is `(1 - beta) y + beta f(y)`.
    pub beta: f64,
    /// Stop when the normalized update norm falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixpointConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            tol: 1e-4,
            max_iters: 20,
        }
    }
}

impl FixpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "damping beta must be in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixpointReport {
    pub iterations: usize,
    pub converged: bool,
    /// Set when updates grew three times in a row past the starting
    /// residual; the iteration stops early in that case.
    pub diverged: bool,
    pub residuals: Vec<f64>,
    pub final_residual: f64,
    /// Mean ratio of successive update norms, a crude in-run estimate
    /// of the map's contraction factor.
    pub estimated_contraction: Option<f64>,
}

/// Iterates `map` from `y0` until the update norm `|y' - y|_F / sqrt(N)`
/// drops below tolerance or the iteration budget runs out.
pub fn banach_infer(
    map: &impl SegmentationMap,
    y0: &SoftSegmentation,
    cfg: &FixpointConfig,
) -> Result<(SoftSegmentation, FixpointReport)> {
    cfg.validate()?;
    if y0.num_parts() != map.num_parts() {
        return Err(Error::PartCountMismatch {
            lhs: y0.num_parts(),
            rhs: map.num_parts(),
        });
    }
    if y0.num_points() != map.num_points() {
        return Err(Error::InvalidArgument {
            op: "banach_infer",
            reason: format!(
                "start has {} points, map expects {}",
                y0.num_points(),
                map.num_points()
            ),
        });
    }
    let mut y = y0.tensor().clone();
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut growth_streak = 0usize;
    for _ in 0..cfg.max_iters {
        let fy = map.step(&y)?;
        let y_next = if cfg.beta == 1.0 {
            fy
        } else {
            y.scale(1.0 - cfg.beta).add_t(&fy.scale(cfg.beta))?
        };
        let r = seg_residual(&y_next, &y)?;
        if let Some(&prev) = residuals.last() {
            if r > prev && r > residuals[0] {
                growth_streak += 1;
            } else {
                growth_streak = 0;
            }
        }
        residuals.push(r);
        y = y_next;
        if r < cfg.tol {
            converged = true;
            break;
        }
        if growth_streak >= 3 {
            diverged = true;
            break;
        }
    }
    let ratios: Vec<f64> = residuals
        .windows(2)
        .filter(|w| w[0] > 1e-15)
        .map(|w| w[1] / w[0])
        .collect();
    let estimated_contraction = if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    };
    let report = FixpointReport {
        iterations: residuals.len(),
        converged,
        diverged,
        final_residual: residuals.last().copied().unwrap_or(0.0),
        residuals,
        estimated_contraction,
    };
    Ok((SoftSegmentation::new_unchecked(y), report))
}

/// Lower-bounds the map's Lipschitz constant in the quotient metric by
/// maximizing the distance ratio over sampled segmentation pairs. Pairs
/// closer than `1e-10` are skipped.
pub fn estimate_lipschitz<R: Rng>(
    map: &impl SegmentationMap,
    pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = map.num_points();
    let p = map.num_parts();
    let mut best: f64 = 0.0;
    for trial in 0..pairs {
        let a = uniform_random_init(n, p, rng)?;
        // alternate global pairs with progressively closer ones so both
        // coarse and local behavior are probed
        let b = match trial % 3 {
            0 => uniform_random_init(n, p, rng)?,
            1 => noisy_init(&a, 0.5, rng)?,
            _ => noisy_init(&a, 0.05, rng)?,
        };
        let (d_in, _) = quotient_distance(&a, &b)?;
        if d_in < 1e-10 {
            continue;
        }
        let fa = SoftSegmentation::new_unchecked(map.step(a.tensor())?);
        let fb = SoftSegmentation::new_unchecked(map.step(b.tensor())?);
        let (d_out, _) = quotient_distance(&fa, &fb)?;
        best = best.max(d_out / d_in);
    }
    Ok(best)
}

/// Banach residual bound: a one-step residual `eps` at a reference
/// point, under contraction factor `l`, bounds the distance from the
/// reference to the fixed point by `eps / (1 - l)`. Undefined when the
/// map does not contract.
pub fn fixed_point_error_bound(eps: f64, l: f64) -> Option<f64> {
    if l >= 1.0 || l < 0.0 || eps < 0.0 {
        return None;
    }
    Some(eps / (1.0 - l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter first and second moment buffers. Buffers are
/// created lazily and serialize alongside the network so a resumed run
/// continues bit for bit.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step_count: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::InvalidArgument {
                op: "Adam::step",
                reason: format!("missing gradient for parameter {name}"),
            })?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "Adam::step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let dtype = p.dtype();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec(), dtype));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec(), dtype));
            let mut new_m = vec![0.0; p.numel()];
            let mut new_v = vec![0.0; p.numel()];
            let mut new_p = vec![0.0; p.numel()];
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * gi;
                let vi = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * gi * gi;
                new_m[i] = mi;
                new_v[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                new_p[i] = p.data()[i] - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            *m = Tensor::from_vec(p.shape().to_vec(), new_m, dtype)?;
            *v = Tensor::from_vec(p.shape().to_vec(), new_v, dtype)?;
            *p = Tensor::from_vec(p.shape().to_vec(), new_p, dtype)?;
        }
        Ok(())
    }

    /// Moment buffers as checkpoint records, prefixed `opt.m.` and
    /// `opt.v.`.
    pub fn state_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in &self.m {
            out.push((format!("opt.m.{name}"), t.clone()));
        }
        for (name, t) in &self.v {
            out.push((format!("opt.v.{name}"), t.clone()));
        }
        out
    }

    /// Restores moment buffers from checkpoint records. Parameters with
    /// no stored moments keep lazy zeros, matching a fresh optimizer
    /// that has not yet touched them.
    pub fn load_state(&mut self, cp: &Checkpoint, step_count: u64) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for name in cp.names() {
            if let Some(param) = name.strip_prefix("opt.m.") {
                self.m.insert(
                    param.to_string(),
                    cp.get(name).expect("name came from listing").clone(),
                );
            } else if let Some(param) = name.strip_prefix("opt.v.") {
                self.v.insert(
                    param.to_string(),
                    cp.get(name).expect("name came from listing").clone(),
                );
            }
        }
        self.step_count = step_count;
        Ok(())
    }
}

/// One training example: a cloud and its ground-truth segmentation.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x: Tensor,
    pub y_gt: SoftSegmentation,
}

struct PreparedItem {
    ctx: CloudContext,
    y_gt: SoftSegmentation,
}

/// Driver for the one-pass training objective. Items are visited in the
/// order given, one optimizer update per item, no shuffling, so a run
/// is a pure function of the initial state.
pub struct Trainer {
    pub net: PartNetwork,
    pub opt: Adam,
    pub epoch: usize,
    items: Vec<PreparedItem>,
}

impl Trainer {
    pub fn new(net: PartNetwork, adam: AdamConfig, items: &[TrainItem]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument {
                op: "Trainer::new",
                reason: "no training items".into(),
            });
        }
        let prepared = Self::prepare(&net, items)?;
        Ok(Self {
            net,
            opt: Adam::new(adam),
            epoch: 0,
            items: prepared,
        })
    }

    /// Changes the learning rate for subsequent epochs, leaving the
    /// accumulated moments in place.
    pub fn set_lr(&mut self, lr: f64) {
        self.opt.cfg.lr = lr;
    }

    fn prepare(net: &PartNetwork, items: &[TrainItem]) -> Result<Vec<PreparedItem>> {
        items
            .iter()
            .map(|item| {
                if item.y_gt.num_parts() != net.config().num_parts {
                    return Err(Error::PartCountMismatch {
                        lhs: item.y_gt.num_parts(),
                        rhs: net.config().num_parts,
                    });
                }
                Ok(PreparedItem {
                    ctx: net.context(&item.x)?,
                    y_gt: item.y_gt.clone(),
                })
            })
            .collect()
    }

    /// One pass over all items. Returns the mean loss, each item's loss
    /// measured before its own update.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut total = 0.0;
        for item in &self.items {
            let n = item.y_gt.num_points();
            let mut tape = Tape::new();
            let pass = self.net.forward(&mut tape, &item.ctx, item.y_gt.tensor(), true)?;
            let target = tape.constant(&item.y_gt.tensor().cast(self.net.config().dtype));
            let diff = tape.sub(pass.y_next, target)?;
            let norm = tape.norm_all(diff)?;
            let loss = tape.mul_scalar(norm, 1.0 / (n as f64).sqrt())?;
            let loss_val = tape.value(loss).item()?;
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = pass
                .param_vars
                .iter()
                .map(|(k, &var)| (k.clone(), tape.grad_or_zeros(var)))
                .collect();
            self.opt.step(self.net.params_mut(), &grads)?;
            total += loss_val;
        }
        self.epoch += 1;
        Ok(total / self.items.len() as f64)
    }

    /// Runs `epochs` passes and returns the loss curve.
    pub fn train(&mut self, epochs: usize) -> Result<Vec<f64>> {
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            curve.push(self.run_epoch()?);
        }
        Ok(curve)
    }

    /// Mean loss over the items without updating anything.
    pub fn eval_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for item in &self.items {
            let (out, _) = self.net.apply(&item.ctx, item.y_gt.tensor())?;
            total += seg_residual(&out, &item.y_gt.tensor().cast(self.net.config().dtype))?;
        }
        Ok(total / self.items.len() as f64)
    }

    /// Writes network, optimizer state, and progress counters into one
    /// checkpoint.
    pub fn save(&self, path: impl AsRef<Path>, description: &str) -> Result<()> {
        let mut cp = self.net.to_checkpoint(description)?;
        cp.meta
            .extra
            .insert("epoch".to_string(), self.epoch.to_string());
        cp.meta
            .extra
            .insert("adam_step".to_string(), self.opt.step_count.to_string());
        cp.meta
            .extra
            .insert("adam".to_string(), serde_json::to_string(&self.opt.cfg)?);
        for (name, t) in self.opt.state_records() {
            cp.insert(&name, t)?;
        }
        cp.save(path)
    }

    /// Restores a saved run against the same items. Continuing a
    /// restored run reproduces the unbroken run bit for bit.
    pub fn load(path: impl AsRef<Path>, items: &[TrainItem]) -> Result<Self> {
        let cp = Checkpoint::load(path)?;
        let net = PartNetwork::from_checkpoint(&cp)?;
        let adam_cfg: AdamConfig = match cp.meta.extra.get("adam") {
            Some(json) => serde_json::from_str(json)?,
            None => return Err(Error::Checkpoint("missing optimizer settings".into())),
        };
        let epoch: usize = cp
            .meta
            .extra
            .get("epoch")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing or invalid epoch counter".into()))?;
        let step_count: u64 = cp
            .meta
            .extra
            .get("adam_step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing or invalid adam_step counter".into()))?;
        let mut opt = Adam::new(adam_cfg);
        opt.load_state(&cp, step_count)?;
        let prepared = Self::prepare(&net, items)?;
        Ok(Self {
            net,
            opt,
            epoch,
            items: prepared,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivarianceAudit {
    pub samples: usize,
    /// Largest normalized one-step output difference under per-part
    /// motions of the input cloud.
    pub max_forward_residual: f64,
    /// Largest quotient distance between full fixed-point runs on the
    /// original and moved clouds, measured over the first few motions
    /// only since each run costs many forward passes.
    pub max_fixpoint_distance: f64,
}

const FIXPOINT_AUDIT_RUNS: usize = 5;

/// Checks that moving each part rigidly leaves the refinement map's
/// output unchanged at the binary ground truth, where cross-part
/// affinities vanish and invariance is exact. The full-run distance is
/// also reported as a basin diagnostic: iterating from a soft start is
/// not covered by the exact statement, since soft segmentations couple
/// parts across whatever neighbors the motion brought into range.
///
/// The neighbor cap is lifted to the cloud size for the audit: capped
/// neighborhoods can differ between the original and moved clouds when
/// parts crowd a query ball, which perturbs outputs for reasons other
/// than the map itself.
pub fn equivariance_audit(
    net: &PartNetwork,
    x: &Tensor,
    y_gt: &SoftSegmentation,
    samples: usize,
    t_max: f64,
    seed: u64,
    fix_cfg: &FixpointConfig,
) -> Result<EquivarianceAudit> {
    let n = x.shape()[0];
    let mut cfg = net.config().clone();
    cfg.max_neighbors = cfg.max_neighbors.max(n);
    let net = net.with_config(cfg)?;
    let p = net.config().num_parts;
    let mut rng = rng_from_seed(subseed(seed, "equivariance-audit"));
    let y0 = noisy_init(y_gt, 0.3, &mut rng)?;

    let base_map = NetworkMap::new(&net, x)?;
    let base_step = base_map.step(y_gt.tensor())?;
    let (base_fix, _) = banach_infer(&base_map, &y0, fix_cfg)?;

    let mut max_forward_residual: f64 = 0.0;
    let mut max_fixpoint_distance: f64 = 0.0;
    for trial in 0..samples {
        let motion = PartTransform::sample_random(&mut rng, p, t_max)?;
        let x_moved = motion.act(x, y_gt.tensor())?;
        let moved_map = NetworkMap::new(&net, &x_moved)?;
        let moved_step = moved_map.step(y_gt.tensor())?;
        max_forward_residual =
            max_forward_residual.max(seg_residual(&moved_step, &base_step)?);
        if trial < FIXPOINT_AUDIT_RUNS {
            let (moved_fix, _) = banach_infer(&moved_map, &y0, fix_cfg)?;
            let (d, _) = quotient_distance(&moved_fix, &base_fix)?;
            max_fixpoint_distance = max_fixpoint_distance.max(d / (n as f64).sqrt());
        }
    }
    Ok(EquivarianceAudit {
        samples,
        max_forward_residual,
        max_fixpoint_distance,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasinRow {
    pub alpha: f64,
    pub mean_iou: f64,
    pub converged_fraction: f64,
}

/// Sweeps initialization noise: for each blend level, runs the fixed
/// point from several noisy starts per cloud and reports mean matched
/// IoU against ground truth plus the fraction of runs that converged.
pub fn noise_basin_sweep(
    net: &PartNetwork,
    clouds: &[(Tensor, SoftSegmentation)],
    alphas: &[f64],
    starts_per_cloud: usize,
    seed: u64,
    fix_cfg: &FixpointConfig,
    groups: &[Vec<usize>],
) -> Result<Vec<BasinRow>> {
    if clouds.is_empty() || starts_per_cloud == 0 {
        return Err(Error::InvalidArgument {
            op: "noise_basin_sweep",
            reason: "need at least one cloud and one start".into(),
        });
    }
    let maps: Vec<NetworkMap> = clouds
        .iter()
        .map(|(x, _)| NetworkMap::new(net, x))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut iou_total = 0.0;
        let mut converged = 0usize;
        let mut runs = 0usize;
        for (ci, (_, gt)) in clouds.iter().enumerate() {
            for s in 0..starts_per_cloud {
                let label = format!("basin-{ci}-{s}-{alpha:.6}");
                let mut rng = rng_from_seed(subseed(seed, &label));
                let y0 = noisy_init(gt, alpha, &mut rng)?;
                let (y_fix, report) = banach_infer(&maps[ci], &y0, fix_cfg)?;
                if report.converged {
                    converged += 1;
                }
                iou_total += matched_iou(&y_fix, gt, groups)?.mean_iou;
                runs += 1;
            }
        }
        rows.push(BasinRow {
            alpha,
            mean_iou: iou_total / runs as f64,
            converged_fraction: converged as f64 / runs as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{EdgePhi, NetConfig, PartMode};
    use crate::tensor::DType;

    /// Affine contraction toward a fixed target with factor `l`.
    struct Contraction {
        target: Tensor,
        l: f64,
    }

    impl SegmentationMap for Contraction {
        fn num_parts(&self) -> usize {
            self.target.shape()[1]
        }
        fn num_points(&self) -> usize {
            self.target.shape()[0]
        }
        fn step(&self, y: &Tensor) -> Result<Tensor> {
            y.scale(self.l).add_t(&self.target.scale(1.0 - self.l))
        }
    }

    /// Expansion away from a uniform center; residuals must grow.
    struct Expansion {
        center: Tensor,
    }

    impl SegmentationMap for Expansion {
        fn num_parts(&self) -> usize {
            self.center.shape()[1]
        }
        fn num_points(&self) -> usize {
            self.center.shape()[0]
        }
        fn step(&self, y: &Tensor) -> Result<Tensor> {
            // y + 0.5 (y - center); keeps row sums at 1
            y.scale(1.5).add_t(&self.center.scale(-0.5))
        }
    }

    fn uniform_center(n: usize, p: usize) -> Tensor {
        Tensor::full(vec![n, p], 1.0 / p as f64, DType::F64)
    }

    fn tiny_net(seed: u64) -> PartNetwork {
        let cfg = NetConfig {
            num_parts: 2,
            width: 8,
            readout_width: 4,
            radius: 0.5,
            max_neighbors: 32,
            message_rounds: 1,
            plain_rounds: 0,
            edge_phi: EdgePhi::Linear,
            part_mode: PartMode::Semantic,
            dtype: DType::F64,
        };
        PartNetwork::init(cfg, seed).unwrap()
    }

    fn grid(n_side: usize, spacing: f64) -> Tensor {
        let mut data = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                data.extend([i as f64 * spacing, j as f64 * spacing, 0.0]);
            }
        }
        Tensor::from_vec(vec![n_side * n_side, 3], data, DType::F64).unwrap()
    }

    #[test]
    fn iteration_converges_on_a_contraction() {
        let mut rng = rng_from_seed(91);
        let target = uniform_random_init(10, 3, &mut rng).unwrap();
        let map = Contraction {
            target: target.tensor().clone(),
            l: 0.5,
        };
        let y0 = uniform_random_init(10, 3, &mut rng).unwrap();
        let cfg = FixpointConfig::default();
        let (y_fix, report) = banach_infer(&map, &y0, &cfg).unwrap();
        assert!(report.converged);
        assert!(!report.diverged);
        assert!(report.final_residual < cfg.tol);
        // the iterate sits within tol * l / (1 - l) of the true fixed point
        let err = seg_residual(y_fix.tensor(), target.tensor()).unwrap();
        assert!(err < cfg.tol, "distance to fixed point {err}");
        let est = report.estimated_contraction.unwrap();
        assert!((est - 0.5).abs() < 0.05, "estimated contraction {est}");
        // residuals halve each step
        for w in report.residuals.windows(2) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn damping_still_converges() {
        let mut rng = rng_from_seed(92);
        let target = uniform_random_init(8, 2, &mut rng).unwrap();
        let map = Contraction {
            target: target.tensor().clone(),
            l: 0.6,
        };
        let y0 = uniform_random_init(8, 2, &mut rng).unwrap();
        let cfg = FixpointConfig {
            beta: 0.5,
            tol: 1e-4,
            max_iters: 60,
        };
        let (y_fix, report) = banach_infer(&map, &y0, &cfg).unwrap();
        assert!(report.converged);
        // damped map contracts with factor (1 - beta) + beta * l = 0.8
        let est = report.estimated_contraction.unwrap();
        assert!((est - 0.8).abs() < 0.05);
        let err = seg_residual(y_fix.tensor(), target.tensor()).unwrap();
        assert!(err < 5e-4);
    }

    #[test]
    fn expansion_is_flagged_divergent() {
        let mut rng = rng_from_seed(93);
        let y0 = uniform_random_init(6, 2, &mut rng).unwrap();
        let map = Expansion {
            center: uniform_center(6, 2),
        };
        let cfg = FixpointConfig::default();
        let (_, report) = banach_infer(&map, &y0, &cfg).unwrap();
        assert!(report.diverged);
        assert!(!report.converged);
        assert!(report.iterations < cfg.max_iters);
    }

    #[test]
    fn fixed_start_terminates_immediately() {
        let mut rng = rng_from_seed(94);
        let target = uniform_random_init(5, 2, &mut rng).unwrap();
        let map = Contraction {
            target: target.tensor().clone(),
            l: 0.3,
        };
        let (out, report) = banach_infer(&map, &target, &FixpointConfig::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
        assert!(seg_residual(out.tensor(), target.tensor()).unwrap() < 1e-12);
    }

    #[test]
    fn lipschitz_estimate_recovers_known_factor() {
        // the center has identical columns, so relabeling commutes with
        // the map and the quotient ratio is exactly the factor
        let map = Contraction {
            target: uniform_center(12, 3),
            l: 0.5,
        };
        let mut rng = rng_from_seed(95);
        let est = estimate_lipschitz(&map, 60, &mut rng).unwrap();
        assert!(est <= 0.5 + 1e-9, "estimate {est} exceeds true constant");
        assert!(est > 0.45, "estimate {est} far below true constant");
    }

    #[test]
    fn error_bound_formula() {
        assert_eq!(fixed_point_error_bound(0.1, 0.5), Some(0.2));
        assert_eq!(fixed_point_error_bound(0.0, 0.9), Some(0.0));
        assert_eq!(fixed_point_error_bound(0.1, 1.0), None);
        assert_eq!(fixed_point_error_bound(0.1, 1.5), None);
    }

    #[test]
    fn adam_matches_hand_computed_steps() {
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg.clone());
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::scalar(0.0, DType::F64));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0, DType::F64));

        // constant unit gradient: bias-corrected moments are exactly 1,
        // so each step moves by lr / (1 + eps)
        let delta = cfg.lr / (1.0 + cfg.eps);
        opt.step(&mut params, &grads).unwrap();
        let p1 = params["w"].item().unwrap();
        assert!((p1 - (-delta)).abs() < 1e-15);
        opt.step(&mut params, &grads).unwrap();
        let p2 = params["w"].item().unwrap();
        assert!((p2 - (-2.0 * delta)).abs() < 1e-12);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn adam_rejects_missing_or_misshapen_grads() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::zeros(vec![2], DType::F64));
        let empty = BTreeMap::new();
        assert!(opt.step(&mut params, &empty).is_err());
        let mut bad = BTreeMap::new();
        bad.insert("w".to_string(), Tensor::zeros(vec![3], DType::F64));
        assert!(opt.step(&mut params, &bad).is_err());
    }

    /// Two clusters with distinct local shapes: a compact box and a
    /// zigzag strand. Mirror-congruent parts would be inseparable to
    /// the rotation-invariant readout, so the parts must differ in
    /// geometry for training to have anywhere to go.
    fn make_items() -> Vec<TrainItem> {
        let mut data = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    data.extend([i as f64 * 0.15, j as f64 * 0.15, k as f64 * 0.15]);
                }
            }
        }
        for k in 0..8 {
            data.extend([2.0 + k as f64 * 0.1, 0.06 * (k % 2) as f64, 0.0]);
        }
        let x = Tensor::from_vec(vec![16, 3], data, DType::F64).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| usize::from(i >= 8)).collect();
        let y = SoftSegmentation::from_labels(&labels, 2).unwrap();
        vec![TrainItem { x, y_gt: y }]
    }

    #[test]
    fn training_reduces_the_one_step_residual() {
        let net = tiny_net(101);
        let mut trainer = Trainer::new(net, AdamConfig::default(), &make_items()).unwrap();
        let before = trainer.eval_loss().unwrap();
        let curve = trainer.train(200).unwrap();
        let after = trainer.eval_loss().unwrap();
        assert!(
            after < before * 0.1,
            "loss did not drop: {before} -> {after}"
        );
        assert!(after < 0.05, "final loss {after}");
        assert_eq!(curve.len(), 200);
        assert_eq!(trainer.epoch, 200);
    }

    #[test]
    fn resumed_training_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let items = make_items();

        let mut unbroken = Trainer::new(tiny_net(102), AdamConfig::default(), &items).unwrap();
        unbroken.train(6).unwrap();

        let mut first = Trainer::new(tiny_net(102), AdamConfig::default(), &items).unwrap();
        first.train(3).unwrap();
        let path = dir.path().join("mid.ckpt");
        first.save(&path, "mid-run").unwrap();
        let mut resumed = Trainer::load(&path, &items).unwrap();
        assert_eq!(resumed.epoch, 3);
        resumed.train(3).unwrap();

        assert_eq!(resumed.epoch, unbroken.epoch);
        assert_eq!(resumed.opt.step_count(), unbroken.opt.step_count());
        for (name, p) in unbroken.net.params() {
            assert!(
                resumed.net.params()[name].bits_eq(p),
                "parameter {name} diverged after resume"
            );
        }
    }

    #[test]
    fn audit_and_sweep_run_on_untrained_nets() {
        let net = tiny_net(103);
        let x = grid(3, 0.2);
        let labels: Vec<usize> = (0..9).map(|i| usize::from(i >= 4)).collect();
        let y = SoftSegmentation::from_labels(&labels, 2).unwrap();
        let fix = FixpointConfig {
            beta: 1.0,
            tol: 1e-4,
            max_iters: 5,
        };
        let audit = equivariance_audit(&net, &x, &y, 3, 1.0, 7, &fix).unwrap();
        assert_eq!(audit.samples, 3);
        assert!(audit.max_forward_residual < 1e-6);

        let rows = noise_basin_sweep(
            &net,
            &[(x, y)],
            &[0.0, 0.5],
            2,
            7,
            &fix,
            &[vec![0, 1]],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.mean_iou >= 0.0 && row.mean_iou <= 1.0);
        }
    }
}
