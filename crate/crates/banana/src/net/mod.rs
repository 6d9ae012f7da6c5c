//! The part-aware message-passing network.
//!
//! One forward pass maps a pointcloud and a candidate segmentation to a
//! refined segmentation. Geometry enters only through within-neighborhood
//! relative coordinates, and every message is weighted by the part
//! agreement of its endpoints, so each part's features see other parts
//! only through weights the segmentation itself controls. Equivariant
//! feature channels ([`crate::vn`]) carry the geometry; invariant
//! readouts score each point against per-part codes and a row softmax
//! produces the next segmentation.
//!
//! The forward pass treats the incoming segmentation as a constant:
//! gradients flow to parameters only. Training drives one pass toward
//! reproducing the ground truth at the ground truth, and inference
//! iterates the same pass to a fixed point.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Checkpoint, CheckpointMeta, DType, Tape, Tensor, Var};
use crate::util::{rng_from_seed, std_normal, subseed};
use crate::vn::{vn_invariant, vn_linear, vn_nonlinearity};
use crate::{Error, Result};

const DEGENERATE_EPS: f64 = 1e-8;

/// Floor for the message normalizer `1 / max(w, floor)`. A bare `1 / w`
/// makes the aggregation's sensitivity to the segmentation blow up
/// wherever a point's within-part neighborhood weight nearly vanishes,
/// which destabilizes the iterated map exactly at part seams. Clamping
/// caps that sensitivity while leaving every healthy neighborhood's
/// arithmetic untouched; below the floor a linear ramp blends in a self
/// message so starved points degrade to their own features instead of
/// to zero.
const WEIGHT_FLOOR: f64 = 0.1;

/// Edge transform applied to each message before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePhi {
    /// Messages are the linear combination `A_src - A_dst + B_dst`,
    /// which aggregation can assemble from per-point tensors.
    Linear,
    /// Adds a per-edge directional rectifier and channel mix on top of
    /// the linear form.
    Mlp,
}

/// How per-part codes are produced for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartMode {
    /// Learned per-part prototype vectors. Parts have fixed identities.
    Semantic,
    /// Codes pooled from the current segmentation. Relabeling parts
    /// relabels the output the same way.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub num_parts: usize,
    /// Equivariant channel count.
    pub width: usize,
    /// Channel count after reduction for invariant readouts. Readout
    /// dimension grows quadratically in this, so it stays small.
    pub readout_width: usize,
    /// Neighborhood radius for the ball query.
    pub radius: f64,
    /// Cap on neighbors per point; the nearest are kept.
    pub max_neighbors: usize,
    pub message_rounds: usize,
    /// How many initial rounds run without the global context
    /// exchange, building purely local features first.
    #[serde(default)]
    pub plain_rounds: usize,
    pub edge_phi: EdgePhi,
    pub part_mode: PartMode,
    pub dtype: DType,
}

impl NetConfig {
    /// Small configuration that trains in minutes on a single core.
    pub fn desk(num_parts: usize) -> Self {
        Self {
            num_parts,
            width: 32,
            readout_width: 8,
            radius: 0.3,
            max_neighbors: 16,
            message_rounds: 3,
            plain_rounds: 1,
            edge_phi: EdgePhi::Linear,
            part_mode: PartMode::Semantic,
            dtype: DType::F64,
        }
    }

    /// Full-size configuration matching the published architecture.
    pub fn paper(num_parts: usize) -> Self {
        Self {
            num_parts,
            width: 128,
            readout_width: 16,
            radius: 0.3,
            max_neighbors: 40,
            message_rounds: 6,
            plain_rounds: 2,
            edge_phi: EdgePhi::Mlp,
            part_mode: PartMode::Semantic,
            dtype: DType::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Config(reason));
        if self.num_parts == 0 {
            return fail("num_parts must be at least 1".into());
        }
        if self.width == 0 || self.readout_width == 0 {
            return fail("width and readout_width must be at least 1".into());
        }
        if self.readout_width > self.width {
            return fail(format!(
                "readout_width {} exceeds width {}",
                self.readout_width, self.width
            ));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return fail(format!("radius must be positive, got {}", self.radius));
        }
        if self.max_neighbors == 0 {
            return fail("max_neighbors must be at least 1".into());
        }
        if self.message_rounds == 0 {
            return fail("message_rounds must be at least 1".into());
        }
        if self.plain_rounds >= self.message_rounds {
            return fail(format!(
                "plain_rounds {} leaves no round with context exchange (message_rounds {})",
                self.plain_rounds, self.message_rounds
            ));
        }
        Ok(())
    }

    fn readout_dim(&self) -> usize {
        self.readout_width * self.readout_width + self.readout_width
    }
}

/// Neighbor lists from a radius search, stored as offsets into a flat
/// index array. Lists include the query point itself and are sorted by
/// point index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl NeighborhoodIndex {
    /// Exhaustive radius search over all point pairs. A point `m` is a
    /// neighbor of `n` when `|x_m - x_n| <= radius`. When more than
    /// `cap` points qualify, the nearest `cap` are kept, breaking
    /// distance ties toward lower indices.
    pub fn ball_query(points: &Tensor, radius: f64, cap: usize) -> Result<Self> {
        let shape = points.shape();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::InvalidArgument {
                op: "ball_query",
                reason: format!("expected [N, 3] points, got {shape:?}"),
            });
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "ball_query",
                reason: format!("radius must be positive, got {radius}"),
            });
        }
        if cap == 0 {
            return Err(Error::InvalidArgument {
                op: "ball_query",
                reason: "neighbor cap must be at least 1".into(),
            });
        }
        let n = shape[0];
        let r2 = radius * radius;
        let d = points.data();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut items = Vec::new();
        offsets.push(0);
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for i in 0..n {
            candidates.clear();
            let (xi, yi, zi) = (d[3 * i], d[3 * i + 1], d[3 * i + 2]);
            for j in 0..n {
                let dx = d[3 * j] - xi;
                let dy = d[3 * j + 1] - yi;
                let dz = d[3 * j + 2] - zi;
                let dist2 = dx * dx + dy * dy + dz * dz;
                if dist2 <= r2 {
                    candidates.push((dist2, j));
                }
            }
            if candidates.len() > cap {
                candidates.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
                candidates.truncate(cap);
                candidates.sort_by_key(|&(_, j)| j);
            }
            items.extend(candidates.iter().map(|&(_, j)| j));
            offsets.push(items.len());
        }
        Ok(Self { offsets, items })
    }

    pub fn num_points(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.items.len()
    }

    pub fn neighbors(&self, n: usize) -> &[usize] {
        &self.items[self.offsets[n]..self.offsets[n + 1]]
    }
}

/// Per-cloud precomputation shared across forward passes: the edge list
/// and the edge geometry, which depend on the points but not on the
/// segmentation.
#[derive(Debug, Clone)]
pub struct CloudContext {
    x: Tensor,
    src: Vec<usize>,
    dst: Vec<usize>,
    evec: Tensor,
    einv: Tensor,
}

impl CloudContext {
    fn build(x: &Tensor, index: &NeighborhoodIndex, dtype: DType) -> Result<Self> {
        let n = index.num_points();
        let mut src = Vec::with_capacity(index.num_edges());
        let mut dst = Vec::with_capacity(index.num_edges());
        for i in 0..n {
            for &m in index.neighbors(i) {
                src.push(m);
                dst.push(i);
            }
        }
        let e = src.len();
        let x = x.cast(dtype);
        let mut evec = vec![0.0; e * 3];
        let mut einv = vec![0.0; e * 3];
        for k in 0..e {
            let (m, i) = (src[k], dst[k]);
            let mut norm2 = 0.0;
            for a in 0..3 {
                let v = x.data()[3 * m + a] - x.data()[3 * i + a];
                evec[3 * k + a] = v;
                norm2 += v * v;
            }
            einv[3 * k] = norm2.sqrt();
            einv[3 * k + 1] = norm2;
            einv[3 * k + 2] = 1.0;
        }
        Ok(Self {
            x,
            src,
            dst,
            evec: Tensor::from_vec(vec![e, 1, 3], evec, dtype)?,
            einv: Tensor::from_vec(vec![e, 3], einv, dtype)?,
        })
    }

    pub fn num_points(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn points(&self) -> &Tensor {
        &self.x
    }

    #[cfg(test)]
    pub(crate) fn from_raw(x: Tensor, src: Vec<usize>, dst: Vec<usize>) -> Result<Self> {
        let e = src.len();
        let dtype = x.dtype();
        let mut evec = vec![0.0; e * 3];
        let mut einv = vec![0.0; e * 3];
        for k in 0..e {
            let (m, i) = (src[k], dst[k]);
            let mut norm2 = 0.0;
            for a in 0..3 {
                let v = x.data()[3 * m + a] - x.data()[3 * i + a];
                evec[3 * k + a] = v;
                norm2 += v * v;
            }
            einv[3 * k] = norm2.sqrt();
            einv[3 * k + 1] = norm2;
            einv[3 * k + 2] = 1.0;
        }
        Ok(Self {
            x,
            src,
            dst,
            evec: Tensor::from_vec(vec![e, 1, 3], evec, dtype)?,
            einv: Tensor::from_vec(vec![e, 3], einv, dtype)?,
        })
    }
}

enum InitKind {
    Fan(usize),
    Zero,
    Normal,
}

fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let c = cfg.width;
    let rc = cfg.readout_width;
    let d = cfg.readout_dim();
    let p = cfg.num_parts;
    let mut specs: Vec<(String, Vec<usize>, InitKind)> = vec![
        ("lift.dir".into(), vec![c, 1], InitKind::Normal),
        ("lift.scale".into(), vec![3, c], InitKind::Fan(3)),
        ("lift.gate".into(), vec![c, c], InitKind::Fan(c)),
    ];
    for r in 0..cfg.message_rounds {
        specs.push((format!("round{r}.src"), vec![c, c], InitKind::Fan(c)));
        specs.push((format!("round{r}.dst"), vec![c, c], InitKind::Fan(c)));
        specs.push((format!("round{r}.gate"), vec![c, c], InitKind::Fan(c)));
        if cfg.edge_phi == EdgePhi::Mlp {
            specs.push((format!("round{r}.edge_gate"), vec![c, c], InitKind::Fan(c)));
            specs.push((format!("round{r}.edge_mix"), vec![c, c], InitKind::Fan(c)));
        }
        if r < cfg.plain_rounds {
            continue;
        }
        specs.push((format!("round{r}.ctx_reduce"), vec![rc, c], InitKind::Fan(c)));
        specs.push((format!("round{r}.ctx_mix"), vec![rc, rc], InitKind::Fan(rc)));
        specs.push((format!("round{r}.ctx_w1"), vec![2 * d, c], InitKind::Fan(2 * d)));
        specs.push((format!("round{r}.ctx_b1"), vec![1, c], InitKind::Zero));
        specs.push((format!("round{r}.ctx_w2"), vec![c, c], InitKind::Fan(c)));
        specs.push((format!("round{r}.ctx_b2"), vec![1, c], InitKind::Zero));
        specs.push((format!("round{r}.ctx_merge"), vec![c, c], InitKind::Fan(c)));
    }
    specs.push(("read.reduce".into(), vec![rc, c], InitKind::Fan(c)));
    specs.push(("read.mix".into(), vec![rc, rc], InitKind::Fan(rc)));
    if cfg.part_mode == PartMode::Semantic {
        specs.push(("parts.decode_w".into(), vec![d, p * d], InitKind::Fan(d)));
        specs.push(("parts.decode_b".into(), vec![p, d], InitKind::Normal));
    }
    specs.push(("score.w1".into(), vec![3 * d, c], InitKind::Fan(3 * d)));
    specs.push(("score.b1".into(), vec![1, c], InitKind::Zero));
    specs.push(("score.w2".into(), vec![c, 1], InitKind::Fan(c)));
    specs.push(("score.b2".into(), vec![1, 1], InitKind::Zero));
    specs
}

/// One forward pass, still attached to its tape. `y_next` is the refined
/// segmentation, `features` the equivariant state it was scored from.
pub struct ForwardPass {
    pub y_next: Var,
    pub features: Var,
    pub param_vars: BTreeMap<String, Var>,
    /// Points whose within-part neighborhood weight collapsed below
    /// threshold, leaving them with (almost) pure self messages.
    pub degenerate_points: usize,
}

/// The network: a configuration plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct PartNetwork {
    config: NetConfig,
    params: BTreeMap<String, Tensor>,
}

impl PartNetwork {
    /// Fresh network with weights drawn from per-parameter seeded
    /// streams, so any single parameter's values are independent of the
    /// construction order of the rest.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape, kind) in param_specs(&config) {
            let mut rng = rng_from_seed(subseed(seed, &name));
            let t = match kind {
                InitKind::Zero => Tensor::zeros(shape, config.dtype),
                InitKind::Normal => {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| std_normal(&mut rng)).collect();
                    Tensor::from_vec(shape, data, config.dtype)?
                }
                InitKind::Fan(fan_in) => {
                    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| std_normal(&mut rng) * scale).collect();
                    Tensor::from_vec(shape, data, config.dtype)?
                }
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Same weights under a different configuration. The new settings
    /// must describe the identical parameter set, so only inference
    /// knobs such as the neighbor cap or radius may change.
    pub fn with_config(&self, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != self.params.len() {
            return Err(Error::Config(
                "new settings change the parameter set".into(),
            ));
        }
        for (name, shape, _) in &specs {
            match self.params.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                _ => {
                    return Err(Error::Config(format!(
                        "new settings change parameter {name}"
                    )));
                }
            }
        }
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Precomputes neighborhoods and edge geometry for a cloud.
    pub fn context(&self, x: &Tensor) -> Result<CloudContext> {
        let index =
            NeighborhoodIndex::ball_query(x, self.config.radius, self.config.max_neighbors)?;
        CloudContext::build(x, &index, self.config.dtype)
    }

    /// Records one refinement pass on `tape`. With `train` set, the
    /// parameters become differentiable leaves; the segmentation is
    /// always a constant input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &CloudContext,
        y: &Tensor,
        train: bool,
    ) -> Result<ForwardPass> {
        let n = ctx.num_points();
        let p_count = self.config.num_parts;
        let c = self.config.width;
        let ys = y.shape();
        if ys.len() != 2 || ys[0] != n || ys[1] != p_count {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!("expected segmentation [{n}, {p_count}], got {ys:?}"),
            });
        }
        if !y.is_finite() {
            return Err(Error::NonFinite {
                layer: "input segmentation".into(),
            });
        }
        let y = y.cast(self.config.dtype);
        let e = ctx.num_edges();

        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.params {
            vars.insert(name.clone(), tape.leaf(tensor, train));
        }
        let v = |name: &str| -> Var {
            *vars
                .get(name)
                .unwrap_or_else(|| panic!("parameter {name} missing"))
        };

        // Segmentation-derived constants. Edge weight is the part
        // agreement of the endpoints; each destination normalizes by its
        // total incoming weight, clamped below, and ramps toward a pure
        // self message as that weight collapses.
        let mut p_edge = vec![0.0; e];
        let mut w_total = vec![0.0; n];
        for k in 0..e {
            let (m, i) = (ctx.src[k], ctx.dst[k]);
            let mut dot = 0.0;
            for q in 0..p_count {
                dot += y.data()[m * p_count + q] * y.data()[i * p_count + q];
            }
            p_edge[k] = dot;
            w_total[i] += dot;
        }
        let mut winv = vec![0.0; n];
        let mut fallback = vec![0.0; n];
        let mut degenerate_points = 0usize;
        for i in 0..n {
            if w_total[i] < DEGENERATE_EPS {
                degenerate_points += 1;
            }
            winv[i] = 1.0 / w_total[i].max(WEIGHT_FLOOR);
            fallback[i] = (1.0 - w_total[i] / WEIGHT_FLOOR).max(0.0);
        }
        if degenerate_points > 0 {
            log::debug!("{degenerate_points} points fell back to self messages");
        }
        let dt = self.config.dtype;
        let p_edge_t = tape.constant(&Tensor::from_vec(vec![e], p_edge, dt)?);
        let winv_t = tape.constant(&Tensor::from_vec(vec![n], winv, dt)?);
        let fallback_t = tape.constant(&Tensor::from_vec(vec![n], fallback, dt)?);

        // Lift: aggregate neighbor offsets into equivariant channels,
        // with per-channel scalar weights from edge-length features.
        let evec = tape.constant(&ctx.evec);
        let einv = tape.constant(&ctx.einv);
        let lifted = vn_linear(tape, v("lift.dir"), evec)?;
        let scales = tape.matmul(einv, v("lift.scale"))?;
        let weighted = tape.mul_bcast_last(lifted, scales)?;
        let pw = tape.scale_rows(weighted, p_edge_t)?;
        let agg = tape.segment_sum(pw, ctx.dst.clone(), n)?;
        let mut feat = tape.scale_rows(agg, winv_t)?;
        feat = vn_nonlinearity(tape, v("lift.gate"), feat)?;
        self.ensure_finite(tape, feat, "lift")?;

        let pool = tape.constant(&Tensor::from_vec(
            vec![1, n],
            vec![1.0 / n as f64; n],
            dt,
        )?);
        for r in 0..self.config.message_rounds {
            let a = vn_linear(tape, v(&format!("round{r}.src")), feat)?;
            let b = vn_linear(tape, v(&format!("round{r}.dst")), feat)?;
            let a_flat = tape.reshape(a, vec![n, c * 3])?;
            let b_flat = tape.reshape(b, vec![n, c * 3])?;
            let a_src = tape.gather_rows(a_flat, ctx.src.clone())?;
            let a_dst = tape.gather_rows(a_flat, ctx.dst.clone())?;
            let b_dst = tape.gather_rows(b_flat, ctx.dst.clone())?;
            let diff = tape.sub(a_src, a_dst)?;
            let h = tape.add(diff, b_dst)?;
            let mut msg = tape.reshape(h, vec![e, c, 3])?;
            if self.config.edge_phi == EdgePhi::Mlp {
                msg = vn_nonlinearity(tape, v(&format!("round{r}.edge_gate")), msg)?;
                msg = vn_linear(tape, v(&format!("round{r}.edge_mix")), msg)?;
            }
            let msg_w = tape.scale_rows(msg, p_edge_t)?;
            let agg = tape.segment_sum(msg_w, ctx.dst.clone(), n)?;
            let agg = tape.scale_rows(agg, winv_t)?;
            let self_msg = tape.scale_rows(b, fallback_t)?;
            let agg = tape.add(agg, self_msg)?;
            let update = vn_nonlinearity(tape, v(&format!("round{r}.gate")), agg)?;
            feat = tape.add(feat, update)?;
            if r < self.config.plain_rounds {
                self.ensure_finite(tape, feat, &format!("round{r}"))?;
                continue;
            }

            // Context exchange: each point's invariant summary is
            // paired with a plain mean over all points, so information
            // crosses part boundaries while the segmentation itself
            // stays confined to the neighborhood weighting above.
            let red = vn_linear(tape, v(&format!("round{r}.ctx_reduce")), feat)?;
            let s_inv = vn_invariant(tape, v(&format!("round{r}.ctx_mix")), red)?;
            let pooled = tape.matmul(pool, s_inv)?;
            let context = tape.repeat_rows(pooled, n)?;
            let cat = tape.concat(&[s_inv, context], 1)?;
            let h1 = tape.matmul(cat, v(&format!("round{r}.ctx_w1")))?;
            let b1 = tape.repeat_rows(v(&format!("round{r}.ctx_b1")), n)?;
            let h1 = tape.add(h1, b1)?;
            let h1 = tape.relu(h1)?;
            let h2 = tape.matmul(h1, v(&format!("round{r}.ctx_w2")))?;
            let b2 = tape.repeat_rows(v(&format!("round{r}.ctx_b2")), n)?;
            let h2 = tape.add(h2, b2)?;
            let gamma = self.sigmoid(tape, h2, n * c)?;
            let gamma = tape.reshape(gamma, vec![n, c])?;
            let gated = tape.mul_bcast_last(feat, gamma)?;
            let merged = vn_linear(tape, v(&format!("round{r}.ctx_merge")), gated)?;
            feat = tape.add(feat, merged)?;
            self.ensure_finite(tape, feat, &format!("round{r}"))?;
        }

        // Readout: invariant point descriptors scored against per-part
        // codes. Semantic codes come from decomposing a pooled shape
        // code, so they adapt to the cloud at hand; instance codes pool
        // descriptors within each part's current soft mask.
        let rred = vn_linear(tape, v("read.reduce"), feat)?;
        let s_read = vn_invariant(tape, v("read.mix"), rred)?;
        let d = self.config.readout_dim();
        let codes = match self.config.part_mode {
            PartMode::Semantic => {
                let shape_code = tape.matmul(pool, s_read)?;
                let dec = tape.matmul(shape_code, v("parts.decode_w"))?;
                let dec = tape.reshape(dec, vec![p_count, d])?;
                tape.add(dec, v("parts.decode_b"))?
            }
            PartMode::Instance => {
                let y_tr = tape.constant(&y.transpose_t()?);
                let count_inv = {
                    let mut counts = vec![0.0; p_count];
                    for i in 0..n {
                        for q in 0..p_count {
                            counts[q] += y.data()[i * p_count + q];
                        }
                    }
                    for cnt in counts.iter_mut() {
                        // same clamp as the message normalization:
                        // nearly empty parts stop amplifying instead
                        // of dividing by a vanishing mass
                        *cnt = 1.0 / cnt.max(WEIGHT_FLOOR);
                    }
                    tape.constant(&Tensor::from_vec(vec![p_count], counts, dt)?)
                };
                let pooled_raw = tape.matmul(y_tr, s_read)?;
                tape.scale_rows(pooled_raw, count_inv)?
            }
        };
        let idx_pts: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(p_count)).collect();
        let idx_parts: Vec<usize> = (0..n).flat_map(|_| 0..p_count).collect();
        let s_rep = tape.gather_rows(s_read, idx_pts)?;
        let q_rep = tape.gather_rows(codes, idx_parts)?;
        let prod = tape.mul(s_rep, q_rep)?;
        let cat = tape.concat(&[s_rep, q_rep, prod], 1)?;
        let h = tape.matmul(cat, v("score.w1"))?;
        let sb1 = tape.repeat_rows(v("score.b1"), n * p_count)?;
        let h = tape.add(h, sb1)?;
        let h = tape.relu(h)?;
        let logits = tape.matmul(h, v("score.w2"))?;
        let sb2 = tape.repeat_rows(v("score.b2"), n * p_count)?;
        let logits = tape.add(logits, sb2)?;
        let logits = tape.reshape(logits, vec![n, p_count])?;
        self.ensure_finite(tape, logits, "score")?;
        let y_next = tape.softmax(logits, 1)?;

        Ok(ForwardPass {
            y_next,
            features: feat,
            param_vars: vars,
            degenerate_points,
        })
    }

    /// One refinement step without gradients: returns the next
    /// segmentation tensor and the degenerate-point count.
    pub fn apply(&self, ctx: &CloudContext, y: &Tensor) -> Result<(Tensor, usize)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, ctx, y, false)?;
        Ok((tape.value(pass.y_next).clone(), pass.degenerate_points))
    }

    fn ensure_finite(&self, tape: &Tape, var: Var, layer: &str) -> Result<()> {
        if !tape.value(var).is_finite() {
            return Err(Error::NonFinite {
                layer: layer.to_string(),
            });
        }
        Ok(())
    }

    /// `sigmoid(x)` assembled from the softmax primitive: softmax over
    /// the pair `(x, 0)` yields `e^x / (e^x + 1)` in its first lane.
    fn sigmoid(&self, tape: &mut Tape, x: Var, len: usize) -> Result<Var> {
        let flat = tape.reshape(x, vec![len, 1])?;
        let zeros = tape.constant(&Tensor::zeros(vec![len, 1], self.config.dtype));
        let pair = tape.concat(&[flat, zeros], 1)?;
        let sm = tape.softmax(pair, 1)?;
        tape.slice(sm, 1, 0, 1)
    }

    pub fn to_checkpoint(&self, description: &str) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::default();
        meta.description = description.to_string();
        meta.extra
            .insert("kind".to_string(), "part-network".to_string());
        meta.extra
            .insert("config".to_string(), serde_json::to_string(&self.config)?);
        let mut cp = Checkpoint::new(meta);
        for (name, tensor) in &self.params {
            cp.insert(name, tensor.clone())?;
        }
        Ok(cp)
    }

    /// Rebuilds a network from a checkpoint, verifying that every
    /// expected parameter is present with the right shape. Extra records
    /// (optimizer state) are ignored.
    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let config_json = cp
            .meta
            .extra
            .get("config")
            .ok_or_else(|| Error::Checkpoint("missing config entry in metadata".into()))?;
        let config: NetConfig = serde_json::from_str(config_json)?;
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape, _) in param_specs(&config) {
            let tensor = cp
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            params.insert(name, tensor.clone());
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>, description: &str) -> Result<()> {
        self.to_checkpoint(description)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
