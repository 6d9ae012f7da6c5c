//! Toy articulated shapes with exact ground truth.
//!
//! Every generated cloud is literally a per-part rigid action applied to
//! a rest pose, so the segmentation labels and the motion that produced
//! the cloud are known without annotation. Shapes are built from box and
//! cylinder surfaces, hinged or free floating, with rest poses sized to
//! fit the unit ball.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::se3::{PartTransform, Pointcloud, RigidTransform};
use crate::seg::SoftSegmentation;
use crate::tensor::{DType, Tensor};
use crate::util::{rng_from_seed, subseed};
use crate::{Error, Result};

/// A surface to sample from, in its own local frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Primitive {
    /// Axis-aligned box with the given full extents, centered at the
    /// origin.
    Box { dims: [f64; 3] },
    /// Cylinder along the z axis, centered at the origin, with closed
    /// caps.
    Cylinder { radius: f64, height: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match self {
            Primitive::Box { dims: [a, b, c] } => 2.0 * (a * b + a * c + b * c),
            Primitive::Cylinder { radius, height } => {
                2.0 * std::f64::consts::PI * radius * (height + radius)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Box { dims } => dims.iter().all(|d| d.is_finite() && *d >= 0.0),
            Primitive::Cylinder { radius, height } => {
                radius.is_finite() && height.is_finite() && *radius >= 0.0 && *height >= 0.0
            }
        };
        if !ok || !(self.area() > 0.0) {
            return Err(Error::Config(format!(
                "primitive must have positive surface area: {self:?}"
            )));
        }
        Ok(())
    }

    /// Uniform sample on the surface, local frame.
    fn sample_point<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        match self {
            Primitive::Box { dims } => {
                let h = [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0];
                let faces = [
                    dims[1] * dims[2],
                    dims[1] * dims[2],
                    dims[0] * dims[2],
                    dims[0] * dims[2],
                    dims[0] * dims[1],
                    dims[0] * dims[1],
                ];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut face = 0;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                    face = i;
                }
                let axis = face / 2;
                let side = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                p[axis] = side * h[axis];
                let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
                for o in others {
                    p[o] = (rng.gen::<f64>() - 0.5) * dims[o];
                }
                p
            }
            Primitive::Cylinder { radius, height } => {
                let lateral = 2.0 * std::f64::consts::PI * radius * height;
                let caps = 2.0 * std::f64::consts::PI * radius * radius;
                let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                if rng.gen::<f64>() * (lateral + caps) < lateral {
                    let z = (rng.gen::<f64>() - 0.5) * height;
                    [radius * theta.cos(), radius * theta.sin(), z]
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if rng.gen::<bool>() { height / 2.0 } else { -height / 2.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
        }
    }
}

/// How a part is allowed to move relative to its rest placement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Motion {
    Fixed,
    /// Rotation about a pivot line. The axis is stored unit length and
    /// the range must sit within (-pi, pi].
    Hinge {
        axis: [f64; 3],
        pivot: [f64; 3],
        lo: f64,
        hi: f64,
    },
    /// Unconstrained rigid motion with translation bounded per axis.
    Free { t_max: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartSpec {
    pub shape: Primitive,
    /// Placement of the local frame in the assembled rest pose.
    pub place: RigidTransform,
    pub motion: Motion,
}

/// An articulated object in rest pose: parts, their motion ranges, and
/// the label groups that evaluation may treat as interchangeable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeTemplate {
    pub name: String,
    pub parts: Vec<PartSpec>,
    pub groups: Vec<Vec<usize>>,
}

pub const BUILTIN_TEMPLATES: [&str; 5] =
    ["oven", "cabinet", "eyeglasses", "scene2", "scene3"];

fn shift(t: [f64; 3]) -> Result<RigidTransform> {
    let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    RigidTransform::new(eye, t)
}

impl ShapeTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Config(format!("template {} has no parts", self.name)));
        }
        for part in &self.parts {
            part.shape.validate()?;
            if let Motion::Hinge { axis, lo, hi, .. } = &part.motion {
                let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "hinge axis must be unit length, got norm {norm}"
                    )));
                }
                if !(lo <= hi && *lo > -std::f64::consts::PI && *hi <= std::f64::consts::PI) {
                    return Err(Error::Config(format!(
                        "hinge range [{lo}, {hi}] must sit within (-pi, pi]"
                    )));
                }
            }
        }
        let mut seen = vec![false; self.parts.len()];
        for g in &self.groups {
            for &p in g {
                if p >= self.parts.len() || seen[p] {
                    return Err(Error::Config(
                        "groups must partition the part indices".into(),
                    ));
                }
                seen[p] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(
                "groups must partition the part indices".into(),
            ));
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// A named template at given per-part dimension scales. Joint
    /// pivots and part placements track the scaled dimensions, so a
    /// resized door still hangs on its hinge.
    pub fn build(name: &str, scales: &[[f64; 3]]) -> Result<ShapeTemplate> {
        let p = match name {
            "oven" => 2,
            "cabinet" => 3,
            "eyeglasses" => 3,
            "scene2" => 2,
            "scene3" => 3,
            _ => {
                return Err(Error::Config(format!(
                    "unknown template {name}; built-ins are {BUILTIN_TEMPLATES:?}"
                )))
            }
        };
        let ones = vec![[1.0, 1.0, 1.0]; p];
        let s = if scales.is_empty() { &ones[..] } else { scales };
        if s.len() != p {
            return Err(Error::Config(format!(
                "template {name} has {p} parts but {} scale triples were given",
                s.len()
            )));
        }
        for triple in s {
            if triple.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!("invalid scale triple {triple:?}")));
            }
        }
        let t = match name {
            "oven" => {
                let body = [0.7 * s[0][0], 0.7 * s[0][1], 0.7 * s[0][2]];
                let door = [0.04 * s[1][0], 0.64 * s[1][1], 0.64 * s[1][2]];
                // the panel sits proud of the face; coplanar sheets
                // would put opposite-label points at zero distance
                let door_x = body[0] / 2.0 + door[0] / 2.0 + 0.02 * s[1][0];
                ShapeTemplate {
                    name: name.to_string(),
                    parts: vec![
                        PartSpec {
                            shape: Primitive::Box { dims: body },
                            place: RigidTransform::identity(),
                            motion: Motion::Fixed,
                        },
                        PartSpec {
                            shape: Primitive::Box { dims: door },
                            place: shift([door_x, 0.0, 0.0])?,
                            motion: Motion::Hinge {
                                axis: [0.0, 1.0, 0.0],
                                pivot: [door_x, 0.0, -door[2] / 2.0],
                                lo: 0.0,
                                hi: 1.9,
                            },
                        },
                    ],
                    groups: vec![vec![0], vec![1]],
                }
            }
            "cabinet" => {
                let body = [0.55 * s[0][0], 0.5 * s[0][1], 0.45 * s[0][2]];
                let door = [0.03 * s[1][0], 0.5 * s[1][1], 0.26 * s[1][2]];
                let flap = [0.03 * s[2][0], 0.5 * s[2][1], 0.16 * s[2][2]];
                let face_x = body[0] / 2.0;
                let door_c = [
                    face_x + door[0] / 2.0 + 0.02 * s[1][0],
                    0.0,
                    body[2] / 2.0 - door[2] / 2.0,
                ];
                let flap_c = [
                    face_x + flap[0] / 2.0 + 0.02 * s[2][0],
                    0.0,
                    -body[2] / 2.0 + flap[2] / 2.0,
                ];
                ShapeTemplate {
                    name: name.to_string(),
                    parts: vec![
                        PartSpec {
                            shape: Primitive::Box { dims: body },
                            place: RigidTransform::identity(),
                            motion: Motion::Fixed,
                        },
                        PartSpec {
                            shape: Primitive::Box { dims: door },
                            place: shift(door_c)?,
                            motion: Motion::Hinge {
                                axis: [0.0, 0.0, 1.0],
                                pivot: [door_c[0], -door[1] / 2.0, door_c[2]],
                                lo: 0.0,
                                hi: 1.9,
                            },
                        },
                        PartSpec {
                            shape: Primitive::Box { dims: flap },
                            place: shift(flap_c)?,
                            motion: Motion::Hinge {
                                axis: [0.0, 1.0, 0.0],
                                pivot: [flap_c[0], 0.0, flap_c[2] - flap[2] / 2.0],
                                lo: 0.0,
                                hi: 1.5,
                            },
                        },
                    ],
                    groups: vec![vec![0], vec![1], vec![2]],
                }
            }
            "eyeglasses" => {
                let frame = [0.04 * s[0][0], 0.8 * s[0][1], 0.22 * s[0][2]];
                let t1 = [0.5 * s[1][0], 0.03 * s[1][1], 0.03 * s[1][2]];
                let t2 = [0.5 * s[2][0], 0.03 * s[2][1], 0.03 * s[2][2]];
                let hinge1 = [-frame[0] / 2.0, -frame[1] / 2.0 + t1[1] / 2.0, 0.0];
                let hinge2 = [-frame[0] / 2.0, frame[1] / 2.0 - t2[1] / 2.0, 0.0];
                ShapeTemplate {
                    name: name.to_string(),
                    parts: vec![
                        PartSpec {
                            shape: Primitive::Box { dims: frame },
                            place: RigidTransform::identity(),
                            motion: Motion::Fixed,
                        },
                        PartSpec {
                            shape: Primitive::Box { dims: t1 },
                            place: shift([hinge1[0] - t1[0] / 2.0, hinge1[1], 0.0])?,
                            motion: Motion::Hinge {
                                axis: [0.0, 0.0, 1.0],
                                pivot: hinge1,
                                lo: -1.55,
                                hi: 0.0,
                            },
                        },
                        PartSpec {
                            shape: Primitive::Box { dims: t2 },
                            place: shift([hinge2[0] - t2[0] / 2.0, hinge2[1], 0.0])?,
                            motion: Motion::Hinge {
                                axis: [0.0, 0.0, 1.0],
                                pivot: hinge2,
                                lo: 0.0,
                                hi: 1.55,
                            },
                        },
                    ],
                    groups: vec![vec![0], vec![1, 2]],
                }
            }
            "scene2" | "scene3" => {
                let mut parts = vec![
                    PartSpec {
                        shape: Primitive::Box {
                            dims: [0.5 * s[0][0], 0.3 * s[0][1], 0.2 * s[0][2]],
                        },
                        place: shift([-0.35, 0.0, 0.0])?,
                        motion: Motion::Free { t_max: 0.25 },
                    },
                    PartSpec {
                        shape: Primitive::Cylinder {
                            radius: 0.18 * s[1][0],
                            height: 0.5 * s[1][2],
                        },
                        place: shift([0.35, 0.0, 0.0])?,
                        motion: Motion::Free { t_max: 0.25 },
                    },
                ];
                if name == "scene3" {
                    parts.push(PartSpec {
                        shape: Primitive::Box {
                            dims: [0.22 * s[2][0], 0.22 * s[2][1], 0.22 * s[2][2]],
                        },
                        place: shift([0.0, 0.5, 0.0])?,
                        motion: Motion::Free { t_max: 0.25 },
                    });
                }
                let groups = (0..parts.len()).map(|i| vec![i]).collect();
                ShapeTemplate {
                    name: name.to_string(),
                    parts,
                    groups,
                }
            }
            _ => unreachable!(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn by_name(name: &str) -> Result<ShapeTemplate> {
        Self::build(name, &[])
    }

    /// Per-part dimension scales drawn uniformly within twenty percent
    /// of nominal.
    pub fn jitter_scales<R: Rng>(num_parts: usize, rng: &mut R) -> Vec<[f64; 3]> {
        (0..num_parts)
            .map(|_| {
                let mut t = [0.0; 3];
                for v in t.iter_mut() {
                    *v = 0.8 + 0.4 * rng.gen::<f64>();
                }
                t
            })
            .collect()
    }

    /// Rest-pose surface sample with one label per point. Parts receive
    /// points by area-weighted draws, so part sizes follow a binomial
    /// law rather than a fixed quota.
    pub fn sample_rest<R: Rng>(
        &self,
        n_points: usize,
        rng: &mut R,
    ) -> Result<(Tensor, SoftSegmentation)> {
        let p = self.num_parts();
        if n_points < p {
            return Err(Error::InvalidArgument {
                op: "sample_rest",
                reason: format!("{n_points} points cannot cover {p} parts"),
            });
        }
        let areas: Vec<f64> = self.parts.iter().map(|ps| ps.shape.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut data = Vec::with_capacity(n_points * 3);
        let mut labels = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let mut pick = rng.gen::<f64>() * total;
            let mut part = p - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    part = i;
                    break;
                }
                pick -= a;
            }
            let local = self.parts[part].shape.sample_point(rng);
            let world = self.parts[part].place.apply_point(local);
            data.extend(world);
            labels.push(part);
        }
        let x = Tensor::from_vec(vec![n_points, 3], data, DType::F64)?;
        let y = SoftSegmentation::from_labels(&labels, p)?;
        Ok((x, y))
    }

    /// Random articulation state: hinge angles drawn uniformly from
    /// their ranges, free parts given random rigid motions, fixed parts
    /// left alone. Returns the per-part action and the angle list
    /// (zero for non-hinge parts).
    pub fn sample_state<R: Rng>(&self, rng: &mut R) -> Result<(PartTransform, Vec<f64>)> {
        let mut transforms = Vec::with_capacity(self.parts.len());
        let mut angles = Vec::with_capacity(self.parts.len());
        for part in &self.parts {
            match &part.motion {
                Motion::Fixed => {
                    transforms.push(RigidTransform::identity());
                    angles.push(0.0);
                }
                Motion::Hinge { axis, pivot, lo, hi } => {
                    let theta = lo + (hi - lo) * rng.gen::<f64>();
                    transforms.push(RigidTransform::rotation_about_axis_with_pivot(
                        *axis, theta, *pivot,
                    )?);
                    angles.push(theta);
                }
                Motion::Free { t_max } => {
                    transforms.push(RigidTransform::sample_random(rng, *t_max));
                    angles.push(0.0);
                }
            }
        }
        Ok((PartTransform::new(transforms)?, angles))
    }

    /// Articulation state from explicit hinge angles. Fixed parts must
    /// be given angle zero and free parts are not expressible here.
    pub fn state_from_angles(&self, angles: &[f64]) -> Result<PartTransform> {
        if angles.len() != self.parts.len() {
            return Err(Error::InvalidArgument {
                op: "state_from_angles",
                reason: format!(
                    "{} angles for {} parts",
                    angles.len(),
                    self.parts.len()
                ),
            });
        }
        let mut transforms = Vec::with_capacity(self.parts.len());
        for (part, &theta) in self.parts.iter().zip(angles) {
            match &part.motion {
                Motion::Fixed => {
                    if theta != 0.0 {
                        return Err(Error::InvalidArgument {
                            op: "state_from_angles",
                            reason: format!("fixed part given angle {theta}"),
                        });
                    }
                    transforms.push(RigidTransform::identity());
                }
                Motion::Hinge { axis, pivot, lo, hi } => {
                    if !(theta >= *lo && theta <= *hi) {
                        return Err(Error::AngleOutOfRange {
                            angle: theta,
                            lo: *lo,
                            hi: *hi,
                        });
                    }
                    if theta == 0.0 {
                        transforms.push(RigidTransform::identity());
                    } else {
                        transforms.push(RigidTransform::rotation_about_axis_with_pivot(
                            *axis, theta, *pivot,
                        )?);
                    }
                }
                Motion::Free { .. } => {
                    return Err(Error::InvalidArgument {
                        op: "state_from_angles",
                        reason: "free parts have no angle parameterization".into(),
                    });
                }
            }
        }
        PartTransform::new(transforms)
    }
}

/// One generated cloud with everything that produced it.
#[derive(Debug, Clone)]
pub struct SampledInstance {
    pub x: Tensor,
    pub y_gt: SoftSegmentation,
    pub rest: Tensor,
    pub motion: PartTransform,
    pub angles: Vec<f64>,
    pub template: String,
}

/// Applies an articulation state to a rest-pose sample. The result
/// satisfies `x == motion.act(rest, y_gt)` by construction.
pub fn articulate(
    template: &ShapeTemplate,
    rest: &Tensor,
    y_gt: &SoftSegmentation,
    motion: &PartTransform,
    angles: Vec<f64>,
) -> Result<SampledInstance> {
    let x = motion.act(rest, y_gt.tensor())?;
    Ok(SampledInstance {
        x,
        y_gt: y_gt.clone(),
        rest: rest.clone(),
        motion: motion.clone(),
        angles,
        template: template.name.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub templates: Vec<String>,
    pub out_dir: PathBuf,
    /// Rest-pose instances per template.
    pub train_per_template: usize,
    /// Articulations of the training instances per template.
    pub test_states_per_template: usize,
    /// Articulations of freshly jittered instances per template.
    pub test_instances_per_template: usize,
    pub points_per_cloud: usize,
    pub seed: u64,
}

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_TEST_STATES: &str = "test_states";
pub const SPLIT_TEST_INSTANCES: &str = "test_instances";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub template: String,
    pub split: String,
    pub seed: u64,
    pub angles: Vec<f64>,
}

fn instance_seed(spec_seed: u64, template: &str, split: &str, index: usize) -> u64 {
    subseed(spec_seed, &format!("inst-{template}-{split}-{index}"))
}

fn state_seed(spec_seed: u64, template: &str, split: &str, index: usize) -> u64 {
    subseed(spec_seed, &format!("state-{template}-{split}-{index}"))
}

/// Builds the sample a manifest slot describes. Training slots are rest
/// states of per-instance jittered templates. Test-state slots reuse a
/// training instance (same jitter, same rest points) under a fresh
/// articulation; test-instance slots jitter a new instance as well.
fn generate_slot(spec: &DatasetSpec, template: &str, split: &str, index: usize) -> Result<(SampledInstance, u64)> {
    let (inst_split, inst_index) = if split == SPLIT_TEST_STATES {
        (SPLIT_TRAIN, index % spec.train_per_template.max(1))
    } else {
        (split, index)
    };
    let inst_seed = instance_seed(spec.seed, template, inst_split, inst_index);
    let mut jitter_rng = rng_from_seed(subseed(inst_seed, "jitter"));
    let base = ShapeTemplate::by_name(template)?;
    let scales = ShapeTemplate::jitter_scales(base.num_parts(), &mut jitter_rng);
    let shape = ShapeTemplate::build(template, &scales)?;
    let mut point_rng = rng_from_seed(subseed(inst_seed, "points"));
    let (rest, y_gt) = shape.sample_rest(spec.points_per_cloud, &mut point_rng)?;
    if split == SPLIT_TRAIN {
        let motion = PartTransform::identity(shape.num_parts())?;
        let angles = vec![0.0; shape.num_parts()];
        let inst = articulate(&shape, &rest, &y_gt, &motion, angles)?;
        Ok((inst, inst_seed))
    } else {
        let sseed = state_seed(spec.seed, template, split, index);
        let mut state_rng = rng_from_seed(sseed);
        let (motion, angles) = shape.sample_state(&mut state_rng)?;
        let inst = articulate(&shape, &rest, &y_gt, &motion, angles)?;
        Ok((inst, sseed))
    }
}

/// Writes cloud files and a `manifest.json` listing them. Everything is
/// a pure function of the spec, so two runs produce identical bytes.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<ManifestEntry>> {
    if spec.templates.is_empty() {
        return Err(Error::Config("dataset needs at least one template".into()));
    }
    fs::create_dir_all(&spec.out_dir)?;
    let mut manifest = Vec::new();
    for template in &spec.templates {
        let counts = [
            (SPLIT_TRAIN, spec.train_per_template),
            (SPLIT_TEST_STATES, spec.test_states_per_template),
            (SPLIT_TEST_INSTANCES, spec.test_instances_per_template),
        ];
        for (split, count) in counts {
            for index in 0..count {
                let (inst, entry_seed) = generate_slot(spec, template, split, index)?;
                let file = format!("{template}_{split}_{index:03}.xyz");
                let labels = inst.y_gt.argmax_labels();
                let cloud = Pointcloud::new(inst.x.clone(), Some(labels))?;
                cloud.save(&spec.out_dir.join(&file))?;
                manifest.push(ManifestEntry {
                    file,
                    template: template.clone(),
                    split: split.to_string(),
                    seed: entry_seed,
                    angles: inst.angles.clone(),
                });
            }
        }
    }
    write_manifest(&spec.out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one manifest entry's cloud and reconstitutes its binary
/// segmentation from the label column.
pub fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<(Tensor, SoftSegmentation)> {
    let template = ShapeTemplate::by_name(&entry.template)?;
    let cloud = Pointcloud::load(&dir.join(&entry.file))?;
    let labels = cloud.labels.ok_or_else(|| Error::InvalidArgument {
        op: "load_entry",
        reason: format!("{} has no label column", entry.file),
    })?;
    let y = SoftSegmentation::from_labels(&labels, template.num_parts())?;
    Ok((cloud.points, y))
}

/// Groups manifest entries by split, preserving manifest order.
pub fn entries_by_split<'a>(
    entries: &'a [ManifestEntry],
) -> BTreeMap<&'a str, Vec<&'a ManifestEntry>> {
    let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        map.entry(e.split.as_str()).or_default().push(e);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cube() -> ShapeTemplate {
        ShapeTemplate {
            name: "cube".into(),
            parts: vec![PartSpec {
                shape: Primitive::Box {
                    dims: [0.4, 0.4, 0.4],
                },
                place: RigidTransform::identity(),
                motion: Motion::Fixed,
            }],
            groups: vec![vec![0]],
        }
    }

    fn twin_cubes() -> ShapeTemplate {
        ShapeTemplate {
            name: "twins".into(),
            parts: vec![
                PartSpec {
                    shape: Primitive::Box {
                        dims: [0.3, 0.3, 0.3],
                    },
                    place: shift([-0.5, 0.0, 0.0]).unwrap(),
                    motion: Motion::Fixed,
                },
                PartSpec {
                    shape: Primitive::Box {
                        dims: [0.3, 0.3, 0.3],
                    },
                    place: shift([0.5, 0.0, 0.0]).unwrap(),
                    motion: Motion::Fixed,
                },
            ],
            groups: vec![vec![0], vec![1]],
        }
    }

    /// Distance from a world point to a part's surface, by inverting
    /// the placement and checking the local primitive analytically.
    fn surface_distance(part: &PartSpec, world: [f64; 3]) -> f64 {
        let local = part.place.inverse().apply_point(world);
        match &part.shape {
            Primitive::Box { dims } => {
                let h = [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0];
                let inside = (0..3).all(|i| local[i].abs() <= h[i] + 1e-9);
                let face_gap = (0..3)
                    .map(|i| (h[i] - local[i].abs()).abs())
                    .fold(f64::INFINITY, f64::min);
                if inside {
                    face_gap
                } else {
                    f64::INFINITY
                }
            }
            Primitive::Cylinder { radius, height } => {
                let r = (local[0] * local[0] + local[1] * local[1]).sqrt();
                let on_side = (r - radius).abs();
                let on_cap = if r <= radius + 1e-9 {
                    (local[2].abs() - height / 2.0).abs()
                } else {
                    f64::INFINITY
                };
                if local[2].abs() <= height / 2.0 + 1e-9 {
                    on_side.min(on_cap)
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    #[test]
    fn single_part_template_labels_everything_zero() {
        let t = single_cube();
        let mut rng = rng_from_seed(11);
        let (x, y) = t.sample_rest(50, &mut rng).unwrap();
        assert_eq!(x.shape(), &[50, 3]);
        assert!(y.argmax_labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn too_few_points_rejected() {
        let t = twin_cubes();
        let mut rng = rng_from_seed(12);
        assert!(t.sample_rest(1, &mut rng).is_err());
    }

    #[test]
    fn equal_area_parts_split_points_binomially() {
        let t = twin_cubes();
        let mut rng = rng_from_seed(13);
        let (_, y) = t.sample_rest(1000, &mut rng).unwrap();
        let count0 = y.argmax_labels().iter().filter(|&&l| l == 0).count();
        assert!(
            (440..=560).contains(&count0),
            "part 0 received {count0} of 1000 points"
        );
    }

    #[test]
    fn box_faces_receive_points_by_area() {
        let t = ShapeTemplate {
            name: "slab".into(),
            parts: vec![PartSpec {
                shape: Primitive::Box {
                    dims: [0.4, 0.2, 0.1],
                },
                place: RigidTransform::identity(),
                motion: Motion::Fixed,
            }],
            groups: vec![vec![0]],
        };
        let mut rng = rng_from_seed(14);
        let (x, _) = t.sample_rest(4000, &mut rng).unwrap();
        // face areas: z faces 0.08 each, y faces 0.04, x faces 0.02
        let mut counts = [0usize; 3];
        for i in 0..4000 {
            let p = [x.data()[3 * i], x.data()[3 * i + 1], x.data()[3 * i + 2]];
            let h = [0.2, 0.1, 0.05];
            let axis = (0..3)
                .min_by(|&a, &b| {
                    let da = (p[a].abs() - h[a]).abs();
                    let db = (p[b].abs() - h[b]).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            counts[axis] += 1;
        }
        let total_area = 2.0 * (0.4 * 0.2 + 0.4 * 0.1 + 0.2 * 0.1);
        let expect = [
            4000.0 * 2.0 * 0.02 / total_area,
            4000.0 * 2.0 * 0.04 / total_area,
            4000.0 * 2.0 * 0.08 / total_area,
        ];
        for a in 0..3 {
            let dev = (counts[a] as f64 - expect[a]).abs();
            assert!(
                dev < 4.0 * expect[a].sqrt() + 20.0,
                "axis {a}: {} points, expected {:.0}",
                counts[a],
                expect[a]
            );
        }
    }

    #[test]
    fn cylinder_splits_lateral_and_caps_by_area() {
        let t = ShapeTemplate {
            name: "tube".into(),
            parts: vec![PartSpec {
                shape: Primitive::Cylinder {
                    radius: 0.2,
                    height: 0.5,
                },
                place: RigidTransform::identity(),
                motion: Motion::Fixed,
            }],
            groups: vec![vec![0]],
        };
        let mut rng = rng_from_seed(15);
        let (x, _) = t.sample_rest(3000, &mut rng).unwrap();
        let mut lateral = 0usize;
        for i in 0..3000 {
            let p = [x.data()[3 * i], x.data()[3 * i + 1], x.data()[3 * i + 2]];
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if (r - 0.2).abs() < 1e-9 {
                lateral += 1;
            } else {
                assert!((p[2].abs() - 0.25).abs() < 1e-9, "point off surface");
            }
        }
        // lateral fraction h / (h + r) = 0.5 / 0.7
        let expect = 3000.0 * 0.5 / 0.7;
        assert!(
            (lateral as f64 - expect).abs() < 100.0,
            "lateral count {lateral}, expected {expect:.0}"
        );
    }

    #[test]
    fn builtin_samples_lie_on_their_part_surfaces() {
        for name in BUILTIN_TEMPLATES {
            let t = ShapeTemplate::by_name(name).unwrap();
            let mut rng = rng_from_seed(16);
            let (x, y) = t.sample_rest(300, &mut rng).unwrap();
            let labels = y.argmax_labels();
            for i in 0..300 {
                let p = [x.data()[3 * i], x.data()[3 * i + 1], x.data()[3 * i + 2]];
                let d = surface_distance(&t.parts[labels[i]], p);
                assert!(d < 1e-9, "{name}: point {i} is {d} off its surface");
            }
        }
    }

    #[test]
    fn builtin_rest_shapes_fit_the_unit_ball() {
        for name in BUILTIN_TEMPLATES {
            let t = ShapeTemplate::by_name(name).unwrap();
            let mut rng = rng_from_seed(17);
            let (x, _) = t.sample_rest(500, &mut rng).unwrap();
            for i in 0..500 {
                let p = [x.data()[3 * i], x.data()[3 * i + 1], x.data()[3 * i + 2]];
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!(norm <= 1.0 + 1e-9, "{name}: rest point at radius {norm}");
            }
        }
    }

    #[test]
    fn jittered_builds_stay_valid_and_in_ball() {
        let mut rng = rng_from_seed(18);
        for name in BUILTIN_TEMPLATES {
            for _ in 0..20 {
                let base = ShapeTemplate::by_name(name).unwrap();
                let scales = ShapeTemplate::jitter_scales(base.num_parts(), &mut rng);
                for triple in &scales {
                    for v in triple {
                        assert!((0.8..=1.2).contains(v));
                    }
                }
                let t = ShapeTemplate::build(name, &scales).unwrap();
                let (x, _) = t.sample_rest(100, &mut rng).unwrap();
                for i in 0..100 {
                    let p = [x.data()[3 * i], x.data()[3 * i + 1], x.data()[3 * i + 2]];
                    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                    assert!(norm <= 1.0 + 1e-9, "{name} jittered: radius {norm}");
                }
            }
        }
    }

    #[test]
    fn zero_angles_reproduce_the_rest_pose_bitwise() {
        let t = ShapeTemplate::by_name("oven").unwrap();
        let mut rng = rng_from_seed(19);
        let (rest, y) = t.sample_rest(80, &mut rng).unwrap();
        let motion = t.state_from_angles(&[0.0, 0.0]).unwrap();
        let x = motion.act(&rest, y.tensor()).unwrap();
        assert!(x.bits_eq(&rest));
    }

    #[test]
    fn door_quarter_turn_rotates_about_the_hinge() {
        let t = ShapeTemplate::by_name("oven").unwrap();
        let theta = std::f64::consts::FRAC_PI_2;
        let motion = t.state_from_angles(&[0.0, theta]).unwrap();
        let (axis, pivot) = match &t.parts[1].motion {
            Motion::Hinge { axis, pivot, .. } => (*axis, *pivot),
            _ => unreachable!(),
        };
        assert_eq!(axis, [0.0, 1.0, 0.0]);
        // the pivot itself must not move
        let moved_pivot = motion.part(1).apply_point(pivot);
        for i in 0..3 {
            assert!((moved_pivot[i] - pivot[i]).abs() < 1e-12);
        }
        // an offset d along +z lands at +d along x after a quarter turn
        // about the y axis through the pivot
        let d = 0.3;
        let probe = [pivot[0], pivot[1], pivot[2] + d];
        let moved = motion.part(1).apply_point(probe);
        let expected = [pivot[0] + d, pivot[1], pivot[2]];
        for i in 0..3 {
            assert!(
                (moved[i] - expected[i]).abs() < 1e-12,
                "axis {i}: {} vs {}",
                moved[i],
                expected[i]
            );
        }
        // body points are untouched
        let body_probe = [0.1, 0.2, -0.1];
        let moved_body = motion.part(0).apply_point(body_probe);
        assert_eq!(moved_body, body_probe);
    }

    #[test]
    fn articulation_preserves_within_part_distances() {
        let t = ShapeTemplate::by_name("eyeglasses").unwrap();
        let mut rng = rng_from_seed(20);
        let (rest, y) = t.sample_rest(120, &mut rng).unwrap();
        let (motion, _) = t.sample_state(&mut rng).unwrap();
        let inst = articulate(&t, &rest, &y, &motion, vec![0.0; 3]).unwrap();
        let labels = y.argmax_labels();
        let pt = |t: &Tensor, i: usize| {
            [t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]]
        };
        for i in 0..120 {
            for j in (i + 1)..120 {
                if labels[i] != labels[j] {
                    continue;
                }
                let a0 = pt(&rest, i);
                let b0 = pt(&rest, j);
                let a1 = pt(&inst.x, i);
                let b1 = pt(&inst.x, j);
                let d0 = ((a0[0] - b0[0]).powi(2) + (a0[1] - b0[1]).powi(2)
                    + (a0[2] - b0[2]).powi(2))
                .sqrt();
                let d1 = ((a1[0] - b1[0]).powi(2) + (a1[1] - b1[1]).powi(2)
                    + (a1[2] - b1[2]).powi(2))
                .sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn articulated_points_match_per_part_transforms() {
        let t = ShapeTemplate::by_name("oven").unwrap();
        let mut rng = rng_from_seed(21);
        let (rest, y) = t.sample_rest(60, &mut rng).unwrap();
        let (motion, angles) = t.sample_state(&mut rng).unwrap();
        let inst = articulate(&t, &rest, &y, &motion, angles).unwrap();
        let labels = y.argmax_labels();
        for i in 0..60 {
            let p = [
                rest.data()[3 * i],
                rest.data()[3 * i + 1],
                rest.data()[3 * i + 2],
            ];
            let expected = motion.part(labels[i]).apply_point(p);
            for c in 0..3 {
                assert!((inst.x.data()[3 * i + c] - expected[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_and_malformed_angles_are_rejected() {
        let t = ShapeTemplate::by_name("oven").unwrap();
        match t.state_from_angles(&[0.0, 10.0]) {
            Err(Error::AngleOutOfRange { angle, lo, hi }) => {
                assert_eq!(angle, 10.0);
                assert_eq!(lo, 0.0);
                assert!((hi - 1.9).abs() < 1e-12);
            }
            other => panic!("expected angle range error, got {other:?}"),
        }
        assert!(t.state_from_angles(&[0.5, 0.5]).is_err());
        assert!(t.state_from_angles(&[0.0]).is_err());
        let scene = ShapeTemplate::by_name("scene2").unwrap();
        assert!(scene.state_from_angles(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn template_validation_rejects_bad_specs() {
        assert!(ShapeTemplate::by_name("teapot").is_err());
        assert!(ShapeTemplate::build("oven", &[[1.0, 1.0, 1.0]]).is_err());
        assert!(ShapeTemplate::build("oven", &[[1.0, 1.0, 1.0], [0.0, 1.0, 1.0]]).is_err());
        let mut bad_axis = ShapeTemplate::by_name("oven").unwrap();
        if let Motion::Hinge { axis, .. } = &mut bad_axis.parts[1].motion {
            *axis = [0.0, 2.0, 0.0];
        }
        assert!(bad_axis.validate().is_err());
        let mut bad_range = ShapeTemplate::by_name("oven").unwrap();
        if let Motion::Hinge { hi, .. } = &mut bad_range.parts[1].motion {
            *hi = 4.0;
        }
        assert!(bad_range.validate().is_err());
        let mut bad_groups = ShapeTemplate::by_name("oven").unwrap();
        bad_groups.groups = vec![vec![0]];
        assert!(bad_groups.validate().is_err());
        let zero_area = ShapeTemplate {
            name: "flatline".into(),
            parts: vec![PartSpec {
                shape: Primitive::Box {
                    dims: [0.0, 0.0, 0.0],
                },
                place: RigidTransform::identity(),
                motion: Motion::Fixed,
            }],
            groups: vec![vec![0]],
        };
        assert!(zero_area.validate().is_err());
    }

    fn small_spec(dir: &Path, seed: u64) -> DatasetSpec {
        DatasetSpec {
            templates: vec!["oven".into(), "scene2".into()],
            out_dir: dir.to_path_buf(),
            train_per_template: 2,
            test_states_per_template: 3,
            test_instances_per_template: 2,
            points_per_cloud: 40,
            seed,
        }
    }

    #[test]
    fn dataset_layout_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(dir.path(), 31);
        let manifest = make_dataset(&spec).unwrap();
        assert_eq!(manifest.len(), 2 * (2 + 3 + 2));
        let by_split = entries_by_split(&manifest);
        assert_eq!(by_split[SPLIT_TRAIN].len(), 4);
        assert_eq!(by_split[SPLIT_TEST_STATES].len(), 6);
        assert_eq!(by_split[SPLIT_TEST_INSTANCES].len(), 4);
        for e in &by_split[SPLIT_TRAIN] {
            assert!(e.angles.iter().all(|&a| a == 0.0));
        }
        let read_back = read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(read_back, manifest);
        for e in &manifest {
            let (x, y) = load_entry(dir.path(), e).unwrap();
            assert_eq!(x.shape(), &[40, 3]);
            assert!(y.is_binary());
        }
    }

    #[test]
    fn dataset_generation_is_bitwise_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = make_dataset(&small_spec(dir_a.path(), 32)).unwrap();
        let mb = make_dataset(&small_spec(dir_b.path(), 32)).unwrap();
        assert_eq!(ma, mb);
        for e in &ma {
            let a = fs::read(dir_a.path().join(&e.file)).unwrap();
            let b = fs::read(dir_b.path().join(&e.file)).unwrap();
            assert_eq!(a, b, "{} differs between runs", e.file);
        }
        let ja = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let jb = fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn test_states_articulate_the_training_instances() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(dir.path(), 33);
        make_dataset(&spec).unwrap();
        // slot 0 of test_states reuses training instance 0: same jitter,
        // same rest points, different motion
        let (train0, _) = generate_slot(&spec, "oven", SPLIT_TRAIN, 0).unwrap();
        let (states0, _) = generate_slot(&spec, "oven", SPLIT_TEST_STATES, 0).unwrap();
        assert!(states0.rest.bits_eq(&train0.rest));
        assert!(!states0.x.bits_eq(&train0.x));
        let (inst0, _) = generate_slot(&spec, "oven", SPLIT_TEST_INSTANCES, 0).unwrap();
        assert!(!inst0.rest.bits_eq(&train0.rest));
    }

    #[test]
    fn sampled_hinge_angles_cover_the_range_uniformly() {
        let t = ShapeTemplate::by_name("oven").unwrap();
        let mut rng = rng_from_seed(34);
        let mut bins = [0usize; 4];
        let (lo, hi) = match &t.parts[1].motion {
            Motion::Hinge { lo, hi, .. } => (*lo, *hi),
            _ => unreachable!(),
        };
        for _ in 0..400 {
            let (_, angles) = t.sample_state(&mut rng).unwrap();
            let a = angles[1];
            assert!(a >= lo && a <= hi);
            let bin = (((a - lo) / (hi - lo) * 4.0) as usize).min(3);
            bins[bin] += 1;
        }
        for (i, b) in bins.iter().enumerate() {
            assert!(
                (60..=140).contains(b),
                "bin {i} holds {b} of 400 samples"
            );
        }
    }
}
