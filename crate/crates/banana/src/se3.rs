//! Rigid motions and their part-indexed action on pointclouds.
//!
//! Points are row vectors, so a transform acts as `x' = x*R + t` and
//! composition reads left to right through the matrix product. A
//! [`PartTransform`] carries one rigid motion per part and moves a cloud
//! through the segmentation-weighted blend of the per-part images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{DType, Tensor};
use crate::{Error, Result};

const ORTHO_ACCEPT: f64 = 1e-9;
const ORTHO_REPAIR: f64 = 1e-6;

type Mat3 = [[f64; 3]; 3];
type Vec3 = [f64; 3];

fn mat_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn inv3(a: &Mat3) -> Option<Mat3> {
    let d = det3(a);
    if d.abs() < 1e-300 {
        return None;
    }
    let inv_d = 1.0 / d;
    let mut c = [[0.0; 3]; 3];
    c[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_d;
    c[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_d;
    c[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_d;
    c[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_d;
    c[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_d;
    c[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_d;
    c[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_d;
    c[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_d;
    c[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_d;
    Some(c)
}

fn row_mul(x: &Vec3, r: &Mat3) -> Vec3 {
    [
        x[0] * r[0][0] + x[1] * r[1][0] + x[2] * r[2][0],
        x[0] * r[0][1] + x[1] * r[1][1] + x[2] * r[2][1],
        x[0] * r[0][2] + x[1] * r[1][2] + x[2] * r[2][2],
    ]
}

fn ortho_error(r: &Mat3) -> f64 {
    let g = mat_mul(&mat_transpose(r), r);
    let mut err = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((g[i][j] - target).abs());
        }
    }
    err
}

/// Nearest-rotation projection by Newton iteration on the polar factor,
/// `X <- (X + X^-T) / 2`. Converges quadratically for matrices already
/// close to orthogonal, which is the only regime we repair.
fn polar_orthonormalize(m: &Mat3) -> Option<Mat3> {
    let mut x = *m;
    for _ in 0..30 {
        if ortho_error(&x) < 1e-14 {
            break;
        }
        let inv_t = mat_transpose(&inv3(&x)?);
        for i in 0..3 {
            for j in 0..3 {
                x[i][j] = 0.5 * (x[i][j] + inv_t[i][j]);
            }
        }
    }
    Some(x)
}

/// A proper rigid motion acting on row-vector points as `x*R + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    r: Mat3,
    t: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            r: mat_identity(),
            t: [0.0; 3],
        }
    }

    /// Builds a transform from an explicit matrix and translation.
    ///
    /// The matrix must be a proper rotation. Deviations up to `1e-6` in
    /// orthonormality are repaired by polar projection; anything worse, or
    /// any reflection, is rejected.
    pub fn new(r: Mat3, t: Vec3) -> Result<Self> {
        for row in &r {
            for v in row {
                if !v.is_finite() {
                    return Err(Error::InvalidRotation {
                        reason: "non-finite matrix entry".into(),
                    });
                }
            }
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation {
                reason: "non-finite translation entry".into(),
            });
        }
        let err = ortho_error(&r);
        let r = if err <= ORTHO_ACCEPT {
            r
        } else if err <= ORTHO_REPAIR {
            let fixed = polar_orthonormalize(&r).ok_or_else(|| Error::InvalidRotation {
                reason: format!("orthonormalization failed, deviation {err:.3e}"),
            })?;
            if ortho_error(&fixed) > ORTHO_ACCEPT {
                return Err(Error::InvalidRotation {
                    reason: format!("orthonormalization stalled, deviation {err:.3e}"),
                });
            }
            fixed
        } else {
            return Err(Error::InvalidRotation {
                reason: format!("matrix is not orthonormal, deviation {err:.3e}"),
            });
        };
        let d = det3(&r);
        if (d - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidRotation {
                reason: format!("determinant {d:.6} is not +1"),
            });
        }
        Ok(Self { r, t })
    }

    /// Rotation by `angle` radians about `axis` through the origin,
    /// counterclockwise when viewed against the axis direction.
    pub fn rotation_about_axis(axis: Vec3, angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidArgument {
                op: "rotation_about_axis",
                reason: "axis must be a nonzero finite vector".into(),
            });
        }
        if !angle.is_finite() {
            return Err(Error::InvalidArgument {
                op: "rotation_about_axis",
                reason: "angle must be finite".into(),
            });
        }
        let (ux, uy, uz) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let oc = 1.0 - c;
        // Rodrigues formula for column vectors, transposed into row form.
        let col = [
            [c + ux * ux * oc, ux * uy * oc - uz * s, ux * uz * oc + uy * s],
            [uy * ux * oc + uz * s, c + uy * uy * oc, uy * uz * oc - ux * s],
            [uz * ux * oc - uy * s, uz * uy * oc + ux * s, c + uz * uz * oc],
        ];
        Ok(Self {
            r: mat_transpose(&col),
            t: [0.0; 3],
        })
    }

    /// Same rotation but about an axis through `pivot` rather than the
    /// origin, so the pivot itself stays fixed.
    pub fn rotation_about_axis_with_pivot(axis: Vec3, angle: f64, pivot: Vec3) -> Result<Self> {
        let mut rot = Self::rotation_about_axis(axis, angle)?;
        let moved = row_mul(&pivot, &rot.r);
        rot.t = [pivot[0] - moved[0], pivot[1] - moved[1], pivot[2] - moved[2]];
        Ok(rot)
    }

    /// Converts a scalar-first quaternion `[w, x, y, z]` to a transform
    /// with zero translation. The quaternion is normalized first.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidArgument {
                op: "from_quaternion",
                reason: "quaternion norm is zero or non-finite".into(),
            });
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let col = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        Ok(Self {
            r: mat_transpose(&col),
            t: [0.0; 3],
        })
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            r: mat_identity(),
            t,
        }
    }

    pub fn rotation_matrix(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation_vec(&self) -> &Vec3 {
        &self.t
    }

    /// `self.compose(&inner)` applies `inner` first and `self` second.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        let r = mat_mul(&inner.r, &self.r);
        let ti = row_mul(&inner.t, &self.r);
        RigidTransform {
            r,
            t: [ti[0] + self.t[0], ti[1] + self.t[1], ti[2] + self.t[2]],
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = mat_transpose(&self.r);
        let ti = row_mul(&self.t, &rt);
        RigidTransform {
            r: rt,
            t: [-ti[0], -ti[1], -ti[2]],
        }
    }

    pub fn apply_point(&self, x: Vec3) -> Vec3 {
        let m = row_mul(&x, &self.r);
        [m[0] + self.t[0], m[1] + self.t[1], m[2] + self.t[2]]
    }

    /// Applies the motion to every row of an `[N, 3]` tensor.
    pub fn apply(&self, points: &Tensor) -> Result<Tensor> {
        let shape = points.shape();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::InvalidArgument {
                op: "apply",
                reason: format!("expected [N, 3] points, got {shape:?}"),
            });
        }
        let n = shape[0];
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let row = [
                points.data()[3 * i],
                points.data()[3 * i + 1],
                points.data()[3 * i + 2],
            ];
            let y = self.apply_point(row);
            out[3 * i] = y[0];
            out[3 * i + 1] = y[1];
            out[3 * i + 2] = y[2];
        }
        Tensor::from_vec(vec![n, 3], out, points.dtype())
    }

    /// Draws a rotation uniform over SO(3) (Shoemake's subgroup-algorithm
    /// quaternion construction) and a translation uniform over the cube
    /// `[-t_max, t_max]^3`.
    pub fn sample_random<R: Rng>(rng: &mut R, t_max: f64) -> RigidTransform {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let two_pi = 2.0 * std::f64::consts::PI;
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        let q = [
            b * (two_pi * u3).cos(),
            a * (two_pi * u2).sin(),
            a * (two_pi * u2).cos(),
            b * (two_pi * u3).sin(),
        ];
        let mut out = Self::from_quaternion(q).expect("unit quaternion is always valid");
        for c in &mut out.t {
            *c = rng.gen_range(-t_max..=t_max);
        }
        out
    }
}

/// One rigid motion per part, acting on a cloud through segmentation
/// weights: row `n` maps to the `y`-weighted average of its per-part
/// images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTransform {
    parts: Vec<RigidTransform>,
}

impl PartTransform {
    pub fn new(parts: Vec<RigidTransform>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "PartTransform::new",
                reason: "need at least one part".into(),
            });
        }
        Ok(Self { parts })
    }

    pub fn identity(num_parts: usize) -> Result<Self> {
        Self::new(vec![RigidTransform::identity(); num_parts])
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[RigidTransform] {
        &self.parts
    }

    pub fn part(&self, p: usize) -> &RigidTransform {
        &self.parts[p]
    }

    pub fn inverse(&self) -> PartTransform {
        PartTransform {
            parts: self.parts.iter().map(|a| a.inverse()).collect(),
        }
    }

    pub fn compose(&self, inner: &PartTransform) -> Result<PartTransform> {
        if self.parts.len() != inner.parts.len() {
            return Err(Error::PartCountMismatch {
                lhs: self.parts.len(),
                rhs: inner.parts.len(),
            });
        }
        Ok(PartTransform {
            parts: self
                .parts
                .iter()
                .zip(&inner.parts)
                .map(|(a, b)| a.compose(b))
                .collect(),
        })
    }

    /// Moves `points` (`[N, 3]`) under segmentation `weights` (`[N, P]`):
    /// `x'_n = sum_p y_np (x_n R_p + t_p)`.
    ///
    /// For one-hot weights each row lands exactly on its own part's image;
    /// soft rows land on a convex blend.
    pub fn act(&self, points: &Tensor, weights: &Tensor) -> Result<Tensor> {
        let ps = points.shape();
        let ws = weights.shape();
        if ps.len() != 2 || ps[1] != 3 {
            return Err(Error::InvalidArgument {
                op: "act",
                reason: format!("expected [N, 3] points, got {ps:?}"),
            });
        }
        if ws.len() != 2 || ws[0] != ps[0] {
            return Err(Error::ShapeMismatch {
                op: "act",
                lhs: ps.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if ws[1] != self.parts.len() {
            return Err(Error::PartCountMismatch {
                lhs: self.parts.len(),
                rhs: ws[1],
            });
        }
        let n = ps[0];
        let p_count = self.parts.len();
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let x = [
                points.data()[3 * i],
                points.data()[3 * i + 1],
                points.data()[3 * i + 2],
            ];
            let mut acc = [0.0; 3];
            for p in 0..p_count {
                let w = weights.data()[i * p_count + p];
                if w == 0.0 {
                    continue;
                }
                let img = self.parts[p].apply_point(x);
                acc[0] += w * img[0];
                acc[1] += w * img[1];
                acc[2] += w * img[2];
            }
            out[3 * i] = acc[0];
            out[3 * i + 1] = acc[1];
            out[3 * i + 2] = acc[2];
        }
        Tensor::from_vec(vec![n, 3], out, points.dtype())
    }

    pub fn sample_random<R: Rng>(rng: &mut R, num_parts: usize, t_max: f64) -> Result<PartTransform> {
        if num_parts == 0 {
            return Err(Error::InvalidArgument {
                op: "PartTransform::sample_random",
                reason: "need at least one part".into(),
            });
        }
        Ok(PartTransform {
            parts: (0..num_parts)
                .map(|_| RigidTransform::sample_random(rng, t_max))
                .collect(),
        })
    }
}

/// A pointcloud with optional integer part labels, one label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointcloud {
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Pointcloud {
    pub fn new(points: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let shape = points.shape();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::InvalidArgument {
                op: "Pointcloud::new",
                reason: format!("expected [N, 3] points, got {shape:?}"),
            });
        }
        if let Some(l) = &labels {
            if l.len() != shape[0] {
                return Err(Error::InvalidArgument {
                    op: "Pointcloud::new",
                    reason: format!("{} labels for {} points", l.len(), shape[0]),
                });
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses the plain-text format: one point per line as `x y z` or
    /// `x y z label`, with `#` starting a comment and blank lines skipped.
    /// Every data line must use the same column count.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut coords: Vec<f64> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let mut has_labels: Option<bool> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                reason,
            };
            if fields.len() != 3 && fields.len() != 4 {
                return Err(err(format!(
                    "expected 3 or 4 columns, found {}",
                    fields.len()
                )));
            }
            let with_label = fields.len() == 4;
            match has_labels {
                None => has_labels = Some(with_label),
                Some(prev) if prev != with_label => {
                    return Err(err("inconsistent column count across lines".into()));
                }
                _ => {}
            }
            for f in &fields[..3] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(format!("invalid coordinate {f:?}")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite coordinate {f:?}")));
                }
                coords.push(v);
            }
            if with_label {
                let l: usize = fields[3]
                    .parse()
                    .map_err(|_| err(format!("invalid label {:?}", fields[3])))?;
                labels.push(l);
            }
        }
        let n = coords.len() / 3;
        let points = Tensor::from_vec(vec![n, 3], coords, DType::F64)?;
        let labels = if has_labels == Some(true) {
            Some(labels)
        } else {
            None
        };
        Pointcloud::new(points, labels)
    }

    /// Renders the text format written by [`Pointcloud::parse`]'s inverse.
    /// Coordinates print in shortest round-trip form, so parse(render(c))
    /// reproduces `c` bit for bit.
    pub fn render(&self) -> String {
        let n = self.len();
        let mut out = String::new();
        for i in 0..n {
            let x = self.points.data()[3 * i];
            let y = self.points.data()[3 * i + 1];
            let z = self.points.data()[3 * i + 2];
            match &self.labels {
                Some(l) => out.push_str(&format!("{x} {y} {z} {}\n", l[i])),
                None => out.push_str(&format!("{x} {y} {z}\n")),
            }
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    fn transforms_close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        let mut ok = true;
        for i in 0..3 {
            for j in 0..3 {
                ok &= close(a.r[i][j], b.r[i][j], tol);
            }
            ok &= close(a.t[i], b.t[i], tol);
        }
        ok
    }

    #[test]
    fn quarter_turn_about_z_sends_x_to_y() {
        let rot = RigidTransform::rotation_about_axis([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2)
            .unwrap();
        let y = rot.apply_point([1.0, 0.0, 0.0]);
        assert!(close(y[0], 0.0, 1e-15));
        assert!(close(y[1], 1.0, 1e-15));
        assert!(close(y[2], 0.0, 1e-15));
    }

    #[test]
    fn identity_apply_is_bitwise() {
        let mut rng = rng_from_seed(41);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let pts = Tensor::from_vec(vec![10, 3], data, DType::F64).unwrap();
        let out = RigidTransform::identity().apply(&pts).unwrap();
        assert!(out.bits_eq(&pts));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = rng_from_seed(42);
        for _ in 0..20 {
            let a = RigidTransform::sample_random(&mut rng, 2.0);
            let b = RigidTransform::sample_random(&mut rng, 2.0);
            let x = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let seq = a.apply_point(b.apply_point(x));
            let comp = a.compose(&b).apply_point(x);
            for k in 0..3 {
                assert!(close(seq[k], comp[k], 1e-12));
            }
        }
    }

    #[test]
    fn inverse_cancels() {
        let mut rng = rng_from_seed(43);
        for _ in 0..20 {
            let a = RigidTransform::sample_random(&mut rng, 2.0);
            let round = a.compose(&a.inverse());
            assert!(transforms_close(&round, &RigidTransform::identity(), 1e-12));
            let x = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let back = a.inverse().apply_point(a.apply_point(x));
            for k in 0..3 {
                assert!(close(back[k], x[k], 1e-12));
            }
        }
    }

    #[test]
    fn pivot_stays_fixed() {
        let mut rng = rng_from_seed(44);
        for _ in 0..10 {
            let pivot = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let axis = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
            ];
            let angle = rng.gen_range(-3.0..3.0);
            let rot =
                RigidTransform::rotation_about_axis_with_pivot(axis, angle, pivot).unwrap();
            let moved = rot.apply_point(pivot);
            for k in 0..3 {
                assert!(close(moved[k], pivot[k], 1e-12));
            }
        }
    }

    #[test]
    fn quaternion_agrees_with_axis_angle() {
        let angle = 0.83_f64;
        let q = [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()];
        let from_q = RigidTransform::from_quaternion(q).unwrap();
        let from_axis = RigidTransform::rotation_about_axis([0.0, 0.0, 1.0], angle).unwrap();
        assert!(transforms_close(&from_q, &from_axis, 1e-12));
    }

    #[test]
    fn validation_repairs_small_noise_and_rejects_garbage() {
        let mut rng = rng_from_seed(45);
        let base = RigidTransform::sample_random(&mut rng, 0.0);
        let mut noisy = *base.rotation_matrix();
        for row in &mut noisy {
            for v in row.iter_mut() {
                *v += rng.gen_range(-1e-7..1e-7);
            }
        }
        let repaired = RigidTransform::new(noisy, [0.0; 3]).unwrap();
        assert!(ortho_error(repaired.rotation_matrix()) < 1e-9);
        assert!(close(det3(repaired.rotation_matrix()), 1.0, 1e-9));

        let garbage = [[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            RigidTransform::new(garbage, [0.0; 3]),
            Err(Error::InvalidRotation { .. })
        ));

        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(matches!(
            RigidTransform::new(reflection, [0.0; 3]),
            Err(Error::InvalidRotation { .. })
        ));
    }

    #[test]
    fn random_rotations_have_zero_mean_entries() {
        let mut rng = rng_from_seed(46);
        let draws = 100_000;
        let mut sums = [[0.0f64; 3]; 3];
        for _ in 0..draws {
            let a = RigidTransform::sample_random(&mut rng, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    sums[i][j] += a.rotation_matrix()[i][j];
                }
            }
        }
        for row in &sums {
            for s in row {
                assert!(
                    (s / draws as f64).abs() < 0.02,
                    "mean entry {} too far from 0",
                    s / draws as f64
                );
            }
        }
    }

    #[test]
    fn part_action_picks_rows_by_binary_weights() {
        let mut rng = rng_from_seed(47);
        let a = RigidTransform::sample_random(&mut rng, 1.0);
        let b = RigidTransform::sample_random(&mut rng, 1.0);
        let motion = PartTransform::new(vec![a.clone(), b.clone()]).unwrap();
        let pts = Tensor::from_vec(
            vec![4, 3],
            vec![
                0.1, 0.2, 0.3, //
                -1.0, 0.5, 2.0, //
                3.0, -2.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
            DType::F64,
        )
        .unwrap();
        let y = Tensor::from_vec(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            DType::F64,
        )
        .unwrap();
        let out = motion.act(&pts, &y).unwrap();
        for (i, who) in [&a, &b, &a, &b].iter().enumerate() {
            let x = [
                pts.data()[3 * i],
                pts.data()[3 * i + 1],
                pts.data()[3 * i + 2],
            ];
            let expect = who.apply_point(x);
            for k in 0..3 {
                assert_eq!(out.data()[3 * i + k], expect[k]);
            }
        }
    }

    #[test]
    fn identity_part_action_is_bitwise_for_binary_weights() {
        let mut rng = rng_from_seed(48);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let pts = Tensor::from_vec(vec![8, 3], data, DType::F64).unwrap();
        let mut w = vec![0.0; 8 * 3];
        for i in 0..8 {
            w[i * 3 + i % 3] = 1.0;
        }
        let y = Tensor::from_vec(vec![8, 3], w, DType::F64).unwrap();
        let motion = PartTransform::identity(3).unwrap();
        let out = motion.act(&pts, &y).unwrap();
        assert!(out.bits_eq(&pts));
    }

    #[test]
    fn soft_weights_blend_part_images() {
        let a = RigidTransform::translation([1.0, 0.0, 0.0]);
        let b = RigidTransform::translation([0.0, 2.0, 0.0]);
        let motion = PartTransform::new(vec![a, b]).unwrap();
        let pts = Tensor::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0], DType::F64).unwrap();
        let y = Tensor::from_vec(vec![1, 2], vec![0.25, 0.75], DType::F64).unwrap();
        let out = motion.act(&pts, &y).unwrap();
        assert!(close(out.data()[0], 0.25, 1e-15));
        assert!(close(out.data()[1], 1.5, 1e-15));
        assert!(close(out.data()[2], 0.0, 1e-15));
    }

    #[test]
    fn part_count_mismatch_is_reported() {
        let motion = PartTransform::identity(2).unwrap();
        let pts = Tensor::zeros(vec![4, 3], DType::F64);
        let y = Tensor::zeros(vec![4, 3], DType::F64);
        assert!(matches!(
            motion.act(&pts, &y),
            Err(Error::PartCountMismatch { lhs: 2, rhs: 3 })
        ));
    }

    #[test]
    fn pointcloud_text_round_trip_is_bitwise() {
        let mut rng = rng_from_seed(49);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let pts = Tensor::from_vec(vec![5, 3], data, DType::F64).unwrap();
        let cloud = Pointcloud::new(pts, Some(vec![0, 1, 2, 1, 0])).unwrap();
        let text = cloud.render();
        let back = Pointcloud::parse(&text, "mem").unwrap();
        assert!(back.points.bits_eq(&cloud.points));
        assert_eq!(back.labels, cloud.labels);

        let unlabeled = Pointcloud::new(cloud.points.clone(), None).unwrap();
        let back2 = Pointcloud::parse(&unlabeled.render(), "mem").unwrap();
        assert!(back2.points.bits_eq(&unlabeled.points));
        assert_eq!(back2.labels, None);
    }

    #[test]
    fn pointcloud_parse_handles_comments_and_errors() {
        let ok = "# header\n1 2 3 0\n\n4 5 6 1 # trailing\n";
        let cloud = Pointcloud::parse(ok, "mem").unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.labels, Some(vec![0, 1]));

        let bad_float = "1 2 zebra\n";
        match Pointcloud::parse(bad_float, "f.txt") {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!(path, "f.txt");
                assert_eq!(line, 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let mixed = "1 2 3\n4 5 6 1\n";
        assert!(matches!(
            Pointcloud::parse(mixed, "m"),
            Err(Error::Parse { line: 2, .. })
        ));

        let wide = "1 2 3 4 5\n";
        assert!(matches!(Pointcloud::parse(wide, "w"), Err(Error::Parse { .. })));
    }

    #[test]
    fn cloud_motion_round_trip_through_files() {
        let mut rng = rng_from_seed(50);
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts = Tensor::from_vec(vec![10, 3], data, DType::F64).unwrap();
        let cloud = Pointcloud::new(pts, None).unwrap();
        let path = dir.path().join("cloud.txt");
        cloud.save(&path).unwrap();
        let loaded = Pointcloud::load(&path).unwrap();
        assert!(loaded.points.bits_eq(&cloud.points));
    }
}
