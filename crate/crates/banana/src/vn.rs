//! Rotation-equivariant feature primitives.
//!
//! Features live in `[N, C, 3]` tensors: `C` channels of 3-vectors per
//! point. Linear maps mix channels only, so rotating every vector by the
//! same matrix commutes with them. The nonlinearity folds each vector
//! against a learned direction, and the invariant readout collapses
//! features to rotation-independent scalars through Gram products and
//! channel norms.

use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::util::std_normal;
use crate::{Error, Result};

const DIRECTION_EPS: f64 = 1e-8;

fn expect_feature(op: &'static str, t: &Tape, v: Var) -> Result<(usize, usize)> {
    let shape = t.value(v).shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::InvalidArgument {
            op,
            reason: format!("expected [N, C, 3] features, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1]))
}

/// Channel-mixing linear map: `w` is `[C_out, C_in]`, features are
/// `[N, C_in, 3]`, output is `[N, C_out, 3]`.
pub fn vn_linear(t: &mut Tape, w: Var, v: Var) -> Result<Var> {
    let (_, c_in) = expect_feature("vn_linear", t, v)?;
    let ws = t.value(w).shape();
    if ws.len() != 2 || ws[1] != c_in {
        return Err(Error::ShapeMismatch {
            op: "vn_linear",
            lhs: ws.to_vec(),
            rhs: t.value(v).shape().to_vec(),
        });
    }
    t.batched_matmul(w, v)
}

/// Directional rectifier. Each channel learns a probe direction
/// `d = U v`; where a vector points against its probe, the component
/// along the probe is removed. Vectors with a vanishing probe pass
/// through unchanged.
///
/// The against-probe indicator is taken from forward values and does not
/// propagate gradient, matching its almost-everywhere zero derivative.
pub fn vn_nonlinearity(t: &mut Tape, u: Var, v: Var) -> Result<Var> {
    let (n, c) = expect_feature("vn_nonlinearity", t, v)?;
    let us = t.value(u).shape();
    if us.len() != 2 || us[0] != c || us[1] != c {
        return Err(Error::ShapeMismatch {
            op: "vn_nonlinearity",
            lhs: us.to_vec(),
            rhs: t.value(v).shape().to_vec(),
        });
    }
    let d = t.batched_matmul(u, v)?;
    let norm = t.l2_norm(d, 2)?;
    let norm_eps = t.add_scalar(norm, DIRECTION_EPS)?;
    let ones = t.constant(&Tensor::full(vec![n, c], 1.0, t.value(v).dtype()));
    let recip = t.div(ones, norm_eps)?;
    let k = t.mul_bcast_last(d, recip)?;
    let vk = t.mul(v, k)?;
    let dot = t.sum_axis(vk, 2)?;
    let mask = {
        let vals = t.value(dot);
        let data: Vec<f64> = vals.data().iter().map(|&x| f64::from(x < 0.0)).collect();
        Tensor::from_vec(vec![n, c], data, vals.dtype())?
    };
    let mask = t.constant(&mask);
    let gated = t.mul(dot, mask)?;
    let correction = t.mul_bcast_last(k, gated)?;
    t.sub(v, correction)
}

/// Rotation-invariant readout: per point, the Gram matrix between the
/// features and a mixed copy `(W_mix v)`, flattened, concatenated with
/// the channel norms. Output is `[N, C*C + C]`.
pub fn vn_invariant(t: &mut Tape, w_mix: Var, v: Var) -> Result<Var> {
    let (n, c) = expect_feature("vn_invariant", t, v)?;
    let ws = t.value(w_mix).shape();
    if ws.len() != 2 || ws[0] != c || ws[1] != c {
        return Err(Error::ShapeMismatch {
            op: "vn_invariant",
            lhs: ws.to_vec(),
            rhs: t.value(v).shape().to_vec(),
        });
    }
    let mixed = t.batched_matmul(w_mix, v)?;
    let mixed_t = t.transpose(mixed)?;
    let gram = t.batched_matmul(v, mixed_t)?;
    let flat = t.reshape(gram, vec![n, c * c])?;
    let norms = t.l2_norm(v, 2)?;
    t.concat(&[flat, norms], 1)
}

/// Weight initialization for channel-mixing maps: normal entries scaled
/// by `1/sqrt(fan_in)`.
pub fn init_mix_weight<R: Rng>(c_out: usize, c_in: usize, rng: &mut R) -> Tensor {
    let scale = 1.0 / (c_in.max(1) as f64).sqrt();
    let data: Vec<f64> = (0..c_out * c_in).map(|_| std_normal(rng) * scale).collect();
    Tensor::from_vec(vec![c_out, c_in], data, crate::tensor::DType::F64)
        .expect("shape matches data length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::RigidTransform;
    use crate::tensor::DType;
    use crate::util::rng_from_seed;

    fn rand_feat(n: usize, c: usize, rng: &mut impl Rng) -> Tensor {
        let data: Vec<f64> = (0..n * c * 3).map(|_| std_normal(rng)).collect();
        Tensor::from_vec(vec![n, c, 3], data, DType::F64).unwrap()
    }

    fn rotate_feat(v: &Tensor, rot: &RigidTransform) -> Tensor {
        let shape = v.shape().to_vec();
        let flat = v.reshape_t(vec![shape[0] * shape[1], 3]).unwrap();
        let r = rot.rotation_matrix();
        let rt = Tensor::from_vec(
            vec![3, 3],
            r.iter().flatten().cloned().collect(),
            DType::F64,
        )
        .unwrap();
        flat.matmul_t(&rt).unwrap().reshape_t(shape).unwrap()
    }

    fn run_linear(w: &Tensor, v: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let wv = t.constant(w);
        let vv = t.constant(v);
        let out = vn_linear(&mut t, wv, vv).unwrap();
        t.value(out).clone()
    }

    fn run_nonlin(u: &Tensor, v: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let uv = t.constant(u);
        let vv = t.constant(v);
        let out = vn_nonlinearity(&mut t, uv, vv).unwrap();
        t.value(out).clone()
    }

    fn run_invariant(w: &Tensor, v: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let wv = t.constant(w);
        let vv = t.constant(v);
        let out = vn_invariant(&mut t, wv, vv).unwrap();
        t.value(out).clone()
    }

    #[test]
    fn linear_commutes_with_rotation() {
        let mut rng = rng_from_seed(71);
        let w = init_mix_weight(6, 4, &mut rng);
        for _ in 0..100 {
            let v = rand_feat(5, 4, &mut rng);
            let rot = RigidTransform::sample_random(&mut rng, 0.0);
            let lhs = run_linear(&w, &rotate_feat(&v, &rot));
            let rhs = rotate_feat(&run_linear(&w, &v), &rot);
            assert!(lhs.max_abs_diff(&rhs) < 1e-7);
        }
    }

    #[test]
    fn nonlinearity_commutes_with_rotation() {
        let mut rng = rng_from_seed(72);
        let u = init_mix_weight(4, 4, &mut rng);
        for _ in 0..100 {
            let v = rand_feat(5, 4, &mut rng);
            let rot = RigidTransform::sample_random(&mut rng, 0.0);
            let lhs = run_nonlin(&u, &rotate_feat(&v, &rot));
            let rhs = rotate_feat(&run_nonlin(&u, &v), &rot);
            assert!(lhs.max_abs_diff(&rhs) < 1e-7);
        }
    }

    #[test]
    fn invariant_readout_ignores_rotation() {
        let mut rng = rng_from_seed(73);
        let w = init_mix_weight(4, 4, &mut rng);
        for _ in 0..100 {
            let v = rand_feat(5, 4, &mut rng);
            let rot = RigidTransform::sample_random(&mut rng, 0.0);
            let lhs = run_invariant(&w, &rotate_feat(&v, &rot));
            let rhs = run_invariant(&w, &v);
            assert!(lhs.max_abs_diff(&rhs) < 1e-7);
        }
    }

    #[test]
    fn aligned_vectors_pass_through() {
        // with U = I the probe is the vector itself, never against it
        let mut rng = rng_from_seed(74);
        let v = rand_feat(6, 3, &mut rng);
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ], DType::F64)
        .unwrap();
        let out = run_nonlin(&eye, &v);
        // passthrough up to the probe-normalization epsilon
        assert!(out.max_abs_diff(&v) < 1e-6);
    }

    #[test]
    fn opposed_vectors_are_fully_projected_out() {
        // with U = -I every vector points exactly against its probe, so
        // the whole vector is removed up to epsilon effects
        let mut rng = rng_from_seed(75);
        let v = rand_feat(6, 3, &mut rng);
        let neg_eye = Tensor::from_rows(&[
            vec![-1.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, -1.0],
        ], DType::F64)
        .unwrap();
        let out = run_nonlin(&neg_eye, &v);
        for &x in out.data() {
            assert!(x.abs() < 1e-6, "residual component {x}");
        }
    }

    #[test]
    fn zero_probe_passes_vectors_unchanged() {
        let mut rng = rng_from_seed(76);
        let v = rand_feat(4, 3, &mut rng);
        let zero = Tensor::zeros(vec![3, 3], DType::F64);
        let out = run_nonlin(&zero, &v);
        assert!(out.bits_eq(&v));
    }

    #[test]
    fn invariant_frozen_orthogonal_channels() {
        // channels (2,0,0) and (0,3,0) with identity mixing: Gram is
        // diag(4, 9), norms are (2, 3)
        let v = Tensor::from_vec(
            vec![1, 2, 3],
            vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0],
            DType::F64,
        )
        .unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], DType::F64).unwrap();
        let out = run_invariant(&eye, &v);
        assert_eq!(out.shape(), &[1, 6]);
        let expect = [4.0, 0.0, 0.0, 9.0, 2.0, 3.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_flow_through_all_three_primitives() {
        let mut rng = rng_from_seed(77);
        let v = rand_feat(3, 3, &mut rng);
        let w = init_mix_weight(3, 3, &mut rng);
        let u = init_mix_weight(3, 3, &mut rng);
        let mix = init_mix_weight(3, 3, &mut rng);
        let weight = {
            let data: Vec<f64> = (0..3 * 12).map(|_| std_normal(&mut rng)).collect();
            Tensor::from_vec(vec![3, 12], data, DType::F64).unwrap()
        };

        let build = |t: &mut Tape, inputs: [Var; 4]| -> Var {
            let [vv, wv, uv, mv] = inputs;
            let lin = vn_linear(t, wv, vv).unwrap();
            let act = vn_nonlinearity(t, uv, lin).unwrap();
            let inv = vn_invariant(t, mv, act).unwrap();
            let wc = t.constant(&weight);
            let prod = t.mul(inv, wc).unwrap();
            t.sum_all(prod).unwrap()
        };

        let tensors = [&v, &w, &u, &mix];
        for which in 0..4 {
            let analytic = {
                let mut t = Tape::new();
                let vars: Vec<Var> = tensors
                    .iter()
                    .enumerate()
                    .map(|(i, x)| t.leaf(x, i == which))
                    .collect();
                let loss = build(&mut t, [vars[0], vars[1], vars[2], vars[3]]);
                t.backward(loss).unwrap();
                t.grad_or_zeros(vars[which])
            };
            let eval = |x: &Tensor| -> f64 {
                let mut t = Tape::new();
                let vars: Vec<Var> = tensors
                    .iter()
                    .enumerate()
                    .map(|(i, base)| {
                        if i == which {
                            t.leaf(x, false)
                        } else {
                            t.constant(base)
                        }
                    })
                    .collect();
                let loss = build(&mut t, [vars[0], vars[1], vars[2], vars[3]]);
                t.value(loss).item().unwrap()
            };
            let base = tensors[which];
            let h = 1e-6;
            let mut max_err = 0.0f64;
            for i in 0..base.numel() {
                let mut xp = (*base).clone();
                xp.data_mut()[i] += h;
                let mut xm = (*base).clone();
                xm.data_mut()[i] -= h;
                let num = (eval(&xp) - eval(&xm)) / (2.0 * h);
                let ana = analytic.data()[i];
                let scale = ana.abs().max(num.abs()).max(1e-3);
                max_err = max_err.max((ana - num).abs() / scale);
            }
            assert!(max_err < 1e-4, "input {which}: fd error {max_err:.3e}");
        }
    }
}
