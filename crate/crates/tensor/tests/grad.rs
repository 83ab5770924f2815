//! Central-difference gradient checks for every differentiable operation,
//! across ten random seeds each.
//!
//! Kink-free operations must pass at 1e-7; paths through bilinear sampling
//! get 1e-5. Inputs for kinked functions (relu, clamp, max, interpolation
//! corners) are sampled away from their kinks, since a finite difference
//! straddling a kink measures nothing meaningful.
//!
//! Step sizes are chosen per operation. Multilinear ops (matmul, conv,
//! pooling, resize) are exactly linear along any single coordinate, so
//! central differences have zero truncation error and a larger step only
//! reduces cancellation noise. Smooth nonlinear ops balance truncation
//! against cancellation near h = 1e-5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panofuse_tensor::ops::WindowGeom;
use panofuse_tensor::{grad_check, Labels, Tape, Tensor, ValueId};

const TOL_SMOOTH: f64 = 1e-7;
const TOL_BILINEAR: f64 = 1e-5;
/// Step for ops that are multilinear in each input coordinate.
const STEP_LINEAR: f64 = 3e-4;
/// Step for smooth nonlinear ops.
const STEP_SMOOTH: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero so relu and sign-sensitive kinks stay on
/// one side under perturbation.
fn rand_away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::rand_uniform(shape, 0.1, 1.3, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Weighted sum against a fixed random tensor, so the upstream gradient is
/// non-uniform and exercises the full Jacobian. Weight magnitudes stay in
/// [0.4, 1.2] so no output coordinate is silently dropped from the check.
fn weighted_loss(
    tape: &mut Tape<f64>,
    y: ValueId,
    seed: u64,
) -> panofuse_tensor::Result<ValueId> {
    let shape = tape.value(y).shape().to_vec();
    let mut r = rng(seed ^ 0xABCD);
    let mut w = Tensor::<f64>::rand_uniform(shape, 0.4, 1.2, &mut r);
    for v in w.data_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    let wi = tape.leaf(w);
    let p = tape.mul(y, wi)?;
    tape.sum_all(p)
}

fn check(
    name: &str,
    seed: u64,
    step: f64,
    tol: f64,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[ValueId]) -> panofuse_tensor::Result<ValueId>,
) {
    let report = grad_check(inputs, step, build).unwrap();
    assert!(
        report.passes(tol),
        "{name} seed {seed}: max rel err {} exceeds {tol}",
        report.max_rel_err
    );
}

#[test]
fn unary_activations_pass_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = rand_away_from_zero(vec![3, 5], &mut r);
        for (name, f) in [
            ("relu", 0usize),
            ("gelu", 1),
            ("sigmoid", 2),
            ("tanh", 3),
        ] {
            let xc = x.clone();
            check(name, seed, STEP_SMOOTH, TOL_SMOOTH, &[xc], |tape, ids| {
                let y = match f {
                    0 => tape.relu(ids[0])?,
                    1 => tape.gelu(ids[0])?,
                    2 => tape.sigmoid(ids[0])?,
                    _ => tape.tanh(ids[0])?,
                };
                weighted_loss(tape, y, seed)
            });
        }
    }
}

#[test]
fn clamp_passes_grad_check_away_from_bounds() {
    for seed in 0..10 {
        let mut r = rng(seed);
        // Bounds at +-2; values either well inside or well outside.
        let mut x = Tensor::<f64>::rand_uniform(vec![4, 4], -1.5, 1.5, &mut r);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if i % 3 == 0 {
                *v += 3.0f64.copysign(*v);
            }
        }
        check("clamp", seed, STEP_LINEAR, TOL_SMOOTH, &[x], |tape, ids| {
            let y = tape.clamp(ids[0], -2.0, 2.0)?;
            weighted_loss(tape, y, seed)
        });
    }
}

#[test]
fn clamp_pairs_passes_grad_check_away_from_bounds() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut x = Tensor::<f64>::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut r);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if i % 4 == 0 {
                *v += 5.0f64.copysign(*v);
            }
        }
        check("clamp_pairs", seed, STEP_LINEAR, TOL_SMOOTH, &[x], |tape, ids| {
            let y = tape.clamp_pairs(ids[0], 2.0, 3.0)?;
            weighted_loss(tape, y, seed)
        });
    }
}

#[test]
fn arithmetic_ops_pass_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = Tensor::<f64>::rand_uniform(vec![2, 3], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![2, 3], -1.0, 1.0, &mut r);
        check("add_sub_mul", seed, STEP_LINEAR, TOL_SMOOTH, &[a, b], |tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let d = tape.sub(s, ids[1])?;
            let m = tape.mul(d, ids[1])?;
            let m = tape.scale(m, 0.7)?;
            let m = tape.add_scalar(m, 0.3)?;
            weighted_loss(tape, m, seed)
        });
    }
}

#[test]
fn mul_bcast_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut r);
        let gate_c = Tensor::<f64>::rand_uniform(vec![2, 3, 1, 1], -1.0, 1.0, &mut r);
        let gate_s = Tensor::<f64>::rand_uniform(vec![2, 1, 2, 2], -1.0, 1.0, &mut r);
        check(
            "mul_bcast",
            seed,
            STEP_LINEAR,
            TOL_SMOOTH,
            &[a, gate_c, gate_s],
            |tape, ids| {
                let y = tape.mul_bcast(ids[0], ids[1])?;
                let y = tape.mul_bcast(y, ids[2])?;
                weighted_loss(tape, y, seed)
            },
        );
    }
}

#[test]
fn linear_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![4, 5], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![3], -1.0, 1.0, &mut r);
        check("linear", seed, STEP_LINEAR, TOL_SMOOTH, &[x, w, b], |tape, ids| {
            let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
            weighted_loss(tape, y, seed)
        });
    }
}

/// A linear layer is exactly linear along every coordinate, so even a tiny
/// step must reproduce the analytic gradient almost to full precision.
/// Positive inputs keep every gradient entry away from zero, which makes
/// the relative error meaningful for each element.
#[test]
fn linear_at_small_step_reaches_1e8() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![4, 5], 0.2, 1.2, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![3, 5], 0.2, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![3], 0.2, 1.0, &mut r);
        check("linear_h1e6", seed, 1e-6, 1e-8, &[x, w, b], |tape, ids| {
            let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
            tape.sum_all(y)
        });
    }
}

#[test]
fn conv2d_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![2, 4, 5, 6], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![4, 2, 3, 3], -0.5, 0.5, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![4], -0.5, 0.5, &mut r);
        check("conv2d", seed, STEP_LINEAR, TOL_SMOOTH, &[x, w, b], |tape, ids| {
            let y = tape.conv2d(
                ids[0],
                ids[1],
                Some(ids[2]),
                WindowGeom::square(3, 2, 1),
                2,
            )?;
            weighted_loss(tape, y, seed)
        });
    }
}

#[test]
fn deform_sample_passes_grad_check_off_kinks() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (h, w) = (5, 6);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, h, w], -1.0, 1.0, &mut r);
        // Fractional parts in [0.15, 0.45]: at least 0.15 from every
        // interpolation corner and from the vertical clamp boundary.
        let mut off = Tensor::<f64>::rand_uniform(vec![1, 2 * 2, h, w], 0.15, 0.45, &mut r);
        for v in off.data_mut().iter_mut().skip(1).step_by(2) {
            *v += 1.0; // horizontal offsets cross the wrap seam too
        }
        check(
            "deform_sample",
            seed,
            STEP_LINEAR,
            TOL_BILINEAR,
            &[x, off],
            |tape, ids| {
                let y = tape.deform_sample(ids[0], ids[1], WindowGeom::square(1, 1, 0), 2)?;
                weighted_loss(tape, y, seed)
            },
        );
    }
}

#[test]
fn deform_sample_window_geometry_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (h, w) = (6, 6);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, h, w], -1.0, 1.0, &mut r);
        let off = Tensor::<f64>::rand_uniform(vec![1, 9 * 2, h, w], 0.15, 0.45, &mut r);
        check(
            "deform_sample_3x3",
            seed,
            STEP_LINEAR,
            TOL_BILINEAR,
            &[x, off],
            |tape, ids| {
                let y = tape.deform_sample(ids[0], ids[1], WindowGeom::square(3, 1, 1), 1)?;
                weighted_loss(tape, y, seed)
            },
        );
    }
}

#[test]
fn avg_pool_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![1, 3, 5, 5], -1.0, 1.0, &mut r);
        check("avg_pool", seed, STEP_LINEAR, TOL_SMOOTH, &[x], |tape, ids| {
            let y = tape.avg_pool(ids[0], WindowGeom::square(3, 1, 1))?;
            weighted_loss(tape, y, seed)
        });
    }
}

#[test]
fn layer_norm_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![3, 6], -1.0, 1.0, &mut r);
        let g = Tensor::<f64>::rand_uniform(vec![6], 0.5, 1.5, &mut r);
        let s = Tensor::<f64>::rand_uniform(vec![6], -0.5, 0.5, &mut r);
        check("layer_norm", seed, STEP_SMOOTH, TOL_SMOOTH, &[x, g, s], |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
            weighted_loss(tape, y, seed)
        });
    }
}

#[test]
fn softmax_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![4, 5], -2.0, 2.0, &mut r);
        check("softmax", seed, 2e-5, TOL_SMOOTH, &[x], |tape, ids| {
            let y = tape.softmax(ids[0])?;
            weighted_loss(tape, y, seed)
        });
    }
}

#[test]
fn softmax_cross_entropy_composite_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let logits = Tensor::<f64>::rand_uniform(vec![1, 4, 3, 3], -2.0, 2.0, &mut r);
        let lab: Vec<u32> = (0..9)
            .map(|_| if r.gen_bool(0.2) { 255 } else { r.gen_range(0..4) })
            .collect();
        if lab.iter().all(|&l| l == 255) {
            continue;
        }
        let labels = Labels::new(vec![1, 3, 3], lab).unwrap();
        check(
            "cross_entropy",
            seed,
            STEP_SMOOTH,
            TOL_SMOOTH,
            &[logits],
            |tape, ids| tape.cross_entropy(ids[0], labels.clone(), 255),
        );
    }
}

#[test]
fn bilinear_resize_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![1, 2, 3, 4], -1.0, 1.0, &mut r);
        check("bilinear_resize", seed, STEP_LINEAR, TOL_SMOOTH, &[x], |tape, ids| {
            let up = tape.bilinear_resize(ids[0], 6, 8)?;
            let down = tape.bilinear_resize(up, 2, 3)?;
            weighted_loss(tape, down, seed)
        });
    }
}

#[test]
fn shape_ops_pass_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = Tensor::<f64>::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![2, 5, 4], -1.0, 1.0, &mut r);
        check(
            "reshape_permute_concat",
            seed,
            STEP_LINEAR,
            TOL_SMOOTH,
            &[a, b],
            |tape, ids| {
                let cat = tape.concat(&[ids[0], ids[1]], 1)?;
                let p = tape.permute(cat, &[1, 0, 2])?;
                let f = tape.reshape(p, vec![8, 8])?;
                weighted_loss(tape, f, seed)
            },
        );
    }
}

#[test]
fn bmm_passes_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = Tensor::<f64>::rand_uniform(vec![2, 3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(vec![2, 4, 5], -1.0, 1.0, &mut r);
        let c = Tensor::<f64>::rand_uniform(vec![2, 3, 5], -1.0, 1.0, &mut r);
        check("bmm", seed, STEP_LINEAR, TOL_SMOOTH, &[a, b, c], |tape, ids| {
            let plain = tape.bmm(ids[0], ids[1], false)?;
            let trans = tape.bmm(plain, ids[2], true)?;
            weighted_loss(tape, trans, seed)
        });
    }
}

#[test]
fn reductions_pass_grad_check() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 3, 4], -1.0, 1.0, &mut r);
        check(
            "mean_spatial",
            seed,
            STEP_LINEAR,
            TOL_SMOOTH,
            &[x.clone()],
            |tape, ids| {
                let y = tape.mean_spatial(ids[0])?;
                weighted_loss(tape, y, seed)
            },
        );
        // A clear unique maximum per plane keeps max_spatial smooth locally.
        let mut xm = x.clone();
        for p in 0..6 {
            let base = p * 12;
            xm.data_mut()[base + (p * 5) % 12] += 4.0;
        }
        check("max_spatial", seed, STEP_LINEAR, TOL_SMOOTH, &[xm], |tape, ids| {
            let y = tape.max_spatial(ids[0])?;
            weighted_loss(tape, y, seed)
        });
    }
}

/// Composite graph from the backward contract: conv, relu, sum.
#[test]
fn composite_conv_relu_sum_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = rand_away_from_zero(vec![1, 2, 4, 5], &mut r);
        let w = Tensor::<f64>::rand_uniform(vec![3, 2, 3, 3], -0.6, 0.6, &mut r);
        check(
            "conv_relu_sum",
            seed,
            1e-4,
            TOL_SMOOTH,
            &[x, w],
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], None, WindowGeom::square(3, 1, 1), 1)?;
                let y = tape.relu(y)?;
                tape.sum_all(y)
            },
        );
    }
}
