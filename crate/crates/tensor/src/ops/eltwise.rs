//! Elementwise maps, pointwise arithmetic, and shape-broadcast products.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Unary pointwise functions. Values are computed in `f64`; derivatives used
/// by the backward pass are exact formulas, with the convention that clamp
/// boundaries and the ReLU kink at zero pass gradient through on the closed
/// side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Relu,
    /// Gaussian error linear unit, tanh approximation.
    Gelu,
    Sigmoid,
    Tanh,
    Clamp {
        lo: f64,
        hi: f64,
    },
    Scale(f64),
    AddScalar(f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn unary_eval(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Clamp { lo, hi } => x.clamp(lo, hi),
        UnaryKind::Scale(c) => c * x,
        UnaryKind::AddScalar(c) => x + c,
    }
}

pub fn unary_derivative(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        UnaryKind::Sigmoid => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s)
        }
        UnaryKind::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
        UnaryKind::Clamp { lo, hi } => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => 1.0,
    }
}

pub fn unary_forward<T: Scalar>(kind: UnaryKind, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64(unary_eval(kind, v.to_f64())))
}

pub fn unary_backward<T: Scalar>(kind: UnaryKind, x: &Tensor<T>, grad_out: &[f64], gx: &mut [f64]) {
    for ((g, v), go) in gx.iter_mut().zip(x.data()).zip(grad_out) {
        *g += go * unary_derivative(kind, v.to_f64());
    }
}

/// Clamps interleaved coordinate pairs to per-axis bounds: even channels (the
/// first of each pair) to `[-bound_even, bound_even]`, odd channels to
/// `[-bound_odd, bound_odd]`. Input must be `(b, c, h, w)` with even `c`.
pub fn clamp_pairs_forward<T: Scalar>(
    x: &Tensor<T>,
    bound_even: f64,
    bound_odd: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "clamp_pairs";
    if x.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: OP,
            expected: 4,
            shape: x.shape().to_vec(),
        });
    }
    let c = x.shape()[1];
    if c % 2 != 0 {
        return Err(TensorError::shape(OP, format!("channel dim {c} is not even")));
    }
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = Vec::with_capacity(x.numel());
    for (ci, chunk) in x.data().chunks_exact(plane).enumerate() {
        let bound = if ci % 2 == 0 { bound_even } else { bound_odd };
        out.extend(chunk.iter().map(|v| T::from_f64(v.to_f64().clamp(-bound, bound))));
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn clamp_pairs_backward<T: Scalar>(
    x: &Tensor<T>,
    bound_even: f64,
    bound_odd: f64,
    grad_out: &[f64],
    gx: &mut [f64],
) {
    let plane = x.shape()[2] * x.shape()[3];
    for (ci, ((chunk, go), gxc)) in x
        .data()
        .chunks_exact(plane)
        .zip(grad_out.chunks_exact(plane))
        .zip(gx.chunks_exact_mut(plane))
        .enumerate()
    {
        let bound = if ci % 2 == 0 { bound_even } else { bound_odd };
        for i in 0..plane {
            let v = chunk[i].to_f64();
            if v.abs() <= bound {
                gxc[i] += go[i];
            }
        }
    }
}

/// Strides for broadcasting `b` onto `a`: each extent of `b` must equal the
/// matching extent of `a` or be 1.
pub fn broadcast_strides(
    op: &'static str,
    a_shape: &[usize],
    b_shape: &[usize],
) -> Result<Vec<usize>> {
    if a_shape.len() != b_shape.len() {
        return Err(TensorError::shape(
            op,
            format!("rank mismatch: {a_shape:?} vs {b_shape:?} (broadcast requires equal ranks)"),
        ));
    }
    let mut strides = vec![0usize; b_shape.len()];
    let mut stride = 1usize;
    for d in (0..b_shape.len()).rev() {
        if b_shape[d] == a_shape[d] {
            strides[d] = stride;
        } else if b_shape[d] == 1 {
            strides[d] = 0;
        } else {
            return Err(TensorError::shape(
                op,
                format!(
                    "dim {d}: extent {} cannot broadcast to {}",
                    b_shape[d], a_shape[d]
                ),
            ));
        }
        stride *= b_shape[d];
    }
    Ok(strides)
}

/// Visits every position of `a_shape` in row-major order, yielding the flat
/// index into the broadcast operand.
fn for_each_broadcast(a_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let numel: usize = a_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut b_flat = 0usize;
    for a_flat in 0..numel {
        f(a_flat, b_flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            b_flat += b_strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
            b_flat -= b_strides[d] * a_shape[d];
        }
    }
}

/// `a * broadcast(b)`, elementwise.
pub fn mul_bcast_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let strides = broadcast_strides("mul_bcast", a.shape(), b.shape())?;
    let mut out = vec![T::ZERO; a.numel()];
    for_each_broadcast(a.shape(), &strides, |ai, bi| {
        out[ai] = T::from_f64(a.data()[ai].to_f64() * b.data()[bi].to_f64());
    });
    Tensor::from_vec(a.shape().to_vec(), out)
}

pub fn mul_bcast_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
) {
    let strides =
        broadcast_strides("mul_bcast", a.shape(), b.shape()).expect("validated in forward");
    for_each_broadcast(a.shape(), &strides, |ai, bi| {
        ga[ai] += grad_out[ai] * b.data()[bi].to_f64();
        gb[bi] += grad_out[ai] * a.data()[ai].to_f64();
    });
}
