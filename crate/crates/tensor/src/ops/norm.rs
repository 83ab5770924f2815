//! Layer normalization and softmax, both over the trailing axis.

use super::expect_rank;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

fn trailing_axis(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    let Some(&last) = shape.last() else {
        return Err(TensorError::RankMismatch {
            op,
            expected: 1,
            shape: shape.to_vec(),
        });
    };
    let rows: usize = shape[..shape.len() - 1].iter().product();
    Ok((rows, last))
}

/// Normalizes each trailing-axis row to zero mean and unit variance, then
/// applies the learned per-feature gain and shift.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "layer_norm";
    let (_, c) = trailing_axis(OP, x.shape())?;
    let [gc] = expect_rank::<1>(OP, gain.shape())?;
    let [sc] = expect_rank::<1>(OP, shift.shape())?;
    if gc != c || sc != c {
        return Err(TensorError::shape(
            OP,
            format!("gain/shift extents ({gc}, {sc}) do not match feature dim {c}"),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter().enumerate() {
            let xh = (v.to_f64() - mean) * rstd;
            out.push(T::from_f64(xh * gain.data()[i].to_f64() + shift.data()[i].to_f64()));
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
    grad_out: &[f64],
    gx: &mut [f64],
    ggain: &mut [f64],
    gshift: &mut [f64],
) {
    let c = *x.shape().last().expect("validated in forward");
    let inv_c = 1.0 / c as f64;
    for ((row, go), gx_row) in x
        .data()
        .chunks_exact(c)
        .zip(grad_out.chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() * inv_c;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            * inv_c;
        let rstd = 1.0 / (var + eps).sqrt();

        let mut sum_dxh = 0.0f64;
        let mut sum_dxh_xh = 0.0f64;
        for i in 0..c {
            let xh = (row[i].to_f64() - mean) * rstd;
            let dxh = go[i] * gain.data()[i].to_f64();
            ggain[i] += go[i] * xh;
            gshift[i] += go[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        for i in 0..c {
            let xh = (row[i].to_f64() - mean) * rstd;
            let dxh = go[i] * gain.data()[i].to_f64();
            gx_row[i] += rstd * (dxh - inv_c * sum_dxh - xh * inv_c * sum_dxh_xh);
        }
    }
}

/// Numerically stable softmax over the trailing axis.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = trailing_axis("softmax", x.shape())?;
    let mut out = Vec::with_capacity(x.numel());
    let mut exps = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for (e, v) in exps.iter_mut().zip(row) {
            *e = (v.to_f64() - max).exp();
            sum += *e;
        }
        for e in &exps {
            out.push(T::from_f64(e / sum));
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Backward from the forward output `y`: `dx = y * (dy - sum(dy * y))` per
/// row.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &[f64], gx: &mut [f64]) {
    let c = *y.shape().last().expect("validated in forward");
    for ((row, go), gx_row) in y
        .data()
        .chunks_exact(c)
        .zip(grad_out.chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        let dot: f64 = row.iter().zip(go).map(|(y, g)| y.to_f64() * g).sum();
        for i in 0..c {
            gx_row[i] += row[i].to_f64() * (go[i] - dot);
        }
    }
}
