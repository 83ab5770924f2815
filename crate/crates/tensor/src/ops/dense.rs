//! Linear (fully connected) layers and batched matrix products.

use super::expect_rank;
use super::gemm::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// `y = x @ w^T + b` where `w` is `(out, in)` and `x` is `(..., in)`; every
/// leading axis is treated as a batch of rows.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let [out_f, in_f] = expect_rank::<2>(OP, w.shape())?;
    let Some(&last) = x.shape().last() else {
        return Err(TensorError::RankMismatch {
            op: OP,
            expected: 1,
            shape: x.shape().to_vec(),
        });
    };
    if last != in_f {
        return Err(TensorError::shape(
            OP,
            format!("input features {last} do not match weight input dim {in_f}"),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?} does not match {out_f} output features", b.shape()),
            ));
        }
    }
    let rows = x.numel() / in_f;
    let mut acc = vec![0.0f64; rows * out_f];
    gemm_nt_acc(x.data(), w.data(), rows, in_f, out_f, &mut acc);
    let data: Vec<T> = match b {
        Some(b) => acc
            .chunks_exact(out_f)
            .flat_map(|row| {
                row.iter()
                    .zip(b.data())
                    .map(|(v, bv)| T::from_f64(v + bv.to_f64()))
            })
            .collect(),
        None => acc.iter().map(|&v| T::from_f64(v)).collect(),
    };
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("checked above") = out_f;
    Tensor::from_vec(shape, data)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    grad_out: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let out_f = w.shape()[0];
    let in_f = w.shape()[1];
    let rows = x.numel() / in_f;
    // dX = dY @ W, dW = dY^T @ X.
    gemm_acc(grad_out, w.data(), rows, out_f, in_f, gx);
    gemm_tn_acc(grad_out, x.data(), rows, out_f, in_f, gw);
    if has_bias {
        let gb = gb.expect("bias gradient buffer when has_bias");
        for row in grad_out.chunks_exact(out_f) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

/// Batched product of `(batch, m, k)` with `(batch, k, n)`, or with
/// `(batch, n, k)` when `transpose_b` is set.
pub fn bmm_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
) -> Result<Tensor<T>> {
    const OP: &str = "bmm";
    let [ba, m, k] = expect_rank::<3>(OP, a.shape())?;
    let [bb, d1, d2] = expect_rank::<3>(OP, b.shape())?;
    if ba != bb {
        return Err(TensorError::shape(OP, format!("batch dims differ: {ba} vs {bb}")));
    }
    let (bk, n) = if transpose_b { (d2, d1) } else { (d1, d2) };
    if bk != k {
        return Err(TensorError::shape(
            OP,
            format!("inner dims differ: {k} vs {bk} (transpose_b = {transpose_b})"),
        ));
    }
    let mut acc = vec![0.0f64; ba * m * n];
    for i in 0..ba {
        let a_i = &a.data()[i * m * k..(i + 1) * m * k];
        let b_i = &b.data()[i * k * n..(i + 1) * k * n];
        let out_i = &mut acc[i * m * n..(i + 1) * m * n];
        if transpose_b {
            gemm_nt_acc(a_i, b_i, m, k, n, out_i);
        } else {
            gemm_acc(a_i, b_i, m, k, n, out_i);
        }
    }
    Tensor::from_vec(vec![ba, m, n], acc.iter().map(|&v| T::from_f64(v)).collect())
}

pub fn bmm_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
    grad_out: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
) {
    let [ba, m, k] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let n = if transpose_b { b.shape()[1] } else { b.shape()[2] };
    for i in 0..ba {
        let a_i = &a.data()[i * m * k..(i + 1) * m * k];
        let b_i = &b.data()[i * k * n..(i + 1) * k * n];
        let go_i = &grad_out[i * m * n..(i + 1) * m * n];
        let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
        let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
        if transpose_b {
            // C = A B^T with B stored (n, k): dA = dC B, dB = dC^T A.
            gemm_acc(go_i, b_i, m, n, k, ga_i);
            gemm_tn_acc(go_i, a_i, m, n, k, gb_i);
        } else {
            // dA = dC B^T, dB = A^T dC.
            gemm_nt_acc(go_i, b_i, m, n, k, ga_i);
            gemm_tn_acc(a_i, go_i, m, k, n, gb_i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_computation() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![10.0, -10.0]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.at(&[0, 0]), 1.0 - 3.0 + 10.0);
        assert_eq!(y.at(&[0, 1]), 2.0 + 2.0 + 1.5 - 10.0);
        assert_eq!(y.at(&[1, 0]), 0.5 - 2.0 + 10.0);
        assert_eq!(y.at(&[1, 1]), 1.0 - 1.0 + 1.0 - 10.0);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let x = Tensor::<f64>::zeros(vec![2, 5, 7, 3]);
        let w = Tensor::<f64>::zeros(vec![4, 3]);
        let y = linear_forward(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 5, 7, 4]);
    }

    #[test]
    fn bmm_transpose_variant_agrees_with_plain_product() {
        let a = Tensor::from_vec(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        let b = Tensor::from_vec(vec![2, 3, 2], (0..12).map(|i| i as f64 * -0.3 + 1.0).collect())
            .unwrap();
        // Build b^T stored as (2, 2, 3).
        let mut bt_data = vec![0.0; 12];
        for batch in 0..2 {
            for r in 0..3 {
                for c in 0..2 {
                    bt_data[batch * 6 + c * 3 + r] = b.at(&[batch, r, c]);
                }
            }
        }
        let bt = Tensor::from_vec(vec![2, 2, 3], bt_data).unwrap();
        let plain = bmm_forward(&a, &b, false).unwrap();
        let trans = bmm_forward(&a, &bt, true).unwrap();
        assert!(plain.max_abs_diff(&trans) < 1e-12);
    }
}
