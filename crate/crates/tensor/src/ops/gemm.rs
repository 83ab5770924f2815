//! Small dense matrix products with `f64` accumulation.
//!
//! Inputs may be any [`Scalar`] slice; every product term is widened to `f64`
//! before accumulation and sums run in a fixed order (ascending inner index),
//! so results are bit-reproducible and usable as references for each other.

use crate::scalar::Scalar;

/// `out(m,n) += a(m,k) * b(k,n)`, all row-major.
pub fn gemm_acc<A: Scalar, B: Scalar>(
    a: &[A],
    b: &[B],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk].to_f64();
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..kk * n + n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv.to_f64();
            }
        }
    }
}

/// `out(m,n) += a(m,k) * bt(n,k)^T`: rows of `bt` are the columns of the
/// logical right operand, so each output element is a dot product of two
/// contiguous rows.
pub fn gemm_nt_acc<A: Scalar, B: Scalar>(
    a: &[A],
    bt: &[B],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &bt[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av.to_f64() * bv.to_f64();
            }
            *o += acc;
        }
    }
}

/// `out(m,n) += at(r,m)^T * b(r,n)`: both operands are walked row by row and
/// rank-1 updates accumulate into `out`.
pub fn gemm_tn_acc<A: Scalar, B: Scalar>(
    at: &[A],
    b: &[B],
    r: usize,
    m: usize,
    n: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(at.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..r {
        let a_row = &at[row * m..(row + 1) * m];
        let b_row = &b[row * n..(row + 1) * n];
        for (i, av) in a_row.iter().enumerate() {
            let coef = av.to_f64();
            if coef == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += coef * bv.to_f64();
            }
        }
    }
}
