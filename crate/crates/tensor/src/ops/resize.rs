//! Bilinear resampling to a target resolution.
//!
//! Destination pixel centres map to source coordinates via the half-pixel
//! convention `src = (dst + 0.5) * in / out - 0.5`, clamped to the valid
//! range on both axes. Resizing a 1x2 row `[0, 2]` to 1x4 therefore yields
//! `[0, 0.5, 1.5, 2]`.

use super::expect_rank;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Precomputed 1-D interpolation taps for one axis.
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(in_extent: usize, out_extent: usize) -> AxisTaps {
    let scale = in_extent as f64 / out_extent as f64;
    let mut lo = Vec::with_capacity(out_extent);
    let mut hi = Vec::with_capacity(out_extent);
    let mut frac = Vec::with_capacity(out_extent);
    for o in 0..out_extent {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_extent - 1) as f64);
        let l = src.floor() as usize;
        let h = (l + 1).min(in_extent - 1);
        lo.push(l);
        hi.push(h);
        frac.push(src - l as f64);
    }
    AxisTaps { lo, hi, frac }
}

pub fn bilinear_resize_forward<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "bilinear_resize";
    let [batch, channels, h, w] = expect_rank::<4>(OP, x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::invalid(OP, "target extents must be positive".to_string()));
    }
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(batch * channels * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..out_h {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for ox in 0..out_w {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let top = r0[x0].to_f64() * (1.0 - fx) + r0[x1].to_f64() * fx;
                let bot = r1[x0].to_f64() * (1.0 - fx) + r1[x1].to_f64() * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::from_vec(vec![batch, channels, out_h, out_w], out)
}

pub fn bilinear_resize_backward(
    in_shape: &[usize],
    out_h: usize,
    out_w: usize,
    grad_out: &[f64],
    gx: &mut [f64],
) {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let planes = in_shape[0] * in_shape[1];
    for p in 0..planes {
        let go = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        let gp = &mut gx[p * h * w..(p + 1) * h * w];
        let mut gi = 0;
        for oy in 0..out_h {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let g = go[gi];
                gi += 1;
                gp[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gp[y0 * w + x1] += g * (1.0 - fy) * fx;
                gp[y1 * w + x0] += g * fy * (1.0 - fx);
                gp[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}
