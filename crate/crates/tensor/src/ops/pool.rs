//! Average pooling and spatial reductions.

use super::{expect_rank, WindowGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Validated shape bundle for a pooling call.
pub struct PoolPlan {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: WindowGeom,
}

impl PoolPlan {
    pub fn new<T: Scalar>(x: &Tensor<T>, geom: WindowGeom) -> Result<Self> {
        const OP: &str = "avg_pool2d";
        let [batch, channels, in_h, in_w] = expect_rank::<4>(OP, x.shape())?;
        let (out_h, out_w) = geom.out_dims(OP, in_h, in_w)?;
        Ok(PoolPlan {
            batch,
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            geom,
        })
    }
}

/// Window taps that fall inside the input for one output position. Padding
/// positions do not contribute and do not count toward the divisor, so edge
/// windows average over fewer values instead of mixing in zeros.
fn window_bounds(o: usize, stride: usize, pad: usize, k: usize, dil: usize, extent: usize) -> impl Iterator<Item = usize> {
    (0..k).filter_map(move |kk| {
        let i = (o * stride + kk * dil) as isize - pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    })
}

pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, plan: &PoolPlan) -> Tensor<T> {
    let (h, w) = (plan.in_h, plan.in_w);
    let mut out = vec![T::ZERO; plan.batch * plan.channels * plan.out_h * plan.out_w];
    let mut oi = 0;
    for bi in 0..plan.batch {
        for c in 0..plan.channels {
            let img = &x.data()[(bi * plan.channels + c) * h * w..];
            for oy in 0..plan.out_h {
                let ys: Vec<usize> =
                    window_bounds(oy, plan.geom.stride.0, plan.geom.pad.0, plan.geom.kernel.0, plan.geom.dilation.0, h)
                        .collect();
                for ox in 0..plan.out_w {
                    let mut acc = 0.0f64;
                    let mut count = 0usize;
                    for &iy in &ys {
                        for ix in window_bounds(ox, plan.geom.stride.1, plan.geom.pad.1, plan.geom.kernel.1, plan.geom.dilation.1, w) {
                            acc += img[iy * w + ix].to_f64();
                            count += 1;
                        }
                    }
                    out[oi] = T::from_f64(acc / count as f64);
                    oi += 1;
                }
            }
        }
    }
    Tensor::from_vec(vec![plan.batch, plan.channels, plan.out_h, plan.out_w], out)
        .expect("avg_pool output length matches its shape")
}

pub fn avg_pool_backward(plan: &PoolPlan, grad_out: &[f64], gx: &mut [f64]) {
    let (h, w) = (plan.in_h, plan.in_w);
    let mut oi = 0;
    for bi in 0..plan.batch {
        for c in 0..plan.channels {
            let base = (bi * plan.channels + c) * h * w;
            for oy in 0..plan.out_h {
                let ys: Vec<usize> =
                    window_bounds(oy, plan.geom.stride.0, plan.geom.pad.0, plan.geom.kernel.0, plan.geom.dilation.0, h)
                        .collect();
                for ox in 0..plan.out_w {
                    let xs: Vec<usize> =
                        window_bounds(ox, plan.geom.stride.1, plan.geom.pad.1, plan.geom.kernel.1, plan.geom.dilation.1, w)
                            .collect();
                    let share = grad_out[oi] / (ys.len() * xs.len()) as f64;
                    for &iy in &ys {
                        for &ix in &xs {
                            gx[base + iy * w + ix] += share;
                        }
                    }
                    oi += 1;
                }
            }
        }
    }
}

/// Mean over height and width: `(b, c, h, w)` to `(b, c)`.
pub fn mean_spatial_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, channels, h, w] = expect_rank::<4>("mean_spatial", x.shape())?;
    let area = (h * w) as f64;
    let mut out = Vec::with_capacity(batch * channels);
    for chunk in x.data().chunks_exact(h * w) {
        let sum: f64 = chunk.iter().map(|v| v.to_f64()).sum();
        out.push(T::from_f64(sum / area));
    }
    Tensor::from_vec(vec![batch, channels], out)
}

pub fn mean_spatial_backward(shape: &[usize], grad_out: &[f64], gx: &mut [f64]) {
    let (h, w) = (shape[2], shape[3]);
    let area = (h * w) as f64;
    for (plane, g) in gx.chunks_exact_mut(h * w).zip(grad_out) {
        let share = g / area;
        for v in plane {
            *v += share;
        }
    }
}

/// Max over height and width: `(b, c, h, w)` to `(b, c)`, returning per-plane
/// flat argmax indices (first occurrence wins) for the backward pass.
pub fn max_spatial_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [batch, channels, h, w] = expect_rank::<4>("max_spatial", x.shape())?;
    let mut out = Vec::with_capacity(batch * channels);
    let mut arg = Vec::with_capacity(batch * channels);
    for chunk in x.data().chunks_exact(h * w) {
        let mut best = chunk[0].to_f64();
        let mut best_i = 0usize;
        for (i, v) in chunk.iter().enumerate().skip(1) {
            let v = v.to_f64();
            if v > best {
                best = v;
                best_i = i;
            }
        }
        out.push(T::from_f64(best));
        arg.push(best_i);
    }
    Ok((Tensor::from_vec(vec![batch, channels], out)?, arg))
}

pub fn max_spatial_backward(shape: &[usize], argmax: &[usize], grad_out: &[f64], gx: &mut [f64]) {
    let area = shape[2] * shape[3];
    for (plane, (&a, g)) in gx.chunks_exact_mut(area).zip(argmax.iter().zip(grad_out)) {
        plane[a] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_windows_average_nine_taps() {
        let x = Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|i| i as f64).collect()).unwrap();
        let plan = PoolPlan::new(&x, WindowGeom::square(3, 1, 1)).unwrap();
        let out = avg_pool_forward(&x, &plan);
        assert_eq!(out.at(&[0, 0, 1, 1]), 5.0);
    }

    /// An edge window only averages the taps that exist: the top-left 3x3
    /// window of a padded 3x3 image covers four real pixels.
    #[test]
    fn edge_windows_average_only_in_bounds_taps() {
        let x = Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|i| i as f64).collect()).unwrap();
        let plan = PoolPlan::new(&x, WindowGeom::square(3, 1, 1)).unwrap();
        let out = avg_pool_forward(&x, &plan);
        assert_eq!(out.at(&[0, 0, 0, 0]), (1.0 + 2.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(out.at(&[0, 0, 0, 1]), (1.0 + 2.0 + 3.0 + 4.0 + 5.0 + 6.0) / 6.0);
    }

    #[test]
    fn pool_gradient_distributes_equally_across_window() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let plan = PoolPlan::new(&x, WindowGeom::square(2, 1, 0)).unwrap();
        let mut gx = vec![0.0; 4];
        avg_pool_backward(&plan, &[2.0], &mut gx);
        assert_eq!(gx, vec![0.5; 4]);
    }

    #[test]
    fn max_spatial_takes_first_maximum() {
        let x = Tensor::from_vec(vec![1, 1, 1, 4], vec![1.0, 7.0, 7.0, 2.0]).unwrap();
        let (out, arg) = max_spatial_forward(&x).unwrap();
        assert_eq!(out.at(&[0, 0]), 7.0);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn mean_spatial_matches_plain_average() {
        let x = Tensor::from_vec(vec![1, 2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let out = mean_spatial_forward(&x).unwrap();
        assert_eq!(out.at(&[0, 0]), 1.5);
        assert_eq!(out.at(&[0, 1]), 5.5);
    }
}
