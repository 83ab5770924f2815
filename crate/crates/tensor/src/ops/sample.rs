//! Deformable bilinear sampling on equirectangular feature maps.
//!
//! Each output position carries a window of kernel taps whose coordinates are
//! displaced by per-position offsets. Sampling respects the panoramic
//! topology: horizontal coordinates wrap modulo the width (the left and right
//! image edges are the same meridian), vertical coordinates clamp to the
//! valid range (the poles do not wrap).

use super::{expect_rank, WindowGeom};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Validated shape bundle for one deformable sampling call.
pub struct SamplePlan {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Offset groups; channels are split evenly across them and every group
    /// gets its own displacement field.
    pub groups: usize,
    pub geom: WindowGeom,
}

impl SamplePlan {
    pub fn new<T: Scalar>(
        x: &Tensor<T>,
        offsets: &Tensor<T>,
        geom: WindowGeom,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "deform_sample";
        let [batch, channels, in_h, in_w] = expect_rank::<4>(OP, x.shape())?;
        let [ob, oc, oh, ow] = expect_rank::<4>(OP, offsets.shape())?;
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::invalid(
                OP,
                format!("offset groups {groups} must divide {channels} channels"),
            ));
        }
        let (out_h, out_w) = geom.out_dims(OP, in_h, in_w)?;
        let want_oc = groups * geom.taps() * 2;
        if ob != batch || oc != want_oc || oh != out_h || ow != out_w {
            return Err(TensorError::shape(
                OP,
                format!(
                    "offsets shape {:?} does not match expected ({batch}, {want_oc}, {out_h}, {out_w})",
                    offsets.shape()
                ),
            ));
        }
        Ok(SamplePlan {
            batch,
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            groups,
            geom,
        })
    }
}

/// Bilinear taps for one continuous coordinate: vertical clamp, horizontal
/// wrap. Returns the four corner indices and weights plus whether the
/// vertical coordinate saturated (its derivative is zero there).
#[derive(Debug, Clone, Copy)]
struct TapWeights {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    w00: f64,
    w01: f64,
    w10: f64,
    w11: f64,
    fy: f64,
    fx: f64,
    y_saturated: bool,
}

fn resolve_tap(y_raw: f64, x_raw: f64, h: usize, w: usize) -> TapWeights {
    let y_max = (h - 1) as f64;
    let y_saturated = y_raw < 0.0 || y_raw > y_max;
    let y = y_raw.clamp(0.0, y_max);
    let x = x_raw.rem_euclid(w as f64);

    let y0 = y.floor();
    let fy = y - y0;
    let y0i = y0 as usize;
    let y1i = (y0i + 1).min(h - 1);

    // rem_euclid can land exactly on w when x_raw is a tiny negative number.
    let x0 = x.floor();
    let fx = x - x0;
    let x0i = (x0 as usize) % w;
    let x1i = (x0i + 1) % w;

    let wy0 = 1.0 - fy;
    let wx0 = 1.0 - fx;
    TapWeights {
        y0: y0i,
        y1: y1i,
        x0: x0i,
        x1: x1i,
        w00: wy0 * wx0,
        w01: wy0 * fx,
        w10: fy * wx0,
        w11: fy * fx,
        fy,
        fx,
        y_saturated,
    }
}

/// Gathers deformed windows: output is `(batch, channels * taps, out_h,
/// out_w)` with output channel `c * taps + k` holding input channel `c`
/// sampled at tap `k`. Offset channels pair up as `(dy, dx)` per (group,
/// tap).
pub fn deform_sample_forward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    plan: &SamplePlan,
) -> Tensor<T> {
    let taps = plan.geom.taps();
    let (h, w) = (plan.in_h, plan.in_w);
    let p = plan.out_h * plan.out_w;
    let cg = plan.channels / plan.groups;
    let mut out = vec![T::ZERO; plan.batch * plan.channels * taps * p];

    let x_stride = plan.channels * h * w;
    let off_stride = plan.groups * taps * 2 * p;
    for bi in 0..plan.batch {
        let xb = &x.data()[bi * x_stride..(bi + 1) * x_stride];
        let ob = &offsets.data()[bi * off_stride..(bi + 1) * off_stride];
        let out_b = &mut out[bi * plan.channels * taps * p..(bi + 1) * plan.channels * taps * p];
        for g in 0..plan.groups {
            for k in 0..taps {
                let ky = k / plan.geom.kernel.1;
                let kx = k % plan.geom.kernel.1;
                let dy_ch = &ob[((g * taps + k) * 2) * p..((g * taps + k) * 2 + 1) * p];
                let dx_ch = &ob[((g * taps + k) * 2 + 1) * p..((g * taps + k) * 2 + 2) * p];
                let mut pi = 0;
                for oy in 0..plan.out_h {
                    let base_y = (oy * plan.geom.stride.0 + ky * plan.geom.dilation.0) as f64
                        - plan.geom.pad.0 as f64;
                    for ox in 0..plan.out_w {
                        let base_x = (ox * plan.geom.stride.1 + kx * plan.geom.dilation.1) as f64
                            - plan.geom.pad.1 as f64;
                        let tap = resolve_tap(
                            base_y + dy_ch[pi].to_f64(),
                            base_x + dx_ch[pi].to_f64(),
                            h,
                            w,
                        );
                        for c in g * cg..(g + 1) * cg {
                            let img = &xb[c * h * w..(c + 1) * h * w];
                            let v = tap.w00 * img[tap.y0 * w + tap.x0].to_f64()
                                + tap.w01 * img[tap.y0 * w + tap.x1].to_f64()
                                + tap.w10 * img[tap.y1 * w + tap.x0].to_f64()
                                + tap.w11 * img[tap.y1 * w + tap.x1].to_f64();
                            out_b[(c * taps + k) * p + pi] = T::from_f64(v);
                        }
                        pi += 1;
                    }
                }
            }
        }
    }

    Tensor::from_vec(
        vec![plan.batch, plan.channels * taps, plan.out_h, plan.out_w],
        out,
    )
    .expect("deform_sample output length matches its shape")
}

/// Accumulates gradients for the input map and the offsets.
pub fn deform_sample_backward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    plan: &SamplePlan,
    grad_out: &[f64],
    gx: &mut [f64],
    goff: &mut [f64],
) {
    let taps = plan.geom.taps();
    let (h, w) = (plan.in_h, plan.in_w);
    let p = plan.out_h * plan.out_w;
    let cg = plan.channels / plan.groups;
    let x_stride = plan.channels * h * w;
    let off_stride = plan.groups * taps * 2 * p;

    for bi in 0..plan.batch {
        let xb = &x.data()[bi * x_stride..(bi + 1) * x_stride];
        let ob = &offsets.data()[bi * off_stride..(bi + 1) * off_stride];
        let gob = &grad_out[bi * plan.channels * taps * p..(bi + 1) * plan.channels * taps * p];
        let gxb = &mut gx[bi * x_stride..(bi + 1) * x_stride];
        let goffb = &mut goff[bi * off_stride..(bi + 1) * off_stride];
        for g in 0..plan.groups {
            for k in 0..taps {
                let ky = k / plan.geom.kernel.1;
                let kx = k % plan.geom.kernel.1;
                let dy_base = ((g * taps + k) * 2) * p;
                let dx_base = dy_base + p;
                let mut pi = 0;
                for oy in 0..plan.out_h {
                    let base_y = (oy * plan.geom.stride.0 + ky * plan.geom.dilation.0) as f64
                        - plan.geom.pad.0 as f64;
                    for ox in 0..plan.out_w {
                        let base_x = (ox * plan.geom.stride.1 + kx * plan.geom.dilation.1) as f64
                            - plan.geom.pad.1 as f64;
                        let tap = resolve_tap(
                            base_y + ob[dy_base + pi].to_f64(),
                            base_x + ob[dx_base + pi].to_f64(),
                            h,
                            w,
                        );
                        let mut gdy = 0.0f64;
                        let mut gdx = 0.0f64;
                        for c in g * cg..(g + 1) * cg {
                            let go = gob[(c * taps + k) * p + pi];
                            if go == 0.0 {
                                continue;
                            }
                            let img = &xb[c * h * w..(c + 1) * h * w];
                            let gimg = &mut gxb[c * h * w..(c + 1) * h * w];
                            gimg[tap.y0 * w + tap.x0] += go * tap.w00;
                            gimg[tap.y0 * w + tap.x1] += go * tap.w01;
                            gimg[tap.y1 * w + tap.x0] += go * tap.w10;
                            gimg[tap.y1 * w + tap.x1] += go * tap.w11;

                            let v00 = img[tap.y0 * w + tap.x0].to_f64();
                            let v01 = img[tap.y0 * w + tap.x1].to_f64();
                            let v10 = img[tap.y1 * w + tap.x0].to_f64();
                            let v11 = img[tap.y1 * w + tap.x1].to_f64();
                            if !tap.y_saturated {
                                gdy += go
                                    * ((1.0 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                            }
                            gdx += go * ((1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                        }
                        goffb[dy_base + pi] += gdy;
                        goffb[dx_base + pi] += gdx;
                        pi += 1;
                    }
                }
            }
        }
    }
}
