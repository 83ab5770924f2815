//! Grouped 2-D convolution over zero-padded inputs, via im2col and the
//! `f64`-accumulating matrix kernels.

use super::gemm::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{expect_rank, WindowGeom};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Validated shape bundle for one convolution call.
#[derive(Debug)]
pub struct ConvPlan {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub groups: usize,
    pub geom: WindowGeom,
}

impl ConvPlan {
    pub fn new<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        geom: WindowGeom,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [batch, c_in, in_h, in_w] = expect_rank::<4>(OP, x.shape())?;
        let [c_out, wc, kh, kw] = expect_rank::<4>(OP, w.shape())?;
        if (kh, kw) != geom.kernel {
            return Err(TensorError::shape(
                OP,
                format!("weight kernel ({kh}, {kw}) does not match geometry {:?}", geom.kernel),
            ));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(TensorError::invalid(
                OP,
                format!("groups {groups} must divide channels in {c_in} and out {c_out}"),
            ));
        }
        if wc != c_in / groups {
            return Err(TensorError::shape(
                OP,
                format!("weight expects {wc} input channels per group, input provides {}", c_in / groups),
            ));
        }
        if let Some(b) = b {
            if b.shape() != [c_out] {
                return Err(TensorError::shape(
                    OP,
                    format!("bias shape {:?} does not match {c_out} output channels", b.shape()),
                ));
            }
        }
        let (out_h, out_w) = geom.out_dims(OP, in_h, in_w)?;
        Ok(ConvPlan {
            batch,
            c_in,
            c_out,
            in_h,
            in_w,
            out_h,
            out_w,
            groups,
            geom,
        })
    }

    fn taps(&self) -> usize {
        self.geom.taps()
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when im2col would be the identity copy.
    fn is_pointwise(&self) -> bool {
        self.geom.kernel == (1, 1)
            && self.geom.stride == (1, 1)
            && self.geom.pad == (0, 0)
            && self.geom.dilation == (1, 1)
    }
}

/// Unfolds one batch image into `(c_in * kh * kw, out_h * out_w)` columns,
/// row index ordered by `(channel, ky, kx)`. Out-of-bounds taps read zero.
fn im2col<T: Scalar>(x: &[T], plan: &ConvPlan, cols: &mut [f64]) {
    let (kh, kw) = plan.geom.kernel;
    let (sy, sx) = plan.geom.stride;
    let (py, px) = plan.geom.pad;
    let (dy, dx) = plan.geom.dilation;
    let (h, w) = (plan.in_h, plan.in_w);
    let p = plan.positions();
    let mut row = 0;
    for c in 0..plan.c_in {
        let img = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                let mut di = 0;
                for oy in 0..plan.out_h {
                    let iy = (oy * sy + ky * dy) as isize - py as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[di..di + plan.out_w].fill(0.0);
                        di += plan.out_w;
                        continue;
                    }
                    let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..plan.out_w {
                        let ix = (ox * sx + kx * dx) as isize - px as isize;
                        dst[di] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize].to_f64()
                        };
                        di += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds column gradients back onto the padded input layout.
fn col2im_acc(dcols: &[f64], plan: &ConvPlan, gx: &mut [f64]) {
    let (kh, kw) = plan.geom.kernel;
    let (sy, sx) = plan.geom.stride;
    let (py, px) = plan.geom.pad;
    let (dy, dx) = plan.geom.dilation;
    let (h, w) = (plan.in_h, plan.in_w);
    let p = plan.positions();
    let mut row = 0;
    for c in 0..plan.c_in {
        let img = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &dcols[row * p..(row + 1) * p];
                let mut si = 0;
                for oy in 0..plan.out_h {
                    let iy = (oy * sy + ky * dy) as isize - py as isize;
                    if iy < 0 || iy >= h as isize {
                        si += plan.out_w;
                        continue;
                    }
                    let dst_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..plan.out_w {
                        let ix = (ox * sx + kx * dx) as isize - px as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[si];
                        }
                        si += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    plan: &ConvPlan,
) -> Tensor<T> {
    let p = plan.positions();
    let k_len = (plan.c_in / plan.groups) * plan.taps();
    let og = plan.c_out / plan.groups;
    let mut out = vec![T::ZERO; plan.batch * plan.c_out * p];
    let mut scratch = vec![0.0f64; plan.c_out * p];
    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f64; plan.c_in * plan.taps() * p]
    };

    let x_stride = plan.c_in * plan.in_h * plan.in_w;
    for bi in 0..plan.batch {
        let xb = &x.data()[bi * x_stride..(bi + 1) * x_stride];
        scratch.fill(0.0);
        if plan.is_pointwise() {
            for g in 0..plan.groups {
                let wg = &w.data()[g * og * k_len..(g + 1) * og * k_len];
                let xg = &xb[g * k_len * p..(g + 1) * k_len * p];
                gemm_acc(wg, xg, og, k_len, p, &mut scratch[g * og * p..(g + 1) * og * p]);
            }
        } else {
            im2col(xb, plan, &mut cols);
            for g in 0..plan.groups {
                let wg = &w.data()[g * og * k_len..(g + 1) * og * k_len];
                let cg = &cols[g * k_len * p..(g + 1) * k_len * p];
                gemm_acc(wg, cg, og, k_len, p, &mut scratch[g * og * p..(g + 1) * og * p]);
            }
        }
        let out_b = &mut out[bi * plan.c_out * p..(bi + 1) * plan.c_out * p];
        match b {
            Some(bias) => {
                for co in 0..plan.c_out {
                    let bv = bias.data()[co].to_f64();
                    for pi in 0..p {
                        out_b[co * p + pi] = T::from_f64(scratch[co * p + pi] + bv);
                    }
                }
            }
            None => {
                for (o, s) in out_b.iter_mut().zip(&scratch) {
                    *o = T::from_f64(*s);
                }
            }
        }
    }

    Tensor::from_vec(
        vec![plan.batch, plan.c_out, plan.out_h, plan.out_w],
        out,
    )
    .expect("conv2d output length matches its shape")
}

/// Accumulates input, weight, and bias gradients. `gx`, `gw`, `gb` are flat
/// `f64` buffers shaped like the corresponding forward operands.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    plan: &ConvPlan,
    grad_out: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let p = plan.positions();
    let k_len = (plan.c_in / plan.groups) * plan.taps();
    let og = plan.c_out / plan.groups;
    let x_stride = plan.c_in * plan.in_h * plan.in_w;
    let o_stride = plan.c_out * p;

    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f64; plan.c_in * plan.taps() * p]
    };
    let mut dcols = vec![0.0f64; plan.c_in * plan.taps() * p];

    for bi in 0..plan.batch {
        let xb = &x.data()[bi * x_stride..(bi + 1) * x_stride];
        let gob = &grad_out[bi * o_stride..(bi + 1) * o_stride];

        if !plan.is_pointwise() {
            im2col(xb, plan, &mut cols);
        }
        dcols.fill(0.0);
        for g in 0..plan.groups {
            let go_g = &gob[g * og * p..(g + 1) * og * p];
            let gw_g = &mut gw[g * og * k_len..(g + 1) * og * k_len];
            let w_g = &w.data()[g * og * k_len..(g + 1) * og * k_len];
            let dc_g = &mut dcols[g * k_len * p..(g + 1) * k_len * p];
            if plan.is_pointwise() {
                let xg = &xb[g * k_len * p..(g + 1) * k_len * p];
                gemm_nt_acc(go_g, xg, og, p, k_len, gw_g);
            } else {
                let c_g = &cols[g * k_len * p..(g + 1) * k_len * p];
                gemm_nt_acc(go_g, c_g, og, p, k_len, gw_g);
            }
            gemm_tn_acc(w_g, go_g, og, k_len, p, dc_g);
        }
        if plan.is_pointwise() {
            let gxb = &mut gx[bi * x_stride..(bi + 1) * x_stride];
            for (g, d) in gxb.iter_mut().zip(&dcols) {
                *g += d;
            }
        } else {
            col2im_acc(&dcols, plan, &mut gx[bi * x_stride..(bi + 1) * x_stride]);
        }
    }

    if let Some(gb) = gb {
        for bi in 0..plan.batch {
            for co in 0..plan.c_out {
                let base = bi * o_stride + co * p;
                let mut acc = 0.0;
                for pi in 0..p {
                    acc += grad_out[base + pi];
                }
                gb[co] += acc;
            }
        }
    }
}
