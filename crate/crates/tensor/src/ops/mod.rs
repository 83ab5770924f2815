//! Numeric kernels behind the tape operations.
//!
//! Kernels are plain functions over tensor storage. Forward passes read the
//! stored scalar type and accumulate in `f64`; backward passes exchange `f64`
//! gradient buffers exclusively. Element visitation order is fixed, so every
//! kernel is bit-reproducible.

pub mod conv;
pub mod dense;
pub mod eltwise;
pub mod gemm;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod sample;

use crate::error::TensorError;
use crate::Result;

/// Geometry of a sliding-window operation (convolution, pooling, deformable
/// sampling): kernel extents, stride, zero-padding, and dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl WindowGeom {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        WindowGeom {
            kernel,
            stride,
            pad,
            dilation: (1, 1),
        }
    }

    /// Square kernel/stride/padding shorthand.
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        WindowGeom::new((kernel, kernel), (stride, stride), (pad, pad))
    }

    /// Number of kernel taps.
    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Output extent along one axis, or an error when no window fits.
    fn out_extent(op: &'static str, axis: &str, input: usize, k: usize, s: usize, p: usize, d: usize) -> Result<usize> {
        if k == 0 || s == 0 || d == 0 {
            return Err(TensorError::invalid(
                op,
                format!("{axis}: kernel, stride and dilation must be positive (k={k}, s={s}, d={d})"),
            ));
        }
        let span = d * (k - 1) + 1;
        let padded = input + 2 * p;
        if padded < span {
            return Err(TensorError::invalid(
                op,
                format!("{axis}: padded extent {padded} is smaller than the window span {span}"),
            ));
        }
        Ok((padded - span) / s + 1)
    }

    /// Output height and width for an input of `(h, w)`.
    pub fn out_dims(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::out_extent(op, "height", h, self.kernel.0, self.stride.0, self.pad.0, self.dilation.0)?;
        let ow = Self::out_extent(op, "width", w, self.kernel.1, self.stride.1, self.pad.1, self.dilation.1)?;
        Ok((oh, ow))
    }
}

/// Checks that a shape has the expected rank and returns it as a fixed-size
/// array for convenient destructuring.
pub(crate) fn expect_rank<const R: usize>(
    op: &'static str,
    shape: &[usize],
) -> Result<[usize; R]> {
    if shape.len() != R {
        return Err(TensorError::RankMismatch {
            op,
            expected: R,
            shape: shape.to_vec(),
        });
    }
    let mut out = [0usize; R];
    out.copy_from_slice(shape);
    Ok(out)
}
