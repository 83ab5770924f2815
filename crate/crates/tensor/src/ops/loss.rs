//! Pixelwise cross-entropy over logit maps.

use super::expect_rank;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tape::Labels;
use crate::tensor::Tensor;
use crate::Result;

/// Mean negative log-likelihood of the labelled class over all pixels whose
/// label is not `ignore_index`. Softmax is fused: logits go in raw.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Labels,
    ignore_index: u32,
) -> Result<(f64, usize)> {
    const OP: &str = "cross_entropy";
    let [b, c, h, w] = expect_rank::<4>(OP, logits.shape())?;
    if labels.shape != [b, h, w] {
        return Err(TensorError::shape(
            OP,
            format!("labels shape {:?} does not match logits ({b}, {h}, {w})", labels.shape),
        ));
    }
    let plane = h * w;
    let mut total = 0.0f64;
    let mut n_valid = 0usize;
    for bi in 0..b {
        let base = bi * c * plane;
        for pi in 0..plane {
            let label = labels.data[bi * plane + pi];
            if label == ignore_index {
                continue;
            }
            if label as usize >= c {
                return Err(TensorError::invalid(
                    OP,
                    format!("label {label} out of range for {c} classes"),
                ));
            }
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits.data()[base + ci * plane + pi].to_f64());
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += (logits.data()[base + ci * plane + pi].to_f64() - max).exp();
            }
            let lse = max + sum.ln();
            total += lse - logits.data()[base + label as usize * plane + pi].to_f64();
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(TensorError::invalid(OP, "every pixel carries the ignore label".to_string()));
    }
    Ok((total / n_valid as f64, n_valid))
}

/// `d loss / d logit = (softmax - onehot) / n_valid` at valid pixels, zero
/// elsewhere.
pub fn cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Labels,
    ignore_index: u32,
    n_valid: usize,
    grad_out: f64,
    gx: &mut [f64],
) {
    let [b, c, h, w] = [
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    ];
    let plane = h * w;
    let scale = grad_out / n_valid as f64;
    for bi in 0..b {
        let base = bi * c * plane;
        for pi in 0..plane {
            let label = labels.data[bi * plane + pi];
            if label == ignore_index {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits.data()[base + ci * plane + pi].to_f64());
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += (logits.data()[base + ci * plane + pi].to_f64() - max).exp();
            }
            for ci in 0..c {
                let p = (logits.data()[base + ci * plane + pi].to_f64() - max).exp() / sum;
                let onehot = (ci == label as usize) as usize as f64;
                gx[base + ci * plane + pi] += scale * (p - onehot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(shape: Vec<usize>, data: Vec<u32>) -> Labels {
        Labels::new(shape, data).unwrap()
    }

    #[test]
    fn uniform_logits_cost_log_num_classes() {
        let logits = Tensor::<f64>::zeros(vec![1, 4, 1, 2]);
        let l = labels(vec![1, 1, 2], vec![0, 3]);
        let (loss, n) = cross_entropy_forward(&logits, &l, 255).unwrap();
        assert_eq!(n, 2);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_contribute() {
        let mut logits = Tensor::<f64>::zeros(vec![1, 2, 1, 2]);
        // Second pixel would have a huge loss if counted.
        logits.set(&[0, 0, 0, 1], 50.0);
        let l = labels(vec![1, 1, 2], vec![0, 255]);
        let (loss, n) = cross_entropy_forward(&logits, &l, 255).unwrap();
        assert_eq!(n, 1);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 1]);
        let l = labels(vec![1, 1, 1], vec![255]);
        assert!(cross_entropy_forward(&logits, &l, 255).is_err());
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 1]);
        let l = labels(vec![1, 1, 1], vec![2]);
        assert!(cross_entropy_forward(&logits, &l, 255).is_err());
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_count() {
        let logits =
            Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, -1.0]).unwrap();
        let l = labels(vec![1, 1, 1], vec![0]);
        let mut gx = vec![0.0; 2];
        cross_entropy_backward(&logits, &l, 255, 1, 1.0, &mut gx);
        let p0 = (1.0f64).exp() / ((1.0f64).exp() + (-1.0f64).exp());
        assert!((gx[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((gx[1] - (1.0 - p0)).abs() < 1e-12);
    }
}
