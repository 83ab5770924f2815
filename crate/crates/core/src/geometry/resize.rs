//! Resampling and mirroring for full panoramas.
//!
//! Bilinear taps use the half-pixel convention src = (dst+0.5)·in/out − 0.5
//! with clamping at both axes' borders, matching the tensor-level resize so
//! model-side and data-side interpolation agree.

use crate::geometry::{ErpImage, LabelMap, ModalityStack};
use crate::{CoreError, Result};

struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<AxisTap> {
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            AxisTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            (src + 0.5).floor().clamp(0.0, (n_in - 1) as f64) as usize
        })
        .collect()
}

fn resize_bilinear(img: &ErpImage, th: usize, tw: usize) -> Result<ErpImage> {
    let mut out = ErpImage::new(tw, th, img.channels())?;
    let ys = axis_taps(img.height(), th);
    let xs = axis_taps(img.width(), tw);
    for c in 0..img.channels() {
        for (v, yt) in ys.iter().enumerate() {
            for (u, xt) in xs.iter().enumerate() {
                let v00 = img.at(c, yt.lo, xt.lo) as f64;
                let v01 = img.at(c, yt.lo, xt.hi) as f64;
                let v10 = img.at(c, yt.hi, xt.lo) as f64;
                let v11 = img.at(c, yt.hi, xt.hi) as f64;
                let top = v00 * (1.0 - xt.frac) + v01 * xt.frac;
                let bot = v10 * (1.0 - xt.frac) + v11 * xt.frac;
                let val = top * (1.0 - yt.frac) + bot * yt.frac;
                out.set(c, v, u, val as f32);
            }
        }
    }
    Ok(out)
}

/// Depth interpolation skips invalid (zero) taps: the weighted mean runs
/// over valid neighbors only, and a fully invalid neighborhood stays invalid.
fn resize_depth(img: &ErpImage, th: usize, tw: usize) -> Result<ErpImage> {
    let mut out = ErpImage::new(tw, th, 1)?;
    let ys = axis_taps(img.height(), th);
    let xs = axis_taps(img.width(), tw);
    for (v, yt) in ys.iter().enumerate() {
        for (u, xt) in xs.iter().enumerate() {
            let taps = [
                (yt.lo, xt.lo, (1.0 - yt.frac) * (1.0 - xt.frac)),
                (yt.lo, xt.hi, (1.0 - yt.frac) * xt.frac),
                (yt.hi, xt.lo, yt.frac * (1.0 - xt.frac)),
                (yt.hi, xt.hi, yt.frac * xt.frac),
            ];
            let mut sum = 0.0f64;
            let mut weight = 0.0f64;
            for (y, x, w) in taps {
                let d = img.at(0, y, x) as f64;
                if d > 0.0 && w > 0.0 {
                    sum += d * w;
                    weight += w;
                }
            }
            if weight > 0.0 {
                out.set(0, v, u, (sum / weight) as f32);
            }
        }
    }
    Ok(out)
}

fn resize_nearest_labels(labels: &LabelMap, th: usize, tw: usize) -> Result<LabelMap> {
    let mut out = LabelMap::new(tw, th)?;
    let ys = nearest_taps(labels.height(), th);
    let xs = nearest_taps(labels.width(), tw);
    for (v, &y) in ys.iter().enumerate() {
        for (u, &x) in xs.iter().enumerate() {
            out.set(v, u, labels.at(y, x));
        }
    }
    Ok(out)
}

fn renormalize(normals: &mut ErpImage) {
    let (w, h) = (normals.width(), normals.height());
    for v in 0..h {
        for u in 0..w {
            let n = [
                normals.at(0, v, u) as f64,
                normals.at(1, v, u) as f64,
                normals.at(2, v, u) as f64,
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if norm < 1e-6 {
                for c in 0..3 {
                    normals.set(c, v, u, 0.0);
                }
            } else {
                for c in 0..3 {
                    normals.set(c, v, u, (n[c] / norm) as f32);
                }
            }
        }
    }
}

/// Resizes every modality to `target_h` × `target_w` (which must keep the
/// 2:1 panorama aspect): color-like channels bilinearly, depth bilinearly
/// over valid taps only, labels by nearest neighbor, normals bilinearly
/// followed by re-normalization. A same-size target returns the stack
/// unchanged.
pub fn resize_erp(stack: &ModalityStack, target_h: usize, target_w: usize) -> Result<ModalityStack> {
    if target_h == 0 || target_w != 2 * target_h {
        return Err(CoreError::invalid(
            "resize_erp",
            format!("target must be 2:1, got {target_w}x{target_h}"),
        ));
    }
    if (target_h, target_w) == (stack.height(), stack.width()) {
        return Ok(stack.clone());
    }
    let rgb = resize_bilinear(&stack.rgb, target_h, target_w)?;
    let depth = resize_depth(&stack.depth, target_h, target_w)?;
    let mut normal = resize_bilinear(&stack.normal, target_h, target_w)?;
    renormalize(&mut normal);
    let hha = match &stack.hha {
        Some(h) => Some(resize_bilinear(h, target_h, target_w)?),
        None => None,
    };
    let labels = resize_nearest_labels(&stack.labels, target_h, target_w)?;
    ModalityStack::new(rgb, depth, normal, hha, labels)
}

fn mirror_image(img: &ErpImage) -> ErpImage {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = img.clone();
    for ch in 0..c {
        for v in 0..h {
            for u in 0..w {
                out.set(ch, v, u, img.at(ch, v, w - 1 - u));
            }
        }
    }
    out
}

/// Mirrors the panorama in u. Normals get their y component negated after
/// mirroring, since the y axis (left) flips with the image; this keeps the
/// normal field geometrically consistent with the mirrored depth. Applying
/// the flip twice restores the input bit for bit.
pub fn hflip_erp(stack: &ModalityStack) -> ModalityStack {
    let rgb = mirror_image(&stack.rgb);
    let depth = mirror_image(&stack.depth);
    let mut normal = mirror_image(&stack.normal);
    {
        let (w, h) = (normal.width(), normal.height());
        for v in 0..h {
            for u in 0..w {
                let y = normal.at(1, v, u);
                normal.set(1, v, u, -y);
            }
        }
    }
    let hha = stack.hha.as_ref().map(mirror_image);
    let mut labels = stack.labels.clone();
    let (w, h) = (labels.width(), labels.height());
    for v in 0..h {
        for u in 0..w {
            labels.set(v, u, stack.labels.at(v, w - 1 - u));
        }
    }
    ModalityStack {
        rgb,
        depth,
        normal,
        hha,
        labels,
    }
}
