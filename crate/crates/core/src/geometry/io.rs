//! The on-disk panorama contract, one PNG per modality:
//! - RGB and HHA: 8-bit three-channel, values mapped linearly from [0, 1].
//! - Depth: 16-bit single-channel, millimeters (0 = invalid).
//! - Normals: 16-bit three-channel, [−1, 1] mapped to [0, 65535].
//! - Labels: 8-bit single-channel raw class indices (255 = ignore).
//!
//! Readers are strict about the stored bit depth and channel count, since a
//! silently converted file would corrupt units rather than fail loudly.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::geometry::{ErpImage, LabelMap};
use crate::{CoreError, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| CoreError::image(path, e.to_string()))
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    img.save(path)
        .map_err(|e| CoreError::image(path, e.to_string()))
}

fn check_dims(path: &Path, w: u32, h: u32) -> Result<(usize, usize)> {
    let (w, h) = (w as usize, h as usize);
    if h == 0 || w != 2 * h {
        return Err(CoreError::image(
            path,
            format!("panorama must be 2:1, file is {w}x{h}"),
        ));
    }
    Ok((w, h))
}

pub fn write_rgb_png(path: &Path, img: &ErpImage) -> Result<()> {
    write_unit_rgb8(path, img)
}

/// HHA shares the 8-bit three-channel encoding with RGB.
pub fn write_unit_rgb8(path: &Path, img: &ErpImage) -> Result<()> {
    if img.channels() != 3 {
        return Err(CoreError::invalid(
            "write_unit_rgb8",
            format!("expected 3 channels, got {}", img.channels()),
        ));
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let buf = ImageBuffer::from_fn(w, h, |x, y| {
        let q = |c: usize| {
            let v = img.at(c, y as usize, x as usize);
            (f64::from(v) * 255.0).round().clamp(0.0, 255.0) as u8
        };
        Rgb([q(0), q(1), q(2)])
    });
    save(path, DynamicImage::ImageRgb8(buf))
}

pub fn read_rgb_png(path: &Path) -> Result<ErpImage> {
    let DynamicImage::ImageRgb8(buf) = open(path)? else {
        return Err(CoreError::image(path, "expected 8-bit RGB"));
    };
    let (w, h) = check_dims(path, buf.width(), buf.height())?;
    let mut img = ErpImage::new(w, h, 3).map_err(|e| CoreError::image(path, e.to_string()))?;
    for (x, y, p) in buf.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, f32::from(p.0[c]) / 255.0);
        }
    }
    Ok(img)
}

pub fn write_depth_png(path: &Path, depth: &ErpImage) -> Result<()> {
    if depth.channels() != 1 {
        return Err(CoreError::invalid(
            "write_depth_png",
            format!("expected 1 channel, got {}", depth.channels()),
        ));
    }
    let (w, h) = (depth.width() as u32, depth.height() as u32);
    let buf = ImageBuffer::from_fn(w, h, |x, y| {
        let meters = f64::from(depth.at(0, y as usize, x as usize));
        Luma([(meters * 1000.0).round().clamp(0.0, 65535.0) as u16])
    });
    save(path, DynamicImage::ImageLuma16(buf))
}

pub fn read_depth_png(path: &Path) -> Result<ErpImage> {
    let DynamicImage::ImageLuma16(buf) = open(path)? else {
        return Err(CoreError::image(path, "expected 16-bit grayscale depth"));
    };
    let (w, h) = check_dims(path, buf.width(), buf.height())?;
    let mut img = ErpImage::new(w, h, 1).map_err(|e| CoreError::image(path, e.to_string()))?;
    for (x, y, p) in buf.enumerate_pixels() {
        img.set(0, y as usize, x as usize, f32::from(p.0[0]) / 1000.0);
    }
    Ok(img)
}

pub fn write_normals_png(path: &Path, normals: &ErpImage) -> Result<()> {
    if normals.channels() != 3 {
        return Err(CoreError::invalid(
            "write_normals_png",
            format!("expected 3 channels, got {}", normals.channels()),
        ));
    }
    let (w, h) = (normals.width() as u32, normals.height() as u32);
    let buf = ImageBuffer::from_fn(w, h, |x, y| {
        let q = |c: usize| {
            let v = f64::from(normals.at(c, y as usize, x as usize));
            ((v + 1.0) / 2.0 * 65535.0).round().clamp(0.0, 65535.0) as u16
        };
        Rgb([q(0), q(1), q(2)])
    });
    save(path, DynamicImage::ImageRgb16(buf))
}

pub fn read_normals_png(path: &Path) -> Result<ErpImage> {
    let DynamicImage::ImageRgb16(buf) = open(path)? else {
        return Err(CoreError::image(path, "expected 16-bit RGB normals"));
    };
    let (w, h) = check_dims(path, buf.width(), buf.height())?;
    let mut img = ErpImage::new(w, h, 3).map_err(|e| CoreError::image(path, e.to_string()))?;
    for (x, y, p) in buf.enumerate_pixels() {
        for c in 0..3 {
            let v = f64::from(p.0[c]) / 65535.0 * 2.0 - 1.0;
            img.set(c, y as usize, x as usize, v as f32);
        }
    }
    Ok(img)
}

pub fn write_labels_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let (w, h) = (labels.width() as u32, labels.height() as u32);
    let buf = ImageBuffer::from_fn(w, h, |x, y| Luma([labels.at(y as usize, x as usize)]));
    save(path, DynamicImage::ImageLuma8(buf))
}

pub fn read_labels_png(path: &Path) -> Result<LabelMap> {
    let DynamicImage::ImageLuma8(buf) = open(path)? else {
        return Err(CoreError::image(path, "expected 8-bit grayscale labels"));
    };
    let (w, h) = check_dims(path, buf.width(), buf.height())?;
    let mut map = LabelMap::new(w, h).map_err(|e| CoreError::image(path, e.to_string()))?;
    for (x, y, p) in buf.enumerate_pixels() {
        map.set(y as usize, x as usize, p.0[0]);
    }
    Ok(map)
}
