//! Equirectangular (ERP) image handling and spherical geometry.
//!
//! Coordinate conventions, fixed once for the whole crate:
//! - World axes: x forward, y left, z up. Gravity defaults to (0, 0, 1).
//! - A full panorama is a 2:1 image. Pixel (u, v) has longitude
//!   λ = (u+0.5)/W·2π − π and latitude φ = π/2 − (v+0.5)/H·π, so u = W/2
//!   looks forward and v = 0 looks up.
//! - u increases to the image right, which pans toward −y; the ray formula
//!   therefore carries a minus sign on the y component.
//!
//! Depth is metric (meters) along the ray, with 0 meaning invalid; the
//! invalid flag propagates conservatively through every derived quantity.

mod io;
mod resize;

pub use io::{
    read_depth_png, read_labels_png, read_normals_png, read_rgb_png, write_depth_png,
    write_labels_png, write_normals_png, write_rgb_png, write_unit_rgb8,
};
pub use resize::{hflip_erp, resize_erp};

use crate::{CoreError, Result};

/// Depth clamp range and height ceiling for the HHA encoding, in meters.
/// Indoor scenes fit comfortably; the constants are part of the on-disk
/// contract so encodings from different runs are comparable.
pub const HHA_DISPARITY_MIN: f64 = 0.1;
pub const HHA_DISPARITY_MAX: f64 = 10.0;
pub const HHA_HEIGHT_MAX: f64 = 3.0;

/// Label value that marks pixels excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// A dense multi-channel image over the full sphere, stored as channel
/// planes (channel-major, row-major within a plane).
///
/// The 2:1 aspect is an invariant: a full 360°×180° panorama is the only
/// shape this type represents. Crops taken during training are plain
/// tensors, not `ErpImage`s.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ErpImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(CoreError::invalid(
                "ErpImage::new",
                format!("width must be twice height, got {width}x{height}"),
            ));
        }
        if channels == 0 {
            return Err(CoreError::invalid("ErpImage::new", "zero channels"));
        }
        Ok(ErpImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let mut img = ErpImage::new(width, height, channels)?;
        if data.len() != img.data.len() {
            return Err(CoreError::invalid(
                "ErpImage::from_data",
                format!("expected {} values, got {}", img.data.len(), data.len()),
            ));
        }
        img.data = data;
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn at(&self, c: usize, v: usize, u: usize) -> f32 {
        self.data[(c * self.height + v) * self.width + u]
    }

    pub fn set(&mut self, c: usize, v: usize, u: usize, value: f32) {
        self.data[(c * self.height + v) * self.width + u] = value;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Per-pixel class indices for a full panorama; `IGNORE_LABEL` marks
/// excluded pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(CoreError::invalid(
                "LabelMap::new",
                format!("width must be twice height, got {width}x{height}"),
            ));
        }
        Ok(LabelMap {
            width,
            height,
            data: vec![IGNORE_LABEL; width * height],
        })
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        let mut map = LabelMap::new(width, height)?;
        if data.len() != map.data.len() {
            return Err(CoreError::invalid(
                "LabelMap::from_data",
                format!("expected {} values, got {}", map.data.len(), data.len()),
            ));
        }
        map.data = data;
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, v: usize, u: usize) -> u8 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, v: usize, u: usize, value: u8) {
        self.data[v * self.width + u] = value;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// Camera extrinsics relevant to geocentric encodings: which way is up,
/// and how far the camera sits above the floor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraPose {
    pub gravity: [f64; 3],
    pub camera_height: f64,
}

impl CameraPose {
    pub fn new(gravity: [f64; 3], camera_height: f64) -> Result<Self> {
        let norm = (gravity[0] * gravity[0] + gravity[1] * gravity[1] + gravity[2] * gravity[2])
            .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::invalid(
                "CameraPose::new",
                format!("gravity must be unit length, norm is {norm}"),
            ));
        }
        if camera_height <= 0.0 {
            return Err(CoreError::invalid(
                "CameraPose::new",
                format!("camera_height must be positive, got {camera_height}"),
            ));
        }
        Ok(CameraPose {
            gravity,
            camera_height,
        })
    }

    /// World-up gravity at the given height above the floor.
    pub fn upright(camera_height: f64) -> Result<Self> {
        CameraPose::new([0.0, 0.0, 1.0], camera_height)
    }
}

/// One aligned multi-modal panorama: color, metric depth, unit normals,
/// an optional HHA encoding, and class labels, all at the same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStack {
    pub rgb: ErpImage,
    pub depth: ErpImage,
    pub normal: ErpImage,
    pub hha: Option<ErpImage>,
    pub labels: LabelMap,
}

impl ModalityStack {
    pub fn new(
        rgb: ErpImage,
        depth: ErpImage,
        normal: ErpImage,
        hha: Option<ErpImage>,
        labels: LabelMap,
    ) -> Result<Self> {
        let (w, h) = (rgb.width(), rgb.height());
        let check = |name: &str, iw: usize, ih: usize, ic: usize, want_c: usize| {
            if (iw, ih) != (w, h) {
                return Err(CoreError::mismatch(
                    "ModalityStack::new",
                    format!("{name} is {iw}x{ih}, rgb is {w}x{h}"),
                ));
            }
            if ic != want_c {
                return Err(CoreError::mismatch(
                    "ModalityStack::new",
                    format!("{name} has {ic} channels, expected {want_c}"),
                ));
            }
            Ok(())
        };
        check("rgb", rgb.width(), rgb.height(), rgb.channels(), 3)?;
        check("depth", depth.width(), depth.height(), depth.channels(), 1)?;
        check(
            "normal",
            normal.width(),
            normal.height(),
            normal.channels(),
            3,
        )?;
        if let Some(hha) = &hha {
            check("hha", hha.width(), hha.height(), hha.channels(), 3)?;
        }
        if (labels.width(), labels.height()) != (w, h) {
            return Err(CoreError::mismatch(
                "ModalityStack::new",
                format!(
                    "labels is {}x{}, rgb is {w}x{h}",
                    labels.width(),
                    labels.height()
                ),
            ));
        }
        Ok(ModalityStack {
            rgb,
            depth,
            normal,
            hha,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }
}

/// Unit view ray through the (possibly fractional) pixel coordinate (u, v).
///
/// Accepts continuous coordinates in [0, W) × [0, H); the pixel-center
/// convention lives in the formula, so integer u, v address pixel centers.
pub fn erp_pixel_to_ray(u: f64, v: f64, width: usize, height: usize) -> Result<[f64; 3]> {
    if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
        return Err(CoreError::invalid(
            "erp_pixel_to_ray",
            format!("pixel ({u}, {v}) outside {width}x{height}"),
        ));
    }
    Ok(ray_unchecked(u, v, width, height))
}

/// `erp_pixel_to_ray` without the range check, for interior loops that
/// generate coordinates themselves.
pub(crate) fn ray_unchecked(u: f64, v: f64, width: usize, height: usize) -> [f64; 3] {
    let lon = (u + 0.5) / width as f64 * std::f64::consts::TAU - std::f64::consts::PI;
    let lat = std::f64::consts::FRAC_PI_2 - (v + 0.5) / height as f64 * std::f64::consts::PI;
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    // u grows to the image right, which pans toward -y under y-left.
    [cos_lat * cos_lon, -cos_lat * sin_lon, sin_lat]
}

/// Per-pixel unit surface normals from central differences of back-projected
/// 3D points, oriented toward the camera.
///
/// A pixel is invalid (zero vector) when its own depth or any of the four
/// neighbors' depths is invalid, including the top and bottom rows where a
/// vertical neighbor does not exist. Horizontal neighbors wrap around the
/// seam; vertical ones do not cross the poles.
pub fn normals_from_depth(depth: &ErpImage, _pose: &CameraPose) -> Result<ErpImage> {
    if depth.channels() != 1 {
        return Err(CoreError::invalid(
            "normals_from_depth",
            format!("depth must have 1 channel, got {}", depth.channels()),
        ));
    }
    let (w, h) = (depth.width(), depth.height());
    let mut out = ErpImage::new(w, h, 3)?;

    let point = |v: usize, u: usize| -> Option<[f64; 3]> {
        let d = depth.at(0, v, u) as f64;
        if d <= 0.0 {
            return None;
        }
        let r = ray_unchecked(u as f64, v as f64, w, h);
        Some([r[0] * d, r[1] * d, r[2] * d])
    };

    for v in 1..h.saturating_sub(1) {
        for u in 0..w {
            let (Some(_), Some(pl), Some(pr), Some(pu), Some(pd)) = (
                point(v, u),
                point(v, (u + w - 1) % w),
                point(v, (u + 1) % w),
                point(v - 1, u),
                point(v + 1, u),
            ) else {
                continue;
            };
            let du = [pr[0] - pl[0], pr[1] - pl[1], pr[2] - pl[2]];
            let dv = [pd[0] - pu[0], pd[1] - pu[1], pd[2] - pu[2]];
            let mut n = [
                du[1] * dv[2] - du[2] * dv[1],
                du[2] * dv[0] - du[0] * dv[2],
                du[0] * dv[1] - du[1] * dv[0],
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if norm < 1e-12 {
                continue;
            }
            let ray = ray_unchecked(u as f64, v as f64, w, h);
            let toward = n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2];
            let scale = if toward > 0.0 { -1.0 / norm } else { 1.0 / norm };
            n = [n[0] * scale, n[1] * scale, n[2] * scale];
            out.set(0, v, u, n[0] as f32);
            out.set(1, v, u, n[1] as f32);
            out.set(2, v, u, n[2] as f32);
        }
    }
    Ok(out)
}

/// Geocentric three-channel depth encoding, each channel in [0, 1]:
/// disparity (clamped inverse depth, min-max scaled), height above ground
/// (clamped to [0, HHA_HEIGHT_MAX] and scaled), and the angle between the
/// surface normal and gravity (scaled by 1/π).
///
/// Invalid-depth pixels produce 0 in all channels; the angle channel is
/// also 0 where the normal itself is invalid.
pub fn hha_encode(depth: &ErpImage, pose: &CameraPose, normals: &ErpImage) -> Result<ErpImage> {
    if pose.camera_height <= 0.0 {
        return Err(CoreError::invalid(
            "hha_encode",
            format!("camera_height must be positive, got {}", pose.camera_height),
        ));
    }
    if depth.channels() != 1 || normals.channels() != 3 {
        return Err(CoreError::invalid(
            "hha_encode",
            format!(
                "expected 1-channel depth and 3-channel normals, got {} and {}",
                depth.channels(),
                normals.channels()
            ),
        ));
    }
    if (depth.width(), depth.height()) != (normals.width(), normals.height()) {
        return Err(CoreError::mismatch(
            "hha_encode",
            format!(
                "depth is {}x{}, normals is {}x{}",
                depth.width(),
                depth.height(),
                normals.width(),
                normals.height()
            ),
        ));
    }
    let (w, h) = (depth.width(), depth.height());
    let g = pose.gravity;
    let mut out = ErpImage::new(w, h, 3)?;
    for v in 0..h {
        for u in 0..w {
            let d = depth.at(0, v, u) as f64;
            if d <= 0.0 {
                continue;
            }
            let disparity = (1.0 / d).clamp(HHA_DISPARITY_MIN, HHA_DISPARITY_MAX);
            let disparity = (disparity - HHA_DISPARITY_MIN) / (HHA_DISPARITY_MAX - HHA_DISPARITY_MIN);

            let ray = ray_unchecked(u as f64, v as f64, w, h);
            let height_above =
                (ray[0] * g[0] + ray[1] * g[1] + ray[2] * g[2]) * d + pose.camera_height;
            let height_above = height_above.clamp(0.0, HHA_HEIGHT_MAX) / HHA_HEIGHT_MAX;

            let n = [
                normals.at(0, v, u) as f64,
                normals.at(1, v, u) as f64,
                normals.at(2, v, u) as f64,
            ];
            let n_norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let angle = if n_norm < 0.5 {
                0.0
            } else {
                let cos = ((n[0] * g[0] + n[1] * g[1] + n[2] * g[2]) / n_norm).clamp(-1.0, 1.0);
                cos.acos() / std::f64::consts::PI
            };

            out.set(0, v, u, disparity as f32);
            out.set(1, v, u, height_above as f32);
            out.set(2, v, u, angle as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_convention_hits_forward_left_and_pole() {
        let (w, h) = (128, 64);
        let fwd = erp_pixel_to_ray(w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h).unwrap();
        assert!((fwd[0] - 1.0).abs() < 1e-12 && fwd[1].abs() < 1e-12 && fwd[2].abs() < 1e-12);

        let right = erp_pixel_to_ray(3.0 * w as f64 / 4.0 - 0.5, h as f64 / 2.0 - 0.5, w, h)
            .unwrap();
        assert!(right[0].abs() < 1e-9, "{right:?}");
        assert!((right[1] + 1.0).abs() < 1e-9, "{right:?}");
        assert!(right[2].abs() < 1e-9, "{right:?}");

        let top = erp_pixel_to_ray(0.0, 0.0, w, h).unwrap();
        assert!(top[2] > 0.99, "near-pole ray should point almost straight up");
    }

    #[test]
    fn rays_are_unit_norm_everywhere() {
        let (w, h) = (32, 16);
        for v in 0..h {
            for u in 0..w {
                let r = erp_pixel_to_ray(u as f64, v as f64, w, h).unwrap();
                let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_pixel_is_rejected() {
        assert!(erp_pixel_to_ray(128.0, 0.0, 128, 64).is_err());
        assert!(erp_pixel_to_ray(-0.1, 0.0, 128, 64).is_err());
    }

    #[test]
    fn constant_depth_normals_point_back_at_camera() {
        let (w, h) = (64, 32);
        let depth = ErpImage::from_data(w, h, 1, vec![2.0; w * h]).unwrap();
        let pose = CameraPose::upright(1.5).unwrap();
        let normals = normals_from_depth(&depth, &pose).unwrap();
        for v in 2..h - 2 {
            for u in 0..w {
                let ray = erp_pixel_to_ray(u as f64, v as f64, w, h).unwrap();
                for c in 0..3 {
                    let err = (normals.at(c, v, u) as f64 + ray[c]).abs();
                    assert!(err < 2e-2, "pixel ({v},{u}) channel {c}: {err}");
                }
            }
        }
    }

    #[test]
    fn invalid_depth_poisons_the_neighborhood() {
        let (w, h) = (32, 16);
        let mut depth = ErpImage::from_data(w, h, 1, vec![2.0; w * h]).unwrap();
        depth.set(0, 8, 10, 0.0);
        let normals = normals_from_depth(&depth, &CameraPose::upright(1.0).unwrap()).unwrap();
        for (v, u) in [(8, 10), (8, 9), (8, 11), (7, 10), (9, 10)] {
            assert_eq!(normals.at(0, v, u), 0.0);
            assert_eq!(normals.at(1, v, u), 0.0);
            assert_eq!(normals.at(2, v, u), 0.0);
        }
        // Two pixels away the neighborhood is clean again.
        assert!(normals.at(2, 8, 13).abs() > 0.0);
    }

    #[test]
    fn pole_rows_are_invalid() {
        let (w, h) = (32, 16);
        let depth = ErpImage::from_data(w, h, 1, vec![1.0; w * h]).unwrap();
        let normals = normals_from_depth(&depth, &CameraPose::upright(1.0).unwrap()).unwrap();
        for u in 0..w {
            for c in 0..3 {
                assert_eq!(normals.at(c, 0, u), 0.0);
                assert_eq!(normals.at(c, h - 1, u), 0.0);
            }
        }
    }

    #[test]
    fn hha_disparity_matches_the_scaling_formula() {
        let (w, h) = (32, 16);
        let depth = ErpImage::from_data(w, h, 1, vec![2.0; w * h]).unwrap();
        let pose = CameraPose::upright(1.5).unwrap();
        let normals = normals_from_depth(&depth, &pose).unwrap();
        let hha = hha_encode(&depth, &pose, &normals).unwrap();
        let expected = (0.5 - 0.1) / (10.0 - 0.1);
        assert!((hha.at(0, 8, 5) as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn hha_channels_stay_in_unit_range_and_invalid_is_zero() {
        let (w, h) = (32, 16);
        let mut data = vec![0.0f32; w * h];
        for (i, d) in data.iter_mut().enumerate() {
            *d = 0.05 + (i % 97) as f32 * 0.5;
        }
        data[40] = 0.0;
        let depth = ErpImage::from_data(w, h, 1, data).unwrap();
        let pose = CameraPose::upright(1.2).unwrap();
        let normals = normals_from_depth(&depth, &pose).unwrap();
        let hha = hha_encode(&depth, &pose, &normals).unwrap();
        for c in 0..3 {
            for &x in hha.plane(c) {
                assert!((0.0..=1.0).contains(&x));
            }
            assert_eq!(hha.at(c, 40 / w, 40 % w), 0.0);
        }
    }

    #[test]
    fn camera_pose_validation() {
        assert!(CameraPose::new([0.0, 0.0, 2.0], 1.0).is_err());
        assert!(CameraPose::new([0.0, 0.0, 1.0], 0.0).is_err());
        assert!(CameraPose::new([0.0, 0.0, 1.0], 1.6).is_ok());
    }

    #[test]
    fn erp_image_enforces_aspect() {
        assert!(ErpImage::new(64, 33, 3).is_err());
        assert!(ErpImage::new(64, 32, 3).is_ok());
        assert!(LabelMap::new(10, 5).is_ok());
        assert!(LabelMap::new(10, 6).is_err());
    }
}
