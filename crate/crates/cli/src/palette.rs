//! Fixed color palette for rendering label maps.
//!
//! Class `c` maps to hue `c * 137.508` degrees (mod 360) at saturation 0.75
//! and value 0.95. The golden-angle step keeps consecutive class colors far
//! apart on the hue wheel, so masks stay readable for any class count. The
//! ignore label renders as black.

use panofuse_core::IGNORE_LABEL;

/// RGB color assigned to a class id. Deterministic; identical across runs.
pub fn class_color(class: u8) -> [u8; 3] {
    if class == IGNORE_LABEL {
        return [0, 0, 0];
    }
    let hue = (class as f64 * 137.508) % 360.0;
    hsv_to_rgb(hue, 0.75, 0.95)
}

/// Standard HSV to RGB conversion. `h` in degrees [0, 360), `s` and `v` in [0, 1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let sector = h / 60.0;
    let x = c * (1.0 - (sector % 2.0 - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let quant = |f: f64| ((f + m) * 255.0).round() as u8;
    [quant(r), quant(g), quant(b)]
}
