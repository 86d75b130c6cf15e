//! Static color renderings of maps and images (PNG).

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::error::Result;
use crate::raster::PanopticPartMap;
use crate::taxonomy::{Taxonomy, VOID};

/// Stable class color from a hashed hue; void stays black.
fn class_color(id: u16) -> [f64; 3] {
    if id == VOID {
        return [0.0, 0.0, 0.0];
    }
    let h = (id as u64).wrapping_mul(0x9E3779B97F4A7C15) >> 40;
    hsv(h as f64 / 16777216.0 * 360.0, 0.65, 0.9)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Scene classes set the hue, instances modulate brightness, part labels
/// blend toward the part color.
pub fn render_map(map: &PanopticPartMap, _tax: &Taxonomy) -> RgbImage {
    let (h, w) = map.dims();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let base = class_color(map.scene[[y, x]]);
            let inst = map.instance[[y, x]];
            let scale = if inst > 0 {
                0.7 + 0.3 * ((inst as f64 * 0.37).sin() * 0.5 + 0.5)
            } else {
                1.0
            };
            let mut rgb = [base[0] * scale, base[1] * scale, base[2] * scale];
            let part = map.part[[y, x]];
            if part != VOID {
                let pc = class_color(part + 100);
                for c in 0..3 {
                    rgb[c] = 0.45 * rgb[c] + 0.55 * pc[c];
                }
            }
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])]),
            );
        }
    }
    img
}

pub fn render_input(image: &Array3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    to_u8(image[[0, y, x]]),
                    to_u8(image[[1, y, x]]),
                    to_u8(image[[2, y, x]]),
                ]),
            );
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save(path.as_ref())
        .map_err(|e| crate::error::Error::Format(format!("png write failed: {e}")))
}
