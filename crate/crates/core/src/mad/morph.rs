//! Image-space factor transforms. All operate on 28x28 grayscale images
//! with intensities in [0, 1] until the final colorize step maps to RGB
//! bytes. `render_image` applies them in a fixed order: thickness,
//! swelling, fracture, scale, colorize.

use rand::Rng;

use crate::mad::{
    ColorClass, Fracture, LatentFactors, ScaleClass, Swelling, Thickness, IMG_SIZE,
};
use crate::{Error, Result};

/// Pixels strictly above this intensity count as foreground when picking
/// anchor points for swelling and fracture.
const FOREGROUND_THRESHOLD: f32 = 0.25;

/// Swelling warp radius in pixels.
const SWELL_RADIUS: f32 = 7.0;
/// Swelling warp exponent.
const SWELL_GAMMA: f32 = 1.8;
/// Fracture segment length in pixels.
const FRACTURE_LEN: f32 = 6.0;
/// Fracture segment width in pixels.
const FRACTURE_WIDTH: f32 = 2.0;
/// Content scale factors.
const SCALE_LARGE: f32 = 1.15;
const SCALE_SMALL: f32 = 0.65;

fn at(img: &[f32], x: usize, y: usize) -> f32 {
    img[y * IMG_SIZE + x]
}

/// Bilinear sample with zero padding outside the canvas.
fn sample_bilinear(img: &[f32], x: f32, y: f32) -> f32 {
    if x <= -1.0 || y <= -1.0 || x >= IMG_SIZE as f32 || y >= IMG_SIZE as f32 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let fetch = |ix: f32, iy: f32| -> f32 {
        if ix < 0.0 || iy < 0.0 || ix >= IMG_SIZE as f32 || iy >= IMG_SIZE as f32 {
            0.0
        } else {
            at(img, ix as usize, iy as usize)
        }
    };
    let v00 = fetch(x0, y0);
    let v10 = fetch(x0 + 1.0, y0);
    let v01 = fetch(x0, y0 + 1.0);
    let v11 = fetch(x0 + 1.0, y0 + 1.0);
    v00 * (1.0 - fx) * (1.0 - fy)
        + v10 * fx * (1.0 - fy)
        + v01 * (1.0 - fx) * fy
        + v11 * fx * fy
}

/// List of foreground pixel coordinates (x, y), raster order.
fn foreground(img: &[f32]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            if at(img, x, y) > FOREGROUND_THRESHOLD {
                out.push((x, y));
            }
        }
    }
    out
}

/// Grayscale dilation or erosion with a Euclidean disk of radius 1
/// (the center pixel and its four edge neighbors).
pub fn thickness_morph(img: &[f32], mode: Thickness) -> Vec<f32> {
    if mode == Thickness::NoThickthinning {
        return img.to_vec();
    }
    const DISK: [(isize, isize); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
    let mut out = vec![0.0f32; IMG_SIZE * IMG_SIZE];
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let mut acc = match mode {
                Thickness::Thickening => 0.0f32,
                _ => 1.0f32,
            };
            for (dx, dy) in DISK {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                // Outside the canvas is background (intensity 0).
                let v = if nx < 0 || ny < 0 || nx >= IMG_SIZE as isize || ny >= IMG_SIZE as isize {
                    0.0
                } else {
                    at(img, nx as usize, ny as usize)
                };
                acc = match mode {
                    Thickness::Thickening => acc.max(v),
                    _ => acc.min(v),
                };
            }
            out[y * IMG_SIZE + x] = acc;
        }
    }
    out
}

/// Radial outward warp centered on a random foreground pixel: output
/// pixels within `SWELL_RADIUS` of the center pull their value from a
/// source point contracted toward the center by (r/R)^(gamma-1), which
/// magnifies the local stroke. Consumes one RNG draw for the center.
pub fn swell(img: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    let anchors = foreground(img);
    if anchors.is_empty() {
        // Nothing to swell (e.g. thinning erased a hairline stroke):
        // leave the image untouched rather than fail the sample.
        return img.to_vec();
    }
    let (cx, cy) = anchors[rng.random_range(0..anchors.len())];
    let (cx, cy) = (cx as f32, cy as f32);
    let mut out = img.to_vec();
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            if r >= SWELL_RADIUS || r == 0.0 {
                continue;
            }
            let w = (r / SWELL_RADIUS).powf(SWELL_GAMMA - 1.0);
            out[y * IMG_SIZE + x] = sample_bilinear(img, cx + w * dx, cy + w * dy);
        }
    }
    out
}

/// Erase 1-3 short background-colored segments through random foreground
/// pixels at random angles. RNG draws, in order: segment count, then per
/// segment an anchor pixel and an angle.
pub fn fracture(img: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    let mut out = img.to_vec();
    let count = rng.random_range(1..=3);
    for _ in 0..count {
        let anchors = foreground(&out);
        if anchors.is_empty() {
            break;
        }
        let (px, py) = anchors[rng.random_range(0..anchors.len())];
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (dx, dy) = (theta.cos(), theta.sin());
        let half = FRACTURE_LEN / 2.0;
        let (ax, ay) = (px as f32 - half * dx, py as f32 - half * dy);
        let (bx, by) = (px as f32 + half * dx, py as f32 + half * dy);
        let halfwidth = FRACTURE_WIDTH / 2.0;
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                // Distance from the pixel center to the segment.
                let (fx, fy) = (x as f32 - ax, y as f32 - ay);
                let (sx, sy) = (bx - ax, by - ay);
                let len2 = sx * sx + sy * sy;
                let t = ((fx * sx + fy * sy) / len2).clamp(0.0, 1.0);
                let (ex, ey) = (fx - t * sx, fy - t * sy);
                if ex * ex + ey * ey <= halfwidth * halfwidth {
                    out[y * IMG_SIZE + x] = 0.0;
                }
            }
        }
    }
    out
}

/// Rescale the content about its intensity centroid and re-center it on
/// the canvas, bilinear, clipping anything that falls outside.
pub fn scale_content(img: &[f32], class: ScaleClass) -> Vec<f32> {
    let factor = match class {
        ScaleClass::Large => SCALE_LARGE,
        ScaleClass::Small => SCALE_SMALL,
    };
    let mass: f32 = img.iter().sum();
    if mass <= 0.0 {
        return img.to_vec();
    }
    let mut cx = 0.0f32;
    let mut cy = 0.0f32;
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let v = at(img, x, y);
            cx += v * x as f32;
            cy += v * y as f32;
        }
    }
    cx /= mass;
    cy /= mass;
    let mid = (IMG_SIZE as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; IMG_SIZE * IMG_SIZE];
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let sx = cx + (x as f32 - mid) / factor;
            let sy = cy + (y as f32 - mid) / factor;
            out[y * IMG_SIZE + x] = sample_bilinear(img, sx, sy);
        }
    }
    out
}

/// Map grayscale intensity to RGB bytes through the color's channel mask.
pub fn colorize(img: &[f32], color: ColorClass) -> Vec<u8> {
    let mask: [bool; 3] = match color {
        ColorClass::Gray => [true, true, true],
        ColorClass::Red => [true, false, false],
        ColorClass::Green => [false, true, false],
        ColorClass::Blue => [false, false, true],
        ColorClass::Cyan => [false, true, true],
        ColorClass::Magenta => [true, false, true],
        ColorClass::Yellow => [true, true, false],
    };
    let mut out = Vec::with_capacity(img.len() * 3);
    for &v in img {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        for on in mask {
            out.push(if on { byte } else { 0 });
        }
    }
    out
}

/// Apply every factor to a base grayscale image, in the fixed order
/// thickness -> swelling -> fracture -> scale -> colorize. Consumes RNG
/// draws only for the factors that are "on" (swelling center, fracture
/// segments). Errors when the base image has no content at all.
pub fn render_image(
    base: &[f32],
    factors: &LatentFactors,
    rng: &mut impl Rng,
) -> Result<Vec<u8>> {
    debug_assert_eq!(base.len(), IMG_SIZE * IMG_SIZE);
    if base.iter().all(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(
            "base digit image has an empty foreground".into(),
        ));
    }
    let mut img = thickness_morph(base, factors.thickness);
    if factors.swelling == Swelling::Swelling {
        img = swell(&img, rng);
    }
    if factors.fracture == Fracture::Fracture {
        img = fracture(&img, rng);
    }
    img = scale_content(&img, factors.scale);
    Ok(colorize(&img, factors.color))
}
