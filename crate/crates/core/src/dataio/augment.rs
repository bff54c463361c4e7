//! Training-time image augmentation: rotation, resized crop, horizontal flip
//! and color jitter, applied in that order.

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::types::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    /// Rotation angle is drawn uniformly from ±`rotation_degrees`.
    pub rotation_degrees: f64,
    /// Crop area as a fraction of the image, drawn from `(lo, hi)`.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    /// (brightness, contrast, saturation, hue) jitter magnitudes.
    pub color_jitter: (f64, f64, f64, f64),
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            rotation_degrees: 0.0,
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            color_jitter: (0.0, 0.0, 0.0, 0.0),
        }
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: 15.0,
            crop_scale: (0.8, 1.0),
            hflip_prob: 0.5,
            color_jitter: (0.2, 0.2, 0.2, 0.05),
        }
    }
}

impl From<&ExperimentConfig> for AugmentationConfig {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            rotation_degrees: c.rotation_degrees,
            crop_scale: (c.crop_scale_min, c.crop_scale_max),
            hflip_prob: c.hflip_prob,
            color_jitter: (
                c.jitter_brightness,
                c.jitter_contrast,
                c.jitter_saturation,
                c.jitter_hue,
            ),
        }
    }
}

/// Applies one random draw of every enabled transform. Deterministic for a
/// given RNG state; outputs stay within [0, 1].
pub fn augment<R: Rng + ?Sized>(image: &Image, config: &AugmentationConfig, rng: &mut R) -> Image {
    let mut out = image.clone();

    if config.rotation_degrees > 0.0 {
        let deg = rng.random_range(-config.rotation_degrees..=config.rotation_degrees);
        if deg != 0.0 {
            out = rotate(&out, deg.to_radians());
        }
    }

    let (lo, hi) = config.crop_scale;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    if scale < 1.0 {
        let (h, w, _) = out.dim();
        let ch = ((h as f64 * scale.sqrt()).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale.sqrt()).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        if (ch, cw) != (h, w) {
            out = resized_crop(&out, y0, x0, ch, cw);
        }
    }

    if config.hflip_prob > 0.0 && rng.random_bool(config.hflip_prob.min(1.0)) {
        out = hflip(&out);
    }

    let (b, c, s, hue) = config.color_jitter;
    if b > 0.0 {
        let f = rng.random_range((1.0 - b).max(0.0)..=1.0 + b) as f32;
        out.mapv_inplace(|v| v * f);
    }
    if c > 0.0 {
        let f = rng.random_range((1.0 - c).max(0.0)..=1.0 + c) as f32;
        let (h, w, _) = out.dim();
        let mut total = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                total += gray(out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]);
            }
        }
        let mean = total / (h * w) as f32;
        out.mapv_inplace(|v| (v - mean) * f + mean);
    }
    if s > 0.0 {
        let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
        for mut row in out.outer_iter_mut() {
            for mut px in row.outer_iter_mut() {
                let g = gray(px[0], px[1], px[2]);
                px.mapv_inplace(|v| (v - g) * f + g);
            }
        }
    }
    if hue > 0.0 {
        let shift = rng.random_range(-hue..=hue);
        if shift != 0.0 {
            shift_hue(&mut out, shift);
        }
    }

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Mirrors the image left to right.
pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

fn bilinear(img: &Image, y: f64, x: f64, ch: usize) -> f32 {
    let (h, w, _) = img.dim();
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
    let bottom = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates about the image center; uncovered corners are filled with 0.
fn rotate(img: &Image, radians: f64) -> Image {
    let (h, w, c) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = radians.sin_cos();
    Image::from_shape_fn((h, w, c), |(y, x, ch)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse mapping: rotate the output coordinate back into the source
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        bilinear(img, sy, sx, ch)
    })
}

/// Crops `ch × cw` at `(y0, x0)` and resizes back to the full image size.
fn resized_crop(img: &Image, y0: usize, x0: usize, ch: usize, cw: usize) -> Image {
    let (h, w, c) = img.dim();
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    Image::from_shape_fn((h, w, c), |(y, x, k)| {
        let src_y = y0 as f64 + (y as f64 + 0.5) * sy - 0.5;
        let src_x = x0 as f64 + (x as f64 + 0.5) * sx - 0.5;
        bilinear(img, src_y, src_x, k)
    })
}

/// Rotates chroma in YIQ space by `shift` turns.
fn shift_hue(img: &mut Image, shift: f64) {
    let (sin, cos) = (std::f64::consts::TAU * shift).sin_cos();
    let (sin, cos) = (sin as f32, cos as f32);
    for mut row in img.outer_iter_mut() {
        for mut px in row.outer_iter_mut() {
            let (r, g, b) = (px[0], px[1], px[2]);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (i * cos - q * sin, i * sin + q * cos);
            px[0] = y + 0.956 * i + 0.621 * q;
            px[1] = y - 0.272 * i - 0.647 * q;
            px[2] = y - 1.106 * i + 1.703 * q;
        }
    }
}
