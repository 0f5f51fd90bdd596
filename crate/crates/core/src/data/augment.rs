//! Training-time augmentation: random horizontal flip followed by a
//! random affine warp (rotation, translation, isotropic scale) with
//! bilinear resampling and edge clamping.

use crate::rng::Pcg32;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Fraction of the image extent.
    pub max_translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            max_translate: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

/// Mirrors a c×h×w image left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let (c, h, w) = image.dims3().expect("c×h×w image");
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Draws (flip, angle, tx, ty, scale) from `rng` in that order.
pub fn augment(image: &Tensor, rng: &mut Pcg32, cfg: &AugmentConfig) -> Tensor {
    let flip = rng.next_f64() < cfg.flip_prob;
    let angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();
    let tx = rng.uniform(-cfg.max_translate, cfg.max_translate);
    let ty = rng.uniform(-cfg.max_translate, cfg.max_translate);
    let scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    let base = if flip { hflip(image) } else { image.clone() };
    if angle == 0.0 && tx == 0.0 && ty == 0.0 && scale == 1.0 {
        return base;
    }
    affine(&base, angle, tx, ty, scale)
}

/// Samples each output pixel from the inverse-mapped source location.
fn affine(image: &Tensor, angle: f64, tx: f64, ty: f64, scale: f64) -> Tensor {
    let (c, h, w) = image.dims3().expect("c×h×w image");
    let src = image.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let (dx, dy) = (tx * w as f64, ty * h as f64);
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 - cx - dx;
            let py = y as f64 - cy - dy;
            let sx = (cos * px + sin * py) / scale + cx;
            let sy = (-sin * px + cos * py) / scale + cy;
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ch * h + y) * w + x] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}
