//! Procedural few-shot dataset: every category is a distinct
//! (shape, hue, stripe frequency) motif drawn at a random position and
//! scale over smooth structured noise.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Pcg32};
use crate::tensor::Btsr;

pub const SHAPES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];
const HUES: usize = 8;
const FREQUENCIES: [f64; 3] = [1.5, 3.0, 5.0];

/// Number of distinct motifs available.
pub const MAX_CATEGORIES: usize = SHAPES.len() * HUES * FREQUENCIES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_base: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Motif of category `i`. Residues mod 5, 8 and 3 are coprime, so the
/// first 120 categories are pairwise distinct and neighbours differ in
/// every attribute.
pub fn motif(i: usize) -> (usize, usize, usize) {
    (i % SHAPES.len(), i % HUES, i % FREQUENCIES.len())
}

pub fn category_name(i: usize) -> String {
    let (s, h, f) = motif(i);
    format!("c{i:03}-{}-h{h}-f{f}", SHAPES[s])
}

/// Writes the dataset under `root` and loads it back.
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_base == 0 || cfg.n_val == 0 || cfg.n_test == 0 || cfg.per_class == 0 {
        return Err(Error::usage("category and image counts must be at least 1"));
    }
    if cfg.size < 16 {
        return Err(Error::usage(format!("image size {} is below the minimum of 16", cfg.size)));
    }
    let total = cfg.n_base + cfg.n_val + cfg.n_test;
    if total > MAX_CATEGORIES {
        return Err(Error::usage(format!(
            "{total} categories requested but only {MAX_CATEGORIES} distinct motifs exist"
        )));
    }
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(root)?;
    let mut index = String::from("path,category,split\n");
    for cat in 0..total {
        let split = if cat < cfg.n_base {
            Split::Base
        } else if cat < cfg.n_base + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let name = category_name(cat);
        let dir = root.join("images").join(&name);
        mkdir(&dir)?;
        for j in 0..cfg.per_class {
            let mut rng = rng::indexed(cfg.seed, (cat * cfg.per_class + j) as u64);
            let data = render(cat, cfg.size, &mut rng);
            let rel = format!("images/{name}/{j:04}.btsr");
            Btsr::U8 {
                shape: vec![3, cfg.size, cfg.size],
                data,
            }
            .write_file(&root.join(&rel))?;
            writeln!(index, "{rel},{name},{split}").unwrap();
        }
    }
    let path = root.join("index.csv");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Dataset::load(root)
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let (s, v) = (0.85, 0.9);
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `(dx, dy)` are offsets from the motif centre in units of its radius.
fn inside(shape: usize, dx: f64, dy: f64) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => r <= 1.0,
        1 => dx.abs().max(dy.abs()) <= 0.8,
        2 => dy <= 0.7 && dy >= -0.9 && dx.abs() <= 0.9 * (dy + 0.9) / 1.6,
        3 => (dx.abs() <= 0.3 && dy.abs() <= 0.95) || (dy.abs() <= 0.3 && dx.abs() <= 0.95),
        _ => (0.55..=1.0).contains(&r),
    }
}

fn render(cat: usize, size: usize, rng: &mut Pcg32) -> Vec<u8> {
    let (shape, hue, freq) = motif(cat);
    let color = hue_rgb(hue as f64 / HUES as f64);
    let s = size as f64;

    let gray = rng.uniform(0.3, 0.6);
    let waves: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            let cycles = rng.uniform(0.5, 3.0);
            let theta = rng.uniform(0.0, PI);
            [cycles * theta.cos(), cycles * theta.sin(), rng.uniform(0.0, 2.0 * PI), rng.uniform(0.03, 0.09), rng.uniform(-0.05, 0.05)]
        })
        .collect();

    let radius = s * rng.uniform(0.22, 0.34);
    let cx = rng.uniform(radius, s - radius);
    let cy = rng.uniform(radius, s - radius);
    let stripe_angle = rng.uniform(0.0, PI);
    let stripe_phase = rng.uniform(0.0, 2.0 * PI);
    let (ssin, scos) = stripe_angle.sin_cos();

    let mut data = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let pixel_noise = rng.uniform(-0.04, 0.04);
            let rgb = if inside(shape, dx, dy) {
                let along = (dx * scos + dy * ssin) / 2.0;
                let m = 0.65 + 0.35 * (0.5 + 0.5 * (2.0 * PI * FREQUENCIES[freq] * along + stripe_phase).sin());
                color.map(|c| c * m + pixel_noise)
            } else {
                let mut base = [gray + pixel_noise; 3];
                for w in &waves {
                    let val = w[3] * (2.0 * PI * (w[0] * u + w[1] * v) + w[2]).sin();
                    for (ch, b) in base.iter_mut().enumerate() {
                        // small per-channel tint keeps the background from being pure gray
                        *b += val + w[4] * (ch as f64 - 1.0);
                    }
                }
                base
            };
            for ch in 0..3 {
                data[(ch * size + y) * size + x] = (rgb[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    data
}
