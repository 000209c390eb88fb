use image::imageops;
use image::{ImageBuffer, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sample::{GrayImage, Mask, Sample, Source};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Procedural ultrasound-like images: dark elliptical lesions on a brighter
/// textured background, multiplicative speckle and a mild blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGenConfig {
    pub image_size: usize,
    /// Inclusive range for the number of lesions per image.
    pub lesion_count_range: (usize, usize),
    /// Inclusive range of full ellipse axis lengths, in pixels.
    pub lesion_axis_range: (f64, f64),
    /// Lesion intensity as a fraction of the local background.
    pub lesion_contrast: f64,
    /// Unlabeled dark blobs that mimic shadowing artefacts.
    pub distractor_count_range: (usize, usize),
    pub distractor_contrast: f64,
    pub speckle_strength: f64,
    pub blur_sigma: f64,
    pub background_level: f64,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            lesion_count_range: (1, 2),
            lesion_axis_range: (10.0, 26.0),
            lesion_contrast: 0.45,
            distractor_count_range: (0, 2),
            distractor_contrast: 0.7,
            speckle_strength: 0.35,
            blur_sigma: 0.8,
            background_level: 0.6,
            seed: 0,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let s = self.image_size as f64;
        if self.image_size < 16 {
            errors.push(format!("toy.image_size must be >= 16, got {}", self.image_size));
        }
        let (lo, hi) = self.lesion_axis_range;
        if !(lo > 0.0 && lo <= hi && hi < s) {
            errors.push(format!("toy.lesion_axis_range ({lo}, {hi}) must fit inside the image"));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            errors.push("toy.lesion_count_range must be ordered".into());
        }
        if self.distractor_count_range.0 > self.distractor_count_range.1 {
            errors.push("toy.distractor_count_range must be ordered".into());
        }
        for (name, v) in [
            ("lesion_contrast", self.lesion_contrast),
            ("distractor_contrast", self.distractor_contrast),
            ("background_level", self.background_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("toy.{name} must be in [0, 1], got {v}"));
            }
        }
        if self.speckle_strength < 0.0 || self.blur_sigma < 0.0 {
            errors.push("toy.speckle_strength and toy.blur_sigma must be >= 0".into());
        }
        errors
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    /// Semi-axes.
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn random(size: f64, axes: (f64, f64), rng: &mut ChaCha8Rng) -> Self {
        let draw = |rng: &mut ChaCha8Rng| {
            if axes.1 > axes.0 {
                rng.random_range(axes.0..=axes.1)
            } else {
                axes.0
            }
        };
        let a = draw(rng) / 2.0;
        let b = draw(rng) / 2.0;
        let r = a.max(b) + 1.0;
        let (lo, hi) = (r, (size - r).max(r));
        Self {
            cx: rng.random_range(lo..=hi),
            cy: rng.random_range(lo..=hi),
            a,
            b,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn count_in(range: (usize, usize), rng: &mut ChaCha8Rng) -> usize {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

fn generate_one(cfg: &ToyGenConfig, index: usize) -> Sample {
    let mut rng = rng_from(derive_seed(cfg.seed, &format!("toy{index}")));
    let n = cfg.image_size;
    let size = n as f64;
    let lesions: Vec<Ellipse> = (0..count_in(cfg.lesion_count_range, &mut rng))
        .map(|_| Ellipse::random(size, cfg.lesion_axis_range, &mut rng))
        .collect();
    let distractors: Vec<Ellipse> = (0..count_in(cfg.distractor_count_range, &mut rng))
        .map(|_| Ellipse::random(size, cfg.lesion_axis_range, &mut rng))
        .collect();
    // Smooth tissue layering: a vertical gradient and two random ripples.
    let (fx, fy, px, py) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut mask = vec![0u8; n * n];
    let mut pixels = vec![0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = std::f64::consts::TAU / size;
            let bg = cfg.background_level
                * (0.85 + 0.15 * (v / size))
                * (1.0 + 0.08 * (fx * t * u + px).sin() + 0.08 * (fy * t * v + py).sin());
            let mut val = bg;
            if distractors.iter().any(|e| e.contains(u, v)) {
                val *= cfg.distractor_contrast;
            }
            if lesions.iter().any(|e| e.contains(u, v)) {
                mask[y * n + x] = 1;
                val = bg * cfg.lesion_contrast;
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            val *= (1.0 + cfg.speckle_strength * noise).max(0.0);
            pixels[y * n + x] = val.clamp(0.0, 1.0) as f32;
        }
    }
    if cfg.blur_sigma > 0.0 {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(n as u32, n as u32, pixels).expect("square buffer");
        pixels = imageops::blur(&buf, cfg.blur_sigma as f32).into_raw();
    }
    let image = GrayImage {
        width: n,
        height: n,
        data: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    };
    Sample {
        id: format!("toy_{index:05}"),
        image,
        mask: Some(Mask {
            width: n,
            height: n,
            data: mask,
        }),
        source: Source::RealLabeled,
    }
}

/// `n` labeled toy samples. Sample `i` depends only on `(config, i)`.
pub fn generate_toy(cfg: &ToyGenConfig, n: usize) -> Result<Vec<Sample>> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    if n == 0 {
        return Err(Error::Invalid("toy sample count must be >= 1".into()));
    }
    Ok((0..n).map(|i| generate_one(cfg, i)).collect())
}
