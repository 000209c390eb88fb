use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{GrayImage, Mask, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rotation {
    None,
    /// Multiples of 90 degrees; non-square inputs only get 0 or 180.
    RightAngles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_horizontal_prob: f64,
    pub flip_vertical_prob: f64,
    pub rotation: Rotation,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_horizontal_prob: 0.5,
            flip_vertical_prob: 0.5,
            rotation: Rotation::RightAngles,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            flip_horizontal_prob: 0.0,
            flip_vertical_prob: 0.0,
            rotation: Rotation::None,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        for (name, p) in [
            ("flip_horizontal_prob", self.flip_horizontal_prob),
            ("flip_vertical_prob", self.flip_vertical_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errors.push(format!("data.augment.{name} must be in [0, 1], got {p}"));
            }
        }
        errors
    }
}

/// A composition of flips and a rotation by `quarter_turns * 90` degrees
/// (counter-clockwise), applied flips first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn sample(cfg: &AugmentationConfig, square: bool, rng: &mut ChaCha8Rng) -> Self {
        let flip_h = rng.random::<f64>() < cfg.flip_horizontal_prob;
        let flip_v = rng.random::<f64>() < cfg.flip_vertical_prob;
        let quarter_turns = match cfg.rotation {
            Rotation::None => 0,
            Rotation::RightAngles if square => rng.random_range(0..4u8),
            Rotation::RightAngles => 2 * rng.random_range(0..2u8),
        };
        Self {
            flip_h,
            flip_v,
            quarter_turns,
        }
    }

    /// Output size for a `w x h` input.
    pub fn output_size(&self, w: usize, h: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    /// Source pixel for output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        // Undo the rotation, then the flips.
        let (ow, oh) = self.output_size(w, h);
        let (mut sx, mut sy) = (x, y);
        let (mut cw, mut ch) = (ow, oh);
        for _ in 0..self.quarter_turns % 4 {
            // Inverse of one counter-clockwise quarter turn.
            let (nx, ny) = (ch - 1 - sy, sx);
            sx = nx;
            sy = ny;
            std::mem::swap(&mut cw, &mut ch);
        }
        if self.flip_v {
            sy = h - 1 - sy;
        }
        if self.flip_h {
            sx = w - 1 - sx;
        }
        (sx, sy)
    }

    pub fn apply<P: Copy>(&self, data: &[P], w: usize, h: usize) -> Vec<P> {
        let (ow, oh) = self.output_size(w, h);
        let mut out = Vec::with_capacity(data.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(x, y, w, h);
                out.push(data[sy * w + sx]);
            }
        }
        out
    }

    pub fn apply_image(&self, img: &GrayImage) -> GrayImage {
        let (width, height) = self.output_size(img.width, img.height);
        GrayImage {
            width,
            height,
            data: self.apply(&img.data, img.width, img.height),
        }
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (width, height) = self.output_size(mask.width, mask.height);
        Mask {
            width,
            height,
            data: self.apply(&mask.data, mask.width, mask.height),
        }
    }
}

/// Applies one random transform jointly to the image and its mask.
pub fn augment(sample: &Sample, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Sample {
    let (w, h) = sample.size();
    let t = Transform::sample(cfg, w == h, rng);
    Sample {
        id: sample.id.clone(),
        image: t.apply_image(&sample.image),
        mask: sample.mask.as_ref().map(|m| t.apply_mask(m)),
        source: sample.source,
    }
}
