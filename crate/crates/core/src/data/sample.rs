use std::fmt;

use crate::error::{Error, Result};

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "image buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Binary mask, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "mask buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Pixel-wise OR. Shapes must match.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Data(format!(
                "cannot merge {}x{} mask with {}x{} mask",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    RealLabeled,
    RealUnlabeled,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::RealLabeled => "real-labeled",
            Source::RealUnlabeled => "real-unlabeled",
            Source::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: Option<Mask>,
    pub source: Source,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: GrayImage, mask: Option<Mask>, source: Source) -> Result<Self> {
        let id = id.into();
        if let Some(m) = &mask {
            if (m.width, m.height) != (image.width, image.height) {
                return Err(Error::Data(format!(
                    "{id}: mask {}x{} does not match image {}x{}",
                    m.width, m.height, image.width, image.height
                )));
            }
        }
        Ok(Self {
            id,
            image,
            mask,
            source,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.width, self.image.height)
    }
}
