//! Semi-supervised lesion segmentation for grayscale ultrasound with a
//! latent-diffusion generator for extra unlabeled images.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ldm;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
