//! The segmentation network and its building blocks.

mod config;
mod convmixer;
mod decoder;
mod encoder;
mod msag;
mod network;
mod perturb;

pub use config::{NetworkConfig, PerturbationSpec};
pub use convmixer::{ConvMixer, ConvMixerLayer};
pub use decoder::Decoder;
pub use encoder::{Encoded, Encoder};
pub use msag::Msag;
pub use network::{ForwardOutputs, Network, ParamScope};
pub use perturb::{perturb, perturbation_mask};
