//! Latent diffusion generator: VAE compressor, noise schedule, latent
//! denoiser, DDIM sampler and export of synthetic unlabeled images.

mod ddim;
mod denoiser;
mod schedule;
mod store;
mod synth;
mod train;
mod vae;

pub use ddim::{
    ddim_from, ddim_sample, ddim_step, ddim_timesteps, initial_latents, DdimConfig, ExactNoiseOracle, NoisePredictor,
};
pub use denoiser::{denoiser_loss, timestep_embedding, train_denoiser, Denoiser, DenoiserConfig, DenoiserModel};
pub use schedule::{DiffusionSchedule, ScheduleConfig};
pub use store::{
    denoiser_checkpoint, load_denoiser, load_vae, vae_checkpoint, LoadedDenoiser, DENOISER_KIND, VAE_KIND,
};
pub use synth::{append_to_pool, read_synthesis_record, synthetic_id, Generator, SynthesisRecord};
pub use train::{encode_samples, latent_scale, noise_prediction_loss, train_ldm};
pub use vae::{image_batch, reconstruction_mse, train_vae, Vae, VaeConfig, VaeEpoch};
