use super::denoiser::Denoiser;
use super::schedule::DiffusionSchedule;
use super::vae::Vae;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const VAE_KIND: &str = "vae";
pub const DENOISER_KIND: &str = "denoiser";

/// Loss history as one `epoch,value` line per epoch.
fn history_text(history: &[f64]) -> String {
    history.iter().enumerate().map(|(i, v)| format!("{i},{v}\n")).collect()
}

pub fn vae_checkpoint(config: &RunConfig, store: &ParamStore<f32>, history: &[f64]) -> Checkpoint {
    let mut ck = Checkpoint::new(VAE_KIND, config.to_toml());
    ck.groups.push(("params".into(), store.named_values()));
    ck.texts.insert("history".into(), history_text(history));
    ck
}

pub fn load_vae(ck: &Checkpoint) -> Result<(RunConfig, Vae, ParamStore<f32>)> {
    ck.expect_kind(VAE_KIND)?;
    let config = RunConfig::from_toml(&ck.config)?;
    let mut store = ParamStore::new();
    let vae = Vae::new(&config.ldm.vae, &mut store, 0)?;
    store.load_from(ck.group("params")?)?;
    Ok((config, vae, store))
}

pub fn denoiser_checkpoint(
    config: &RunConfig,
    store: &ParamStore<f32>,
    latent_scale: f64,
    vae_sha256: &str,
    history: &[f64],
) -> Checkpoint {
    let mut ck = Checkpoint::new(DENOISER_KIND, config.to_toml());
    ck.groups.push(("params".into(), store.named_values()));
    ck.floats.insert("latent_scale".into(), latent_scale);
    ck.texts.insert("vae_sha256".into(), vae_sha256.into());
    ck.texts.insert("history".into(), history_text(history));
    ck
}

/// A loaded denoiser with the latent scale and schedule it was trained with.
pub struct LoadedDenoiser {
    pub config: RunConfig,
    pub net: Denoiser,
    pub store: ParamStore<f32>,
    pub latent_scale: f64,
    pub schedule: DiffusionSchedule,
    pub vae_sha256: String,
}

pub fn load_denoiser(ck: &Checkpoint) -> Result<LoadedDenoiser> {
    ck.expect_kind(DENOISER_KIND)?;
    let config = RunConfig::from_toml(&ck.config)?;
    let mut store = ParamStore::new();
    let net = Denoiser::new(&config.ldm.denoiser, config.ldm.vae.latent_channels, &mut store, 0)?;
    store.load_from(ck.group("params")?)?;
    let latent_scale = ck.float("latent_scale")?;
    if !(latent_scale.is_finite() && latent_scale > 0.0) {
        return Err(Error::Checkpoint(format!("invalid latent scale {latent_scale}")));
    }
    Ok(LoadedDenoiser {
        schedule: DiffusionSchedule::new(&config.ldm.schedule)?,
        config,
        net,
        store,
        latent_scale,
        vae_sha256: ck.texts.get("vae_sha256").cloned().unwrap_or_default(),
    })
}
