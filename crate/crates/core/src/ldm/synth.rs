use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sonoseg_tensor::Tensor;

use super::ddim::{ddim_from, initial_latents, DdimConfig};
use super::denoiser::{Denoiser, DenoiserModel};
use super::schedule::DiffusionSchedule;
use super::vae::Vae;
use crate::data::{parse_manifest, save_gray_png, GrayImage, Sample, Source, SYNTHETIC_MANIFEST};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Trained generator: VAE, latent denoiser and the latent scale factor.
pub struct Generator<'a> {
    pub vae: &'a Vae,
    pub vae_store: &'a ParamStore<f32>,
    pub denoiser: &'a Denoiser,
    pub denoiser_store: &'a ParamStore<f32>,
    pub latent_scale: f64,
    pub schedule: &'a DiffusionSchedule,
}

/// Contents of the sidecar written next to generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRecord {
    pub seed: u64,
    pub steps: usize,
    pub eta: f64,
    pub count: usize,
    pub vae_checkpoint_sha256: String,
    pub denoiser_checkpoint_sha256: String,
    pub ids: Vec<String>,
}

pub fn synthetic_id(seed: u64, index: usize) -> String {
    format!("synth_{seed}_{index}")
}

impl Generator<'_> {
    /// Decodes `n` DDIM samples into images clamped to `[0, 1]`.
    pub fn sample(&self, n: usize, cfg: &DdimConfig) -> Result<Vec<Sample>> {
        let lc = self.denoiser.latent_channels();
        let side = self.vae.config().latent_size();
        let model = DenoiserModel {
            net: self.denoiser,
            store: self.denoiser_store,
        };
        let inv = (1.0 / self.latent_scale) as f32;
        let mut out = Vec::with_capacity(n);
        let chunk = 8;
        for first in (0..n).step_by(chunk) {
            let m = chunk.min(n - first);
            let z = initial_latents(cfg.seed, first, [m, lc, side, side]);
            let z0 = ddim_from(&model, self.schedule, cfg, z, first)?;
            let latents: Tensor<f32> = z0.cast().map(|v| v * inv);
            let images = self.vae.decode(self.vae_store, &latents)?;
            let size = self.vae.config().image_size;
            let per = size * size;
            for i in 0..m {
                let px: Vec<f32> = images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect();
                if px.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("generated sample {}", first + i)));
                }
                let image = GrayImage::new(size, size, px)?;
                out.push(Sample::new(
                    synthetic_id(cfg.seed, first + i),
                    image,
                    None,
                    Source::Synthetic,
                )?);
            }
        }
        Ok(out)
    }

    /// Samples `n` images, writes them as PNGs plus a sidecar into `dir`,
    /// and appends their ids to `pool_manifest` when given.
    pub fn synthesize(
        &self,
        n: usize,
        cfg: &DdimConfig,
        dir: &Path,
        checkpoint_hashes: (&str, &str),
        pool_manifest: Option<&Path>,
    ) -> Result<Vec<Sample>> {
        let samples = self.sample(n, cfg)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &samples {
            let (w, h) = s.size();
            save_gray_png(&dir.join(format!("{}.png", s.id)), w, h, &s.image.to_u8())?;
        }
        let record = SynthesisRecord {
            seed: cfg.seed,
            steps: cfg.steps,
            eta: cfg.eta,
            count: n,
            vae_checkpoint_sha256: checkpoint_hashes.0.to_string(),
            denoiser_checkpoint_sha256: checkpoint_hashes.1.to_string(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        };
        let path = dir.join(SYNTHETIC_MANIFEST);
        let text = toml::to_string(&record).map_err(|e| Error::item(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        if let Some(pool) = pool_manifest {
            append_to_pool(pool, &record.ids)?;
        }
        Ok(samples)
    }
}

/// Adds ids missing from the manifest at `path`, creating it if needed.
pub fn append_to_pool(path: &Path, ids: &[String]) -> Result<PathBuf> {
    let mut existing = match fs::read_to_string(path) {
        Ok(text) => parse_manifest(&text).map_err(|m| Error::item(path, m))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    for id in ids {
        if !existing.contains(id) {
            existing.push(id.clone());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    crate::data::write_manifest(path, &existing)?;
    Ok(path.to_path_buf())
}

pub fn read_synthesis_record(dir: &Path) -> Result<SynthesisRecord> {
    let path = dir.join(SYNTHETIC_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::item(&path, e.to_string()))
}
