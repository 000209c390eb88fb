use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sonoseg_tensor::Tensor;

use super::ddim::NoisePredictor;
use super::denoiser::{train_denoiser, Denoiser, DenoiserConfig};
use super::schedule::DiffusionSchedule;
use super::vae::{image_batch, Vae};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Posterior means of every sample, stacked into `[N, C, h, w]`.
pub fn encode_samples(vae: &Vae, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(16) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        parts.push(vae.encode(store, &image_batch(&refs)?)?);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::cat_batch(&refs)?)
}

/// Multiplier that brings the latent set to unit standard deviation.
pub fn latent_scale(latents: &Tensor<f32>) -> f64 {
    let n = latents.numel().max(1) as f64;
    let mean = latents.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = latents.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Encodes `samples`, rescales the latents to unit variance and fits a
/// denoiser on them. Returns the denoiser, its parameters, the latent
/// scale factor and the per-epoch loss history.
pub fn train_ldm(
    vae: &Vae,
    vae_store: &ParamStore<f32>,
    samples: &[Sample],
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(Denoiser, ParamStore<f32>, f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Data("denoiser training needs at least one sample".into()));
    }
    let latents = encode_samples(vae, vae_store, samples)?;
    let scale = latent_scale(&latents);
    let k = scale as f32;
    let scaled = latents.map(|v| v * k);
    let (net, store, history) = train_denoiser(&scaled, cfg, schedule, seed, on_epoch)?;
    Ok((net, store, scale, history))
}

/// Monte-Carlo noise-prediction loss in double precision for any predictor.
/// `t = None` draws one timestep uniformly from `1..=T`.
pub fn noise_prediction_loss<P: NoisePredictor>(
    model: &P,
    schedule: &DiffusionSchedule,
    z0: &Tensor<f64>,
    t: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = t.unwrap_or_else(|| rng.random_range(1..=schedule.timesteps()));
    let eps = Tensor::from_fn(z0.shape(), |_| -> f64 { StandardNormal.sample(rng) });
    let zt = schedule.forward_diffuse(z0, t, &eps)?;
    let pred = model.predict(&zt, t)?;
    let sq = pred.zip_map(&eps, |p, e| (p - e) * (p - e))?;
    Ok(sq.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldm::ddim::ExactNoiseOracle;
    use crate::ldm::schedule::ScheduleConfig;
    use crate::rng::rng_from;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z: &Tensor<f64>, _t: usize) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    #[test]
    fn oracle_and_zero_predictor_losses() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = rng_from(1);
        let z0 = Tensor::from_fn(&[4, 4, 16, 16], |i| ((i % 7) as f64 - 3.0) / 3.0);
        let oracle = ExactNoiseOracle { z0: &z0, schedule: &s };
        for t in [1, 300, 1000] {
            let l = noise_prediction_loss(&oracle, &s, &z0, Some(t), &mut rng).unwrap();
            assert!(l < 1e-12, "t={t}: {l}");
        }
        let big = Tensor::zeros(&[64, 4, 16, 16]);
        let l = noise_prediction_loss(&Zero, &s, &big, None, &mut rng).unwrap();
        assert!((l - 1.0).abs() < 0.03, "{l}");
    }

    #[test]
    fn latent_scale_normalizes() {
        let z = Tensor::from_fn(&[2, 1, 2, 2], |i| (i as f32) * 3.0);
        let k = latent_scale(&z) as f32;
        let scaled = z.map(|v| v * k);
        let n = scaled.numel() as f64;
        let m = scaled.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = scaled.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 1e-5);
        assert_eq!(latent_scale(&Tensor::zeros(&[3])), 1.0);
    }
}
