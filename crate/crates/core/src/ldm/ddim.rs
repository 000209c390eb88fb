use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sonoseg_tensor::Tensor;

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Anything that predicts the noise component of a latent at timestep `t`.
pub trait NoisePredictor {
    fn predict(&self, z: &Tensor<f64>, t: usize) -> Result<Tensor<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdimConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl DdimConfig {
    pub fn validate(&self, timesteps: usize) -> Vec<String> {
        let mut errors = Vec::new();
        if self.steps == 0 || self.steps > timesteps {
            errors.push(format!(
                "ldm.ddim.steps must be in [1, {timesteps}], got {}",
                self.steps
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            errors.push("ldm.ddim.eta must be >= 0".into());
        }
        errors
    }
}

/// Evenly strided, ascending timesteps ending at `T`: `t_i = floor((i + 1) T / steps)`.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|i| (i + 1) * timesteps / steps).collect()
}

/// One DDIM update from `t` to `t_prev` given the predicted noise.
/// `noise` is only read when `eta > 0`.
pub fn ddim_step(
    z: &Tensor<f64>,
    eps: &Tensor<f64>,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
    noise: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let (sa, sn) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let sigma = if eta > 0.0 {
        eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * (1.0 - alpha_bar_t / alpha_bar_prev)).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    let sp = alpha_bar_prev.sqrt();
    let mut out = z.zip_map(eps, |z, e| {
        let z0 = (z - sn * e) / sa;
        sp * z0 + dir * e
    })?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::Invalid("stochastic DDIM step needs noise".into()))?;
        out = out.zip_map(noise, |o, n| o + sigma * n)?;
    }
    Ok(out)
}

/// Standard-normal starting latents `[n, c, h, w]`, one stream per sample so
/// each sample depends only on `(seed, index)`.
pub fn initial_latents(seed: u64, first: usize, shape: [usize; 4]) -> Tensor<f64> {
    let per = shape[1] * shape[2] * shape[3];
    let mut data = Vec::with_capacity(shape[0] * per);
    for i in 0..shape[0] {
        let mut rng = rng_from(derive_seed(seed, &format!("ddim.sample{}", first + i)));
        data.extend((0..per).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    Tensor::from_vec(&shape, data).expect("shape matches data")
}

/// Runs the sampler from `z_T` down to an estimate of `z_0`.
pub fn ddim_from<P: NoisePredictor>(
    model: &P,
    schedule: &DiffusionSchedule,
    cfg: &DdimConfig,
    z_t: Tensor<f64>,
    first: usize,
) -> Result<Tensor<f64>> {
    let errors = cfg.validate(schedule.timesteps());
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let ts = ddim_timesteps(schedule.timesteps(), cfg.steps);
    let n = z_t.shape()[0];
    let mut z = z_t;
    let mut rngs: Vec<_> = (0..n)
        .map(|i| rng_from(derive_seed(cfg.seed, &format!("ddim.eta{}", first + i))))
        .collect();
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = model.predict(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::Invalid(format!(
                "noise prediction shape {:?} differs from latent {:?}",
                eps.shape(),
                z.shape()
            )));
        }
        let noise = (cfg.eta > 0.0).then(|| {
            let per = z.numel() / n.max(1);
            let mut data = Vec::with_capacity(z.numel());
            for rng in rngs.iter_mut() {
                data.extend((0..per).map(|_| -> f64 { StandardNormal.sample(rng) }));
            }
            Tensor::from_vec(z.shape(), data).expect("shape matches data")
        });
        z = ddim_step(
            &z,
            &eps,
            schedule.alpha_bar(t),
            schedule.alpha_bar(prev),
            cfg.eta,
            noise.as_ref(),
        )?;
    }
    Ok(z)
}

/// Samples `shape[0]` latents starting from seeded standard normals.
pub fn ddim_sample<P: NoisePredictor>(
    model: &P,
    schedule: &DiffusionSchedule,
    cfg: &DdimConfig,
    shape: [usize; 4],
) -> Result<Tensor<f64>> {
    let z = initial_latents(cfg.seed, 0, shape);
    ddim_from(model, schedule, cfg, z, 0)
}

/// Predictor that knows the clean latent and so returns the exact noise.
pub struct ExactNoiseOracle<'a> {
    pub z0: &'a Tensor<f64>,
    pub schedule: &'a DiffusionSchedule,
}

impl NoisePredictor for ExactNoiseOracle<'_> {
    fn predict(&self, z: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        let a = self.schedule.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(z.zip_map(self.z0, |z, z0| (z - sa * z0) / sn)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldm::schedule::ScheduleConfig;

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z: &Tensor<f64>, _t: usize) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    #[test]
    fn timestep_subsequence() {
        assert_eq!(ddim_timesteps(1000, 4), vec![250, 500, 750, 1000]);
        assert_eq!(ddim_timesteps(10, 3), vec![3, 6, 10]);
        let all = ddim_timesteps(1000, 1000);
        assert_eq!(all.first(), Some(&1));
        assert!(all.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn config_bounds() {
        let cfg = DdimConfig {
            steps: 1001,
            eta: -1.0,
            seed: 0,
        };
        assert_eq!(cfg.validate(1000).len(), 2);
        assert!(DdimConfig::default().validate(1000).is_empty());
    }

    #[test]
    fn eta_zero_ignores_noise_and_stochastic_needs_it() {
        let z = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        let e = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
        let a = ddim_step(&z, &e, 0.5, 0.9, 0.0, None).unwrap();
        let n = Tensor::from_vec(&[2], vec![9.0, 9.0]).unwrap();
        assert_eq!(a, ddim_step(&z, &e, 0.5, 0.9, 0.0, Some(&n)).unwrap());
        assert!(ddim_step(&z, &e, 0.5, 0.9, 1.0, None).is_err());
    }

    #[test]
    fn zero_predictor_scales_by_alpha_ratio() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        let cfg = DdimConfig {
            steps: 1,
            ..DdimConfig::default()
        };
        let z = initial_latents(5, 0, [1, 1, 2, 2]);
        let out = ddim_from(&Zero, &s, &cfg, z.clone(), 0).unwrap();
        let k = 1.0 / s.alpha_bar(1000).sqrt();
        for (o, z) in out.data().iter().zip(z.data()) {
            assert!((o - k * z).abs() <= 1e-9 * k.abs() * z.abs().max(1.0));
        }
    }

    #[test]
    fn latents_depend_only_on_seed_and_index() {
        let batch = initial_latents(3, 0, [3, 2, 2, 2]);
        let single = initial_latents(3, 2, [1, 2, 2, 2]);
        assert_eq!(&batch.data()[16..], single.data());
    }
}
