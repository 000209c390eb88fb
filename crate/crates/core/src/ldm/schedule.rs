use serde::{Deserialize, Serialize};
use sonoseg_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.timesteps < 2 {
            errors.push("ldm.schedule.timesteps must be >= 2".into());
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            errors.push(format!(
                "ldm.schedule betas need 0 < beta_start < beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ));
        }
        errors
    }
}

/// Linear variance schedule. Index `t` runs over `0..=T`, with `t = 0`
/// the clean signal (`alpha_bar(0) = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let errors = cfg.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let t = cfg.timesteps;
        let betas: Vec<f64> = (0..t)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::Invalid(format!(
                "timestep {t} outside [0, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise`.
    pub fn forward_diffuse<T: Scalar>(&self, z0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(t)?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
        Ok(z0.zip_map(noise, |z, n| sa * z + sn * n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_product_matches_direct_product() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        for t in [1, 10, 500, 1000] {
            let direct: f64 = (1..=t).map(|k| 1.0 - s.beta(k)).product();
            assert!((s.alpha_bar(t) - direct).abs() <= 1e-15);
        }
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!((2..=1000).all(|t| s.beta(t) > s.beta(t - 1)));
        assert!(s.alpha_bar(1000) <= 1e-4);
    }

    #[test]
    fn boundaries() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        let z = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let n = Tensor::from_vec(&[3], vec![0.3, 0.1, -0.7]).unwrap();
        assert_eq!(s.forward_diffuse(&z, 0, &n).unwrap(), z);
        let zero = Tensor::zeros(&[3]);
        let out = s.forward_diffuse(&z, 400, &zero).unwrap();
        let a = s.alpha_bar(400).sqrt();
        assert_eq!(out.data(), z.map(|v| v * a).data());
        assert!(s.forward_diffuse(&z, 1001, &n).is_err());
    }
}
