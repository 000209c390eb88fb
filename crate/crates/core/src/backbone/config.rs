use serde::{Deserialize, Serialize};

/// Feature-space perturbation applied to the input of one auxiliary decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// `f + f * u`, `u ~ U(-noise_bound, noise_bound)` per element.
    FNoise { noise_bound: f64 },
    /// Zero the most salient spatial positions.
    FDrop { drop_threshold_range: [f64; 2] },
    /// Inverted element dropout.
    Dropout { rate: f64 },
    /// Identity, for ablations.
    None,
}

impl PerturbationSpec {
    pub fn f_noise() -> Self {
        PerturbationSpec::FNoise { noise_bound: 0.3 }
    }

    pub fn f_drop() -> Self {
        PerturbationSpec::FDrop {
            drop_threshold_range: [0.6, 0.9],
        }
    }

    pub fn dropout() -> Self {
        PerturbationSpec::Dropout { rate: 0.5 }
    }

    fn validate(&self, idx: usize, errors: &mut Vec<String>) {
        match *self {
            PerturbationSpec::FNoise { noise_bound } => {
                if !(noise_bound >= 0.0 && noise_bound.is_finite()) {
                    errors.push(format!("perturbations[{idx}]: noise_bound must be >= 0"));
                }
            }
            PerturbationSpec::FDrop {
                drop_threshold_range: [lo, hi],
            } => {
                if !(0.0 < lo && lo <= hi && hi < 1.0) {
                    errors.push(format!(
                        "perturbations[{idx}]: drop_threshold_range needs 0 < lo <= hi < 1, got [{lo}, {hi}]"
                    ));
                }
            }
            PerturbationSpec::Dropout { rate } => {
                if !(0.0 < rate && rate < 1.0) {
                    errors.push(format!("perturbations[{idx}]: dropout rate must be in (0, 1)"));
                }
            }
            PerturbationSpec::None => {}
        }
    }
}

/// Complete architecture description of the segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub convmixer_length: usize,
    pub convmixer_kernel: usize,
    /// ConvMixer depth read by each decoder: `taps[k]` feeds auxiliary
    /// decoder `k + 1`, the last entry feeds the main decoder.
    pub taps: Vec<usize>,
    pub num_aux: usize,
    /// Skip gating per decoder, ordered aux 1..K then main.
    pub msag_enabled: Vec<bool>,
    pub perturbations: Vec<PerturbationSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            encoder_channels: vec![64, 128, 256, 512],
            bottleneck_channels: 1024,
            convmixer_length: 9,
            convmixer_kernel: 7,
            taps: vec![0, 3, 6, 9],
            num_aux: 3,
            msag_enabled: vec![true; 4],
            perturbations: vec![
                PerturbationSpec::f_noise(),
                PerturbationSpec::f_drop(),
                PerturbationSpec::dropout(),
            ],
        }
    }
}

impl NetworkConfig {
    /// Reduced widths for CPU-scale experiments on 64x64 inputs. Depths,
    /// taps, kernel and perturbations are unchanged.
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            bottleneck_channels: 128,
            ..Self::default()
        }
    }

    pub fn main_tap(&self) -> usize {
        *self.taps.last().unwrap_or(&0)
    }

    /// Input spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn any_msag(&self) -> bool {
        self.msag_enabled.iter().any(|&b| b)
    }

    pub fn main_uses_msag(&self) -> bool {
        self.msag_enabled.last().copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let k = self.num_aux;
        if self.input_channels == 0 {
            errors.push("network.input_channels must be >= 1".into());
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            errors.push("network.encoder_channels must be non-empty and positive".into());
        }
        if self.bottleneck_channels == 0 {
            errors.push("network.bottleneck_channels must be >= 1".into());
        }
        if self.convmixer_kernel.is_multiple_of(2) {
            errors.push(format!(
                "network.convmixer_kernel must be odd, got {}",
                self.convmixer_kernel
            ));
        }
        if self.taps.len() != k + 1 {
            errors.push(format!(
                "network.taps must have num_aux + 1 = {} entries, got {}",
                k + 1,
                self.taps.len()
            ));
        }
        if self.taps.windows(2).any(|w| w[0] > w[1]) {
            errors.push(format!("network.taps must be ascending, got {:?}", self.taps));
        }
        if self.taps.iter().any(|&t| t > self.convmixer_length) {
            errors.push(format!(
                "network.taps must lie in [0, {}], got {:?}",
                self.convmixer_length, self.taps
            ));
        }
        if self.taps.last() != Some(&self.convmixer_length) {
            errors.push(format!(
                "network.taps must end at convmixer_length {}",
                self.convmixer_length
            ));
        }
        if self.msag_enabled.len() != k + 1 {
            errors.push(format!(
                "network.msag_enabled must have num_aux + 1 = {} entries, got {}",
                k + 1,
                self.msag_enabled.len()
            ));
        }
        if self.perturbations.len() != k {
            errors.push(format!(
                "network.perturbations must have num_aux = {k} entries, got {}",
                self.perturbations.len()
            ));
        }
        for (i, p) in self.perturbations.iter().enumerate() {
            p.validate(i, &mut errors);
        }
        errors
    }
}
