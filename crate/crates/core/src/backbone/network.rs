use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{Scalar, Tape, Var};

use super::config::NetworkConfig;
use super::convmixer::ConvMixer;
use super::decoder::Decoder;
use super::encoder::Encoder;
use super::msag::Msag;
use super::perturb::perturb;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from};

/// Logits of every decoder that ran. `aux` is empty in eval mode.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub main: Var,
    pub aux: Vec<Var>,
}

impl ForwardOutputs {
    /// Number of decoder passes that produced this output.
    pub fn decoder_count(&self) -> usize {
        1 + self.aux.len()
    }

    /// Restricts every output to batch rows `[start, start + len)`.
    pub fn narrow<T: Scalar>(&self, tape: &mut Tape<T>, start: usize, len: usize) -> Result<Self> {
        let main = tape.narrow_batch(self.main, start, len)?;
        let mut aux = Vec::with_capacity(self.aux.len());
        for &a in &self.aux {
            aux.push(tape.narrow_batch(a, start, len)?);
        }
        Ok(Self { main, aux })
    }

    /// Aux decoders first, main last.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.aux.clone();
        v.push(self.main);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Everything needed at test time: no auxiliary decoders.
    Inference,
    Training,
    ConvMixer,
    Msag,
    /// Plain U-Net: encoder and main decoder only.
    Baseline,
}

/// Shared encoder, ConvMixer stack, shared skip gates, one main decoder and
/// `num_aux` auxiliary decoders.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    encoder: Encoder,
    convmixer: ConvMixer,
    /// One gate per encoder scale; empty if no decoder gates its skips.
    gates: Vec<Msag>,
    main: Decoder,
    aux: Vec<Decoder>,
    init_seeds: Vec<(String, u64)>,
}

impl Network {
    /// Registers all parameters in `store`. Each parameter group draws from
    /// its own seed derived from `seed`.
    pub fn new<T: Scalar>(config: &NetworkConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let errors = config.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut init_seeds = Vec::new();
        let mut group = |label: &str| {
            let s = derive_seed(seed, label);
            init_seeds.push((label.to_string(), s));
            rng_from(s)
        };
        let c = config;
        let encoder = Encoder::new(
            store,
            c.input_channels,
            &c.encoder_channels,
            c.bottleneck_channels,
            &mut group("encoder"),
        );
        let convmixer = ConvMixer::new(
            store,
            c.bottleneck_channels,
            c.convmixer_length,
            c.convmixer_kernel,
            &mut group("convmixer"),
        );
        let gates = if c.any_msag() {
            let mut rng = group("msag");
            c.encoder_channels
                .iter()
                .enumerate()
                .map(|(i, &ch)| Msag::new(store, &format!("msag.scale{i}"), ch, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let main = Decoder::new(
            store,
            "decoder.main",
            &c.encoder_channels,
            c.bottleneck_channels,
            &mut group("decoder.main"),
        );
        let aux = (1..=c.num_aux)
            .map(|k| {
                let name = format!("decoder.aux{k}");
                Decoder::new(
                    store,
                    &name,
                    &c.encoder_channels,
                    c.bottleneck_channels,
                    &mut group(&name),
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            convmixer,
            gates,
            main,
            aux,
            init_seeds,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Seed used for each parameter group at construction.
    pub fn init_seeds(&self) -> &[(String, u64)] {
        &self.init_seeds
    }

    /// Train mode runs every decoder, perturbing each auxiliary input with
    /// draws from `rng`; eval mode runs the main decoder only.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, images: Var, rng: &mut ChaCha8Rng) -> Result<ForwardOutputs> {
        let cfg = &self.config;
        let train = ctx.mode() == Mode::Train;
        let main_tap = cfg.main_tap();
        let aux_taps = &cfg.taps[..cfg.num_aux];
        let mut wanted = vec![main_tap];
        if train {
            wanted.extend_from_slice(aux_taps);
        }
        let length = wanted.iter().copied().max().unwrap_or(0);

        let encoded = self.encoder.forward(ctx, images)?;
        let taps = self.convmixer.forward(ctx, encoded.bottleneck, length, &wanted)?;

        let needs_gates = cfg.main_uses_msag() || (train && cfg.msag_enabled[..cfg.num_aux].iter().any(|&b| b));
        let gated = if needs_gates {
            let mut out = Vec::with_capacity(self.gates.len());
            for (gate, &s) in self.gates.iter().zip(&encoded.skips) {
                out.push(gate.forward(ctx, s)?);
            }
            Some(out)
        } else {
            None
        };
        let skips_for = |use_msag: bool| -> &[Var] {
            match (&gated, use_msag) {
                (Some(g), true) => g,
                _ => &encoded.skips,
            }
        };

        let main = self
            .main
            .forward(ctx, taps[&main_tap], skips_for(cfg.main_uses_msag()))?;
        let mut aux = Vec::new();
        if train {
            for (k, decoder) in self.aux.iter().enumerate() {
                let f = perturb(ctx, taps[&aux_taps[k]], &cfg.perturbations[k], rng)?;
                aux.push(decoder.forward(ctx, f, skips_for(cfg.msag_enabled[k]))?);
            }
        }
        Ok(ForwardOutputs { main, aux })
    }

    pub fn count_parameters<T: Scalar>(&self, store: &ParamStore<T>, scope: ParamScope) -> usize {
        let mut prefixes = vec!["encoder.", "decoder.main."];
        match scope {
            ParamScope::Baseline => {}
            ParamScope::Inference => {
                prefixes.push("convmixer.");
                if self.config.main_uses_msag() {
                    prefixes.push("msag.");
                }
            }
            ParamScope::Training => return store.count_trainable(),
            ParamScope::ConvMixer => prefixes = vec!["convmixer."],
            ParamScope::Msag => prefixes = vec!["msag."],
        }
        store.count_with_prefix(&prefixes)
    }
}
