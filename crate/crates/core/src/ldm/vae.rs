use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sonoseg_tensor::{ConvGeom, Tensor, Var};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Mode};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub image_size: usize,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub kl_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            downsample_factor: 8,
            latent_channels: 4,
            base_channels: 16,
            kl_weight: 1e-6,
            lr: 1e-6,
            epochs: 1000,
            batch: 4,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            errors.push(format!("ldm.vae.downsample_factor must be a power of two, got {f}"));
        } else if !self.image_size.is_multiple_of(f) || self.image_size == 0 {
            errors.push(format!(
                "ldm.vae.image_size {} must be a positive multiple of downsample_factor {f}",
                self.image_size
            ));
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            errors.push("ldm.vae channel counts must be >= 1".into());
        }
        if self.kl_weight < 0.0 {
            errors.push("ldm.vae.kl_weight must be >= 0".into());
        }
        if !(self.lr > 0.0) {
            errors.push("ldm.vae.lr must be > 0".into());
        }
        if self.batch == 0 {
            errors.push("ldm.vae.batch must be >= 1".into());
        }
        errors
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }
}

/// Convolutional VAE: stride-2 convs down to the latent grid, bilinear
/// upsampling and convs back, sigmoid output.
#[derive(Debug, Clone)]
pub struct Vae {
    cfg: VaeConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    mu: Conv2d,
    logvar: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Vae {
    pub fn new(cfg: &VaeConfig, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        let errors = cfg.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut rng = rng_from(derive_seed(seed, "vae"));
        let levels = cfg.downsample_factor.trailing_zeros() as usize;
        let width = |i: usize| cfg.base_channels << i.min(2);
        let same = ConvGeom::same(3);
        let down = ConvGeom {
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        let enc_in = Conv2d::new(store, "vae.enc.in", 1, width(0), 3, same, true, &mut rng);
        let enc_down = (0..levels)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("vae.enc.down{i}"),
                    width(i),
                    width(i + 1),
                    4,
                    down,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let top = width(levels);
        let lc = cfg.latent_channels;
        let pw = ConvGeom::default();
        let mu = Conv2d::new(store, "vae.enc.mu", top, lc, 1, pw, true, &mut rng);
        let logvar = Conv2d::new(store, "vae.enc.logvar", top, lc, 1, pw, true, &mut rng);
        let dec_in = Conv2d::new(store, "vae.dec.in", lc, top, 3, same, true, &mut rng);
        let dec_up = (0..levels)
            .rev()
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("vae.dec.up{i}"),
                    width(i + 1),
                    width(i),
                    3,
                    same,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let dec_out = Conv2d::new(store, "vae.dec.out", width(0), 1, 3, same, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            enc_in,
            enc_down,
            mu,
            logvar,
            dec_in,
            dec_up,
            dec_out,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Invalid(format!(
                "VAE expects [N, 1, {s}, {s}] images, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Posterior mean and log-variance.
    pub fn encode_vars(&self, ctx: &mut Ctx<f32>, x: Var) -> Result<(Var, Var)> {
        self.check_input(ctx.tape.shape(x))?;
        let mut h = self.enc_in.forward(ctx, x)?;
        h = ctx.tape.silu(h);
        for conv in &self.enc_down {
            h = conv.forward(ctx, h)?;
            h = ctx.tape.silu(h);
        }
        let mu = self.mu.forward(ctx, h)?;
        let logvar = self.logvar.forward(ctx, h)?;
        Ok((mu, logvar))
    }

    pub fn decode_var(&self, ctx: &mut Ctx<f32>, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(ctx, z)?;
        h = ctx.tape.silu(h);
        for conv in &self.dec_up {
            h = ctx.tape.upsample2(h)?;
            h = conv.forward(ctx, h)?;
            h = ctx.tape.silu(h);
        }
        let out = self.dec_out.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(out))
    }

    /// Deterministic encoding: the posterior mean.
    pub fn encode(&self, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.input(images.clone());
        let (mu, _) = self.encode_vars(&mut ctx, x)?;
        Ok(ctx.tape.value(mu).clone())
    }

    pub fn decode(&self, store: &ParamStore<f32>, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let z = ctx.input(latents.clone());
        let out = self.decode_var(&mut ctx, z)?;
        Ok(ctx.tape.value(out).clone())
    }

    /// Reconstruction MSE plus `kl_weight` times the mean per-element KL to
    /// a standard normal. Returns `(loss, mse, kl)`.
    pub fn loss(&self, ctx: &mut Ctx<f32>, x: Var, rng: &mut ChaCha8Rng) -> Result<(Var, f64, f64)> {
        let (mu, logvar) = self.encode_vars(ctx, x)?;
        let eps = Tensor::from_fn(ctx.tape.shape(mu), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        });
        let eps = ctx.input(eps);
        let half = ctx.tape.scale(logvar, 0.5);
        let std = ctx.tape.exp(half);
        let noise = ctx.tape.mul(std, eps)?;
        let z = ctx.tape.add(mu, noise)?;
        let recon = self.decode_var(ctx, z)?;
        let mse = ctx.tape.mse(recon, x)?;
        // KL(N(mu, s^2) || N(0, 1)) per element = (mu^2 + s^2 - 1 - log s^2) / 2
        let mu2 = ctx.tape.mul(mu, mu)?;
        let var = ctx.tape.exp(logvar);
        let k = ctx.tape.add(mu2, var)?;
        let k = ctx.tape.sub(k, logvar)?;
        let k = ctx.tape.add_scalar(k, -1.0);
        let k = ctx.tape.mean(k);
        let kl = ctx.tape.scale(k, 0.5);
        let weighted = ctx.tape.scale(kl, self.cfg.kl_weight);
        let loss = ctx.tape.add(mse, weighted)?;
        let mse_v = ctx.tape.value(mse).data()[0] as f64;
        let kl_v = ctx.tape.value(kl).data()[0] as f64;
        Ok((loss, mse_v, kl_v))
    }
}

/// Stacks sample images into `[N, 1, H, W]`.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (w, h) = first.size();
    let mut data = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        if s.size() != (w, h) {
            return Err(Error::Data(format!(
                "{}: image is {:?}, batch expects {:?}",
                s.id,
                s.size(),
                (w, h)
            )));
        }
        data.extend_from_slice(&s.image.data);
    }
    Ok(Tensor::from_vec(&[samples.len(), 1, h, w], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Trains a fresh VAE on `samples`. `on_epoch` sees each epoch's mean
/// losses as soon as it finishes.
pub fn train_vae(
    samples: &[Sample],
    cfg: &VaeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&VaeEpoch),
) -> Result<(Vae, ParamStore<f32>, Vec<VaeEpoch>)> {
    if samples.is_empty() {
        return Err(Error::Data("VAE training needs at least one sample".into()));
    }
    let mut store = ParamStore::new();
    let vae = Vae::new(cfg, &mut store, seed)?;
    let mut adam = Adam::new(&store, 0.0);
    let mut noise_rng = rng_from(derive_seed(seed, "vae.noise"));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, &format!("vae.epoch{epoch}"))));
        let (mut loss_sum, mut mse_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = image_batch(&refs)?;
            let mut ctx = Ctx::new(&store, Mode::Train);
            let xv = ctx.input(x);
            let (loss, mse, kl) = vae.loss(&mut ctx, xv, &mut noise_rng)?;
            let lv = ctx.tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("VAE loss at epoch {epoch}")));
            }
            let grads = ctx.tape.backward(loss)?;
            drop(ctx);
            adam.step(&mut store, &grads, cfg.lr);
            loss_sum += lv;
            mse_sum += mse;
            kl_sum += kl;
            batches += 1;
        }
        let rec = VaeEpoch {
            epoch,
            loss: loss_sum / batches as f64,
            mse: mse_sum / batches as f64,
            kl: kl_sum / batches as f64,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok((vae, store, history))
}

/// Mean per-pixel squared error of `decode(encode(x))` over `samples`.
pub fn reconstruction_mse(vae: &Vae, store: &ParamStore<f32>, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(16) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = image_batch(&refs)?;
        let z = vae.encode(store, &x)?;
        let r = vae.decode(store, &z)?;
        for (a, b) in x.data().iter().zip(r.data()) {
            total += ((a - b) as f64).powi(2);
        }
        count += x.numel();
    }
    Ok(total / count.max(1) as f64)
}
