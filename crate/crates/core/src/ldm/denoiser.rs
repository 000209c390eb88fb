use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sonoseg_tensor::{ConvGeom, Tensor, Var};

use super::ddim::NoisePredictor;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, Mode};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Decay of the weight average that is returned after training;
    /// 0 returns the last iterate.
    pub ema_decay: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            time_dim: 64,
            lr: 1e-4,
            weight_decay: 0.0,
            epochs: 1000,
            batch: 16,
            ema_decay: 0.999,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.base_channels == 0 {
            errors.push("ldm.denoiser.base_channels must be >= 1".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            errors.push("ldm.denoiser.time_dim must be even and >= 2".into());
        }
        if !(self.lr > 0.0) {
            errors.push("ldm.denoiser.lr must be > 0".into());
        }
        if self.batch == 0 {
            errors.push("ldm.denoiser.batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            errors.push(format!(
                "ldm.denoiser.ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            ));
        }
        errors
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (n, j) = (i / dim, i % dim);
        let freq = (-(10000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let arg = ts[n] as f64 * freq;
        (if j < half { arg.sin() } else { arg.cos() }) as f32
    })
}

fn zero_weights(store: &mut ParamStore<f32>, conv: &Conv2d) {
    store.value_mut(conv.weight).data_mut().fill(0.0);
}

/// Residual block with a per-channel timestep shift.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    time: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ConvGeom::same(3);
        let block = Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, g, true, rng),
            time: Linear::new(store, &format!("{name}.time"), tdim, cout, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, g, true, rng),
            skip: (cin != cout).then(|| {
                Conv2d::new(
                    store,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    1,
                    ConvGeom::default(),
                    true,
                    rng,
                )
            }),
        };
        // Each block starts as its skip path.
        zero_weights(store, &block.conv2);
        block
    }

    fn forward(&self, ctx: &mut Ctx<f32>, x: Var, emb: Var) -> Result<Var> {
        let h = ctx.tape.silu(x);
        let h = self.conv1.forward(ctx, h)?;
        let t = self.time.forward(ctx, emb)?;
        let h = ctx.tape.add_channel_bias(h, t)?;
        let h = ctx.tape.silu(h);
        let h = self.conv2.forward(ctx, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        Ok(ctx.tape.add(h, s)?)
    }
}

/// Two-level U-Net predicting the noise in a latent.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    latent_channels: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    block_hi: ResBlock,
    down: Conv2d,
    block_lo: ResBlock,
    mid: ResBlock,
    block_up: ResBlock,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, latent_channels: usize, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        let errors = cfg.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut rng = rng_from(derive_seed(seed, "denoiser"));
        let (b, td, lc) = (cfg.base_channels, cfg.time_dim, latent_channels);
        let same = ConvGeom::same(3);
        let down = ConvGeom {
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        let net = Self {
            cfg: cfg.clone(),
            latent_channels,
            time1: Linear::new(store, "den.time1", td, td, &mut rng),
            time2: Linear::new(store, "den.time2", td, td, &mut rng),
            conv_in: Conv2d::new(store, "den.in", lc, b, 3, same, true, &mut rng),
            block_hi: ResBlock::new(store, "den.hi", b, b, td, &mut rng),
            down: Conv2d::new(store, "den.down", b, 2 * b, 3, down, true, &mut rng),
            block_lo: ResBlock::new(store, "den.lo", 2 * b, 2 * b, td, &mut rng),
            mid: ResBlock::new(store, "den.mid", 2 * b, 2 * b, td, &mut rng),
            block_up: ResBlock::new(store, "den.up", 3 * b, b, td, &mut rng),
            conv_out: Conv2d::new(store, "den.out", b, lc, 3, same, true, &mut rng),
        };
        // An untrained net predicts zero noise instead of large random values.
        zero_weights(store, &net.conv_out);
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Predicted noise for latents `z` at per-sample timesteps `ts`.
    pub fn forward(&self, ctx: &mut Ctx<f32>, z: Var, ts: &[usize]) -> Result<Var> {
        let shape = ctx.tape.shape(z).to_vec();
        if shape.len() != 4
            || shape[0] != ts.len()
            || shape[1] != self.latent_channels
            || !shape[2].is_multiple_of(2)
            || !shape[3].is_multiple_of(2)
        {
            return Err(Error::Invalid(format!(
                "denoiser expects [{}, {}, even, even] latents, got {shape:?}",
                ts.len(),
                self.latent_channels
            )));
        }
        let emb = ctx.input(timestep_embedding(ts, self.cfg.time_dim));
        let emb = self.time1.forward(ctx, emb)?;
        let emb = ctx.tape.silu(emb);
        let emb = self.time2.forward(ctx, emb)?;
        let emb = ctx.tape.silu(emb);

        let h = self.conv_in.forward(ctx, z)?;
        let hi = self.block_hi.forward(ctx, h, emb)?;
        let lo = self.down.forward(ctx, hi)?;
        let lo = self.block_lo.forward(ctx, lo, emb)?;
        let lo = self.mid.forward(ctx, lo, emb)?;
        let up = ctx.tape.upsample2(lo)?;
        let cat = ctx.tape.concat_channels(&[hi, up])?;
        let h = self.block_up.forward(ctx, cat, emb)?;
        let h = ctx.tape.silu(h);
        self.conv_out.forward(ctx, h)
    }
}

/// A trained denoiser bound to its parameters.
pub struct DenoiserModel<'a> {
    pub net: &'a Denoiser,
    pub store: &'a ParamStore<f32>,
}

impl NoisePredictor for DenoiserModel<'_> {
    fn predict(&self, z: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        let mut ctx = Ctx::new(self.store, Mode::Eval);
        let zv = ctx.input(z.cast());
        let ts = vec![t; z.shape()[0]];
        let out = self.net.forward(&mut ctx, zv, &ts)?;
        Ok(ctx.tape.value(out).cast())
    }
}

/// Noise-prediction MSE for one batch: `t ~ U{1..T}`, `eps ~ N(0, I)`.
pub fn denoiser_loss(
    ctx: &mut Ctx<f32>,
    net: &Denoiser,
    schedule: &DiffusionSchedule,
    z0: &Tensor<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = z0.shape()[0];
    let per = z0.numel() / n.max(1);
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.timesteps())).collect();
    let eps = Tensor::from_fn(z0.shape(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    });
    let mut zt = z0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let a = schedule.alpha_bar(t);
        let (sa, sn) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
        let span = i * per..(i + 1) * per;
        for (z, &e) in zt.data_mut()[span.clone()].iter_mut().zip(&eps.data()[span]) {
            *z = sa * *z + sn * e;
        }
    }
    let ztv = ctx.input(zt);
    let pred = net.forward(ctx, ztv, &ts)?;
    let target = ctx.input(eps);
    Ok(ctx.tape.mse(pred, target)?)
}

/// `avg <- d * avg + (1 - d) * p`, with `d` ramped up over the first steps
/// so the average is not dominated by the initialization.
fn update_average(avg: &mut ParamStore<f32>, store: &ParamStore<f32>, decay: f64, step: u64) {
    let d = decay.min((1 + step) as f64 / (10 + step) as f64) as f32;
    for i in 0..store.len() {
        let id = crate::params::ParamId(i);
        let src = store.value(id).data();
        for (a, &p) in avg.value_mut(id).data_mut().iter_mut().zip(src) {
            *a = d * *a + (1.0 - d) * p;
        }
    }
}

/// Trains a fresh denoiser on pre-encoded, pre-scaled latents `[N, C, h, w]`.
/// Returns the weight average when `ema_decay > 0`.
pub fn train_denoiser(
    latents: &Tensor<f32>,
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Denoiser, ParamStore<f32>, Vec<f64>)> {
    let shape = latents.shape().to_vec();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::Invalid(format!(
            "latent set must be [N, C, h, w], got {shape:?}"
        )));
    }
    let mut store = ParamStore::new();
    let net = Denoiser::new(cfg, shape[1], &mut store, seed)?;
    let mut adam = Adam::new(&store, cfg.weight_decay);
    let mut average = store.clone();
    let mut step = 0u64;
    let mut rng = rng_from(derive_seed(seed, "denoiser.noise"));
    let per = latents.numel() / shape[0];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..shape[0]).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, &format!("denoiser.epoch{epoch}"))));
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                data.extend_from_slice(&latents.data()[i * per..(i + 1) * per]);
            }
            let z0 = Tensor::from_vec(&[chunk.len(), shape[1], shape[2], shape[3]], data)?;
            let mut ctx = Ctx::new(&store, Mode::Train);
            let loss = denoiser_loss(&mut ctx, &net, schedule, &z0, &mut rng)?;
            let lv = ctx.tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("denoiser loss at epoch {epoch}")));
            }
            let grads = ctx.tape.backward(loss)?;
            drop(ctx);
            adam.step(&mut store, &grads, cfg.lr);
            update_average(&mut average, &store, cfg.ema_decay, step);
            step += 1;
            sum += lv;
            count += 1;
        }
        let mean = sum / count as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok((net, if cfg.ema_decay > 0.0 { average } else { store }, history))
}
