use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{Ctx, DoubleConv};
use crate::params::ParamStore;

/// U-Net contracting path: one double-conv stage per entry of
/// `channels`, 2x2 max-pool between stages, then a bottleneck double-conv.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<DoubleConv>,
    bottleneck: DoubleConv,
}

pub struct Encoded {
    /// Stage outputs, finest first.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input_channels: usize,
        channels: &[usize],
        bottleneck_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut cin = input_channels;
        let mut stages = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            stages.push(DoubleConv::new(store, &format!("encoder.stage{i}"), cin, c, rng));
            cin = c;
        }
        let bottleneck = DoubleConv::new(store, "encoder.bottleneck", cin, bottleneck_channels, rng);
        Self { stages, bottleneck }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, images: Var) -> Result<Encoded> {
        let shape = ctx.tape.shape(images).to_vec();
        let multiple = 1usize << self.stages.len();
        if shape.len() != 4 || !shape[2].is_multiple_of(multiple) || !shape[3].is_multiple_of(multiple) {
            return Err(Error::Invalid(format!(
                "encoder input {shape:?} must be [B, C, H, W] with H and W divisible by {multiple}"
            )));
        }
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut x = images;
        for stage in &self.stages {
            let s = stage.forward(ctx, x)?;
            skips.push(s);
            x = ctx.tape.max_pool2(s)?;
        }
        let bottleneck = self.bottleneck.forward(ctx, x)?;
        Ok(Encoded { skips, bottleneck })
    }
}
