use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{ConvGeom, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, DoubleConv};
use crate::params::ParamStore;

/// U-Net expanding path: bilinear 2x upsample, concatenate the skip,
/// double-conv down to the skip's width; a final 1x1 conv yields one logit
/// channel.
#[derive(Debug, Clone)]
pub struct Decoder {
    /// Deepest stage first.
    stages: Vec<DoubleConv>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        skip_channels: &[usize],
        bottleneck_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut prev = bottleneck_channels;
        let mut stages = Vec::with_capacity(skip_channels.len());
        for (i, &c) in skip_channels.iter().enumerate().rev() {
            stages.push(DoubleConv::new(store, &format!("{name}.up{i}"), prev + c, c, rng));
            prev = c;
        }
        let head = Conv2d::new(
            store,
            &format!("{name}.head"),
            prev,
            1,
            1,
            ConvGeom::default(),
            true,
            rng,
        );
        Self { stages, head }
    }

    /// `skips` are finest first, as produced by the encoder.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.stages.len() {
            return Err(Error::Invalid(format!(
                "decoder expects {} skips, got {}",
                self.stages.len(),
                skips.len()
            )));
        }
        let mut x = x;
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let up = ctx.tape.upsample2(x)?;
            let cat = ctx.tape.concat_channels(&[skip, up])?;
            x = stage.forward(ctx, cat)?;
        }
        self.head.forward(ctx, x)
    }
}
