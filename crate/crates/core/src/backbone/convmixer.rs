use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{ConvGeom, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, DepthwiseConv2d};
use crate::params::ParamStore;

/// One mixing layer: a residual depthwise spatial mix followed by a
/// pointwise channel mix, each with GELU and batch norm.
#[derive(Debug, Clone)]
pub struct ConvMixerLayer {
    depthwise: DepthwiseConv2d,
    bn1: BatchNorm2d,
    pointwise: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvMixerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            depthwise: DepthwiseConv2d::new(store, &format!("{name}.dw"), channels, kernel, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), channels),
            pointwise: Conv2d::new(
                store,
                &format!("{name}.pw"),
                channels,
                channels,
                1,
                ConvGeom::default(),
                true,
                rng,
            ),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), channels),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let y = self.depthwise.forward(ctx, f)?;
        let y = ctx.tape.gelu(y);
        let y = self.bn1.forward(ctx, y)?;
        let mixed = ctx.tape.add(y, f)?;
        let y = self.pointwise.forward(ctx, mixed)?;
        let y = ctx.tape.gelu(y);
        self.bn2.forward(ctx, y)
    }
}

#[derive(Debug, Clone)]
pub struct ConvMixer {
    layers: Vec<ConvMixerLayer>,
}

impl ConvMixer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        length: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..length)
            .map(|l| ConvMixerLayer::new(store, &format!("convmixer.layer{l}"), channels, kernel, rng))
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Runs the first `length` layers once and returns the requested
    /// intermediate outputs. Tap 0 is the input itself.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        f: Var,
        length: usize,
        taps: &[usize],
    ) -> Result<BTreeMap<usize, Var>> {
        if length > self.layers.len() {
            return Err(Error::Invalid(format!(
                "convmixer length {length} exceeds the {} configured layers",
                self.layers.len()
            )));
        }
        if let Some(&t) = taps.iter().find(|&&t| t > length) {
            return Err(Error::Invalid(format!("tap {t} outside [0, {length}]")));
        }
        let mut out = BTreeMap::new();
        let mut x = f;
        if taps.contains(&0) {
            out.insert(0, x);
        }
        for (l, layer) in self.layers[..length].iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if taps.contains(&(l + 1)) {
                out.insert(l + 1, x);
            }
        }
        Ok(out)
    }
}
