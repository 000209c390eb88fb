use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{ConvGeom, Scalar, Var};

use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, Ctx};
use crate::params::ParamStore;

/// Multi-scale attention gate: pointwise, 3x3 and dilated 3x3 branches are
/// fused into a sigmoid mask `g`, and the skip becomes `f * g + f`.
#[derive(Debug, Clone)]
pub struct Msag {
    branches: [(Conv2d, BatchNorm2d); 3],
    fuse: Conv2d,
}

impl Msag {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let mut branch = |tag: &str, kernel: usize, geom: ConvGeom| {
            (
                Conv2d::new(store, &format!("{name}.{tag}"), c, c, kernel, geom, true, rng),
                BatchNorm2d::new(store, &format!("{name}.{tag}_bn"), c),
            )
        };
        let branches = [
            branch("pointwise", 1, ConvGeom::default()),
            branch("conv3", 3, ConvGeom::same(3)),
            branch(
                "dilated",
                3,
                ConvGeom {
                    stride: 1,
                    padding: 2,
                    dilation: 2,
                },
            ),
        ];
        let fuse = Conv2d::new(
            store,
            &format!("{name}.fuse"),
            3 * c,
            c,
            1,
            ConvGeom::default(),
            true,
            rng,
        );
        Self { branches, fuse }
    }

    /// Parameters of the final 1x1 fusion conv, which fully determine the
    /// gate once its input is fixed.
    pub fn fuse_conv(&self) -> &Conv2d {
        &self.fuse
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for (conv, bn) in &self.branches {
            let y = conv.forward(ctx, f)?;
            parts.push(bn.forward(ctx, y)?);
        }
        let cat = ctx.tape.concat_channels(&parts)?;
        let cat = ctx.tape.relu(cat);
        let logits = self.fuse.forward(ctx, cat)?;
        let g = ctx.tape.sigmoid(logits);
        let gated = ctx.tape.mul(f, g)?;
        Ok(ctx.tape.add(gated, f)?)
    }
}
