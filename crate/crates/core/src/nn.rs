//! Layer building blocks: each layer owns [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Ctx`].

use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{BatchStats, ConvGeom, Scalar, Tape, Tensor, Var};

use crate::error::Result;
use crate::params::{kaiming_normal, uniform, ParamId, ParamKind, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Train or eval behaviour for batch norm, dropout and perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// Forward-pass context: the tape, read access to parameters, and the
/// batch-norm running-stat updates to apply once the step is done.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(id.0, self.store.value(id))
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Consumes the context, returning the tape and a deferred update that
    /// folds the batch statistics into the running averages.
    pub fn finish(self) -> (Tape<T>, RunningStatUpdate<T>) {
        (
            self.tape,
            RunningStatUpdate {
                updates: self.bn_updates,
            },
        )
    }
}

pub struct RunningStatUpdate<T> {
    updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> RunningStatUpdate<T> {
    pub fn apply(self, store: &mut ParamStore<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        for u in self.updates {
            for (r, &b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            kaiming_normal(&[cout, cin, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout])));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.tape.conv2d(x, w, b, self.geom)?)
    }
}

/// Per-channel `k x k` convolution with same padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            kaiming_normal(&[channels, 1, kernel, kernel], kernel * kernel, rng),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[channels]));
        Self { weight, bias, kernel }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        Ok(ctx.tape.depthwise_conv2d(x, w, Some(b), self.kernel / 2)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones(&[channels]),
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, BN_EPS)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.value(self.running_mean).data();
                let var = ctx.store.value(self.running_var).data();
                Ok(ctx.tape.batch_norm_frozen(x, g, b, mean, var, BN_EPS)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::Trainable,
                uniform(&[outputs, inputs], bound, rng),
            ),
            bias: store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        Ok(ctx.tape.linear(x, w, Some(b))?)
    }
}

/// `(3x3 conv -> batch norm -> ReLU) x 2`, the U-Net stage block.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ConvGeom::same(3);
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, g, true, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, g, true, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}
