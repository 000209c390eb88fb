//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and whatever it
//! needs for the backward pass. `Tape::backward` walks the nodes in reverse
//! and only differentiates through nodes that transitively depend on a
//! parameter, so constant inputs (images, targets, detached values) cost
//! nothing in the backward pass.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, ConvShape};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics produced by a training-mode batch norm, for running
/// average updates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    AddChannelBias {
        x: Var,
        v: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    NarrowBatch {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        target: Var,
    },
    DiceWithLogits {
        logits: Var,
        target: Var,
        eps: T,
    },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every tape node that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter registered with [`Tape::param`]. `None`
    /// when the parameter was not used or did not reach the loss.
    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.params.get(&key).and_then(|v| self.get(*v))
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter key.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers parameter `key`. Repeated calls with the same key return
    /// the same node, so shared weights accumulate gradient from every use.
    pub fn param(&mut self, key: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.insert(key, v);
        v
    }

    /// Stop-gradient: same value, no backward edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let s = self.conv_shape(x, w, geom)?;
        if let Some(b) = b {
            if self.shape(b) != [s.cout] {
                return Err(shape_err("conv2d bias", self.shape(b), &[s.cout]));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &s,
            geom,
        );
        let value = Tensor::from_vec(&[s.n, s.cout, s.ho, s.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, ng))
    }

    fn conv_shape(&self, x: Var, w: Var, geom: ConvGeom) -> Result<ConvShape> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        let ho = geom.out_len(h, kh);
        let wo = geom.out_len(wd, kw);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(ConvShape {
                n,
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                ho,
                wo,
            }),
            _ => Err(shape_err("conv2d geometry", self.shape(x), self.shape(w))),
        }
    }

    /// Depthwise `k x k` convolution (groups = channels), stride 1.
    /// Weight shape `[c, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let (c, one, k, k2) = self.value(w).dims4()?;
        if c != dims.1 || one != 1 || k != k2 || dims.2 + 2 * pad < k || dims.3 + 2 * pad < k {
            return Err(shape_err("depthwise_conv2d", self.shape(x), self.shape(w)));
        }
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
            k,
            pad,
        );
        let ho = dims.2 + 2 * pad + 1 - k;
        let wo = dims.3 + 2 * pad + 1 - k;
        let value = Tensor::from_vec(&[dims.0, c, ho, wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Depthwise { x, w, b, pad }, ng))
    }

    /// Training-mode batch norm over (N, H, W) per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let m = n * hw;
        if m < 2 {
            return Err(TensorError::Invalid(format!(
                "batch_norm needs more than one value per channel, got shape {:?}",
                self.shape(x)
            )));
        }
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xs[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let mu = s / T::from_f64(m as f64);
            let mut v = T::zero();
            for b in 0..n {
                for &e in &xs[(b * c + ch) * hw..][..hw] {
                    v += (e - mu) * (e - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v / T::from_f64(m as f64) + T::from_f64(eps)).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != c || bt.len() != c {
            return Err(shape_err("batch_norm affine", self.shape(x), self.shape(gamma)));
        }
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var.into_iter().map(|v| v / T::from_f64((m - 1) as f64)).collect(),
        };
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch norm: normalizes with fixed statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm_frozen", self.shape(x), &[running_mean.len()]));
        }
        let hw = h * w;
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                scale: gamma,
                shift: beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let r = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(x, move |v| T::half() * v * (T::one() + (v * r).erf()), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        self.unary(x, move |v| v * f, Op::Scale(x, f))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Empty("concat_channels"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err("concat_channels", self.shape(first), self.shape(v)));
            }
            channels.push(vc);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, ctot, h, w], out)?;
        let ng = self.ng(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
            ng,
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if dims.2 % 2 != 0 || dims.3 % 2 != 0 {
            return Err(TensorError::Invalid(format!(
                "max_pool2 needs even spatial size, got {:?}",
                self.shape(x)
            )));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(x).data(), dims);
        let value = Tensor::from_vec(&[dims.0, dims.1, dims.2 / 2, dims.3 / 2], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Bilinear 2x upsampling (half-pixel centers).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let out = kernels::upsample2_forward(self.value(x).data(), dims);
        let value = Tensor::from_vec(&[dims.0, dims.1, 2 * dims.2, 2 * dims.3], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Upsample2(x), ng))
    }

    /// `x[n, c, :, :] + v[n, c]`.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(v) != [n, c] {
            return Err(shape_err("add_channel_bias", self.shape(x), self.shape(v)));
        }
        let hw = h * w;
        let vv = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|e| *e += vv[i]);
        }
        let ng = self.ng(&[x, v]);
        Ok(self.push(value, Op::AddChannelBias { x, v }, ng))
    }

    /// `x [n, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = match self.shape(x) {
            &[n, i] => (n, i),
            s => {
                return Err(TensorError::Rank {
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        let o = match self.shape(w) {
            &[o, wi] if wi == i => o,
            s => return Err(shape_err("linear", &[n, i], s)),
        };
        let mut out = vec![T::zero(); n * o];
        gemm(
            false,
            true,
            n,
            o,
            i,
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("linear bias", self.shape(b), &[o]));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(y, &bb)| *y += bb);
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow_batch(start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::NarrowBatch { x, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(value, Op::Mean(x), ng)
    }

    /// Pixel-mean binary cross-entropy on logits:
    /// `max(x, 0) - x y + ln(1 + e^{-|x|})`. No gradient flows to `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let l = self.value(logits);
        let t = self.value(target);
        l.expect_same_shape(t)?;
        let mut s = 0.0f64;
        for (&x, &y) in l.data().iter().zip(t.data()) {
            let x = x.as_f64();
            s += x.max(0.0) - x * y.as_f64() + (-x.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(T::from_f64(s / l.numel().max(1) as f64));
        let ng = self.ng(&[logits]);
        Ok(self.push(value, Op::BceWithLogits { logits, target }, ng))
    }

    /// Soft Dice loss on `sigmoid(logits)` with sums over the whole tensor:
    /// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)`.
    pub fn dice_with_logits(&mut self, logits: Var, target: Var, eps: f64) -> Result<Var> {
        let l = self.value(logits);
        let t = self.value(target);
        l.expect_same_shape(t)?;
        let (inter, sp, sy) = dice_sums(l.data(), t.data());
        let loss = 1.0 - (2.0 * inter + eps) / (sp + sy + eps);
        let value = Tensor::scalar(T::from_f64(loss));
        let ng = self.ng(&[logits]);
        Ok(self.push(
            value,
            Op::DiceWithLogits {
                logits,
                target,
                eps: T::from_f64(eps),
            },
            ng,
        ))
    }

    /// Mean squared difference; gradients flow to both sides.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        va.expect_same_shape(vb)?;
        let mut s = 0.0f64;
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = (x - y).as_f64();
            s += d * d;
        }
        let value = Tensor::scalar(T::from_f64(s / va.numel().max(1) as f64));
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), ng))
    }

    /// Gradients of scalar `loss` w.r.t. every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![T::one()])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn acc_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        let t = Tensor::from_vec(self.shape(v), data)?;
        self.acc(grads, v, t)
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let s = self.conv_shape(*x, *w, *geom)?;
                let need = (
                    self.needs_grad(*x),
                    self.needs_grad(*w),
                    b.is_some_and(|b| self.needs_grad(b)),
                );
                let cg = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, &s, *geom, need);
                if let Some(dx) = cg.dx {
                    self.acc_vec(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.acc_vec(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.acc_vec(grads, *b, db)?;
                }
            }
            Op::Depthwise { x, w, b, pad } => {
                let dims = self.value(*x).dims4()?;
                let k = self.shape(*w)[2];
                let need = (
                    self.needs_grad(*x),
                    self.needs_grad(*w),
                    b.is_some_and(|b| self.needs_grad(b)),
                );
                let cg =
                    kernels::depthwise_backward(self.value(*x).data(), self.value(*w).data(), gd, dims, k, *pad, need);
                if let Some(dx) = cg.dx {
                    self.acc_vec(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.acc_vec(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.acc_vec(grads, *b, db)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    self.acc_vec(grads, *x, dx)?;
                }
                self.acc_vec(grads, *gamma, dgamma)?;
                self.acc_vec(grads, *beta, dbeta)?;
            }
            Op::ChannelAffine {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let gam = self.value(*scale).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                            dx[i] = gd[i] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                self.acc_vec(grads, *x, dx)?;
                self.acc_vec(grads, *scale, dgamma)?;
                self.acc_vec(grads, *shift, dbeta)?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let r = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(0.5 * std::f64::consts::FRAC_2_SQRT_PI * r.as_f64());
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let cdf = T::half() * (T::one() + (v * r).erf());
                        let pdf = inv_sqrt_2pi * (-T::half() * v * v).exp();
                        g * (cdf + v * pdf)
                    })
                    .collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &e)| g * e).collect();
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.acc(grads, *a, da)?;
                }
                if self.needs_grad(*b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.acc(grads, *b, db)?;
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.acc(grads, *x, g.map(|v| v * f))?;
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone())?,
            Op::Concat { inputs, channels } => {
                let (n, ctot, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(channels) {
                    if self.needs_grad(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            d.extend_from_slice(&gd[(b * ctot + offset) * hw..][..c * hw]);
                        }
                        self.acc_vec(grads, v, d)?;
                    }
                    offset += c;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&gv, &i) in gd.iter().zip(argmax) {
                    dx[i as usize] += gv;
                }
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Upsample2(x) => {
                let dims = self.value(*x).dims4()?;
                let dx = kernels::upsample2_backward(gd, dims);
                self.acc_vec(grads, *x, dx)?;
            }
            Op::AddChannelBias { x, v } => {
                self.acc(grads, *x, g.clone())?;
                if self.needs_grad(*v) {
                    let (_, _, h, w) = node.value.dims4()?;
                    let dv = gd.chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                    self.acc_vec(grads, *v, dv)?;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    gemm(false, false, n, i, o, gd, self.value(*w).data(), T::zero(), &mut dx);
                    self.acc_vec(grads, *x, dx)?;
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm(true, false, o, i, n, gd, self.value(*x).data(), T::zero(), &mut dw);
                    self.acc_vec(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    self.acc_vec(grads, *b, db)?;
                }
            }
            Op::NarrowBatch { x, start } => {
                let full = self.value(*x);
                let n = full.shape()[0];
                let item = full.numel() / n.max(1);
                let mut dx = vec![T::zero(); full.numel()];
                dx[start * item..start * item + gd.len()].copy_from_slice(gd);
                self.acc_vec(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let s = gd[0];
                let dx = Tensor::full(self.shape(*x), s);
                self.acc(grads, *x, dx)?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let s = gd[0] / T::from_f64(n as f64);
                let dx = Tensor::full(self.shape(*x), s);
                self.acc(grads, *x, dx)?;
            }
            Op::BceWithLogits { logits, target } => {
                let l = self.value(*logits).data();
                let t = self.value(*target).data();
                let k = gd[0] / T::from_f64(l.len().max(1) as f64);
                let dx = l.iter().zip(t).map(|(&x, &y)| k * (sigmoid(x) - y)).collect();
                self.acc_vec(grads, *logits, dx)?;
            }
            Op::DiceWithLogits { logits, target, eps } => {
                let l = self.value(*logits).data();
                let t = self.value(*target).data();
                let (inter, sp, sy) = dice_sums(l, t);
                let eps = eps.as_f64();
                let num = 2.0 * inter + eps;
                let den = sp + sy + eps;
                let up = gd[0].as_f64();
                // d/dp of -(num/den) = -(2 y den - num) / den^2
                let dx = l
                    .iter()
                    .zip(t)
                    .map(|(&x, &y)| {
                        let p = sigmoid(x.as_f64());
                        let dp = -(2.0 * y.as_f64() * den - num) / (den * den);
                        T::from_f64(up * dp * p * (1.0 - p))
                    })
                    .collect();
                self.acc_vec(grads, *logits, dx)?;
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = T::from_f64(2.0) * gd[0] / T::from_f64(va.len().max(1) as f64);
                let d: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect();
                if self.needs_grad(*b) {
                    self.acc_vec(grads, *b, d.iter().map(|&v| -v).collect())?;
                }
                self.acc_vec(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

/// `(sum p*y, sum p, sum y)` with `p = sigmoid(logits)`, accumulated in f64.
fn dice_sums<T: Scalar>(logits: &[T], target: &[T]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    for (&x, &y) in logits.iter().zip(target) {
        let p = sigmoid(x.as_f64());
        let y = y.as_f64();
        inter += p * y;
        sp += p;
        sy += y;
    }
    (inter, sp, sy)
}

/// Numerically stable logistic function.
pub fn logistic<T: Scalar>(x: T) -> T {
    sigmoid(x)
}
