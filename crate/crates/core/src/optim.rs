//! Gradient-descent optimizers and the poly learning-rate schedule.

use sonoseg_tensor::{Gradients, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

/// `lr0 * (1 - step / total)^power`, 0 from `total` on.
pub fn poly_lr(step: u64, total: u64, lr0: f64, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

/// Moment buffers keyed by parameter name, for checkpointing.
pub type Slots<T> = Vec<(String, Tensor<T>)>;

fn zeros_like_trainable<T: Scalar>(store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
    store
        .iter()
        .map(|(_, e)| (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape())))
        .collect()
}

fn export<T: Scalar>(prefix: &str, store: &ParamStore<T>, bufs: &[Option<Tensor<T>>]) -> Slots<T> {
    store
        .iter()
        .zip(bufs)
        .filter_map(|((_, e), b)| b.as_ref().map(|b| (format!("{prefix}{}", e.name), b.clone())))
        .collect()
}

fn import<T: Scalar>(
    prefix: &str,
    store: &ParamStore<T>,
    bufs: &mut [Option<Tensor<T>>],
    slots: &[(String, Tensor<T>)],
) -> Result<()> {
    for ((_, e), b) in store.iter().zip(bufs.iter_mut()) {
        let Some(b) = b else { continue };
        let key = format!("{prefix}{}", e.name);
        let (_, t) = slots
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer slot {key}")))?;
        if t.shape() != b.shape() {
            return Err(Error::Checkpoint(format!(
                "optimizer slot {key} has shape {:?}, expected {:?}",
                t.shape(),
                b.shape()
            )));
        }
        *b = t.clone();
    }
    Ok(())
}

/// SGD with heavy-ball momentum and weight decay added to the gradient:
/// `g += wd * p; v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: zeros_like_trainable(store),
        }
    }

    /// Parameters that received no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        let (mu, wd, lr) = (
            T::from_f64(self.momentum),
            T::from_f64(self.weight_decay),
            T::from_f64(lr),
        );
        for i in 0..store.len() {
            let id = crate::params::ParamId(i);
            let (Some(v), Some(g)) = (self.velocity[i].as_mut(), grads.param(i)) else {
                continue;
            };
            let p = store.value_mut(id).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }

    pub fn slots(&self, store: &ParamStore<T>) -> Slots<T> {
        export("sgd.velocity.", store, &self.velocity)
    }

    pub fn load_slots(&mut self, store: &ParamStore<T>, slots: &[(String, Tensor<T>)]) -> Result<()> {
        import("sgd.velocity.", store, &mut self.velocity, slots)
    }
}

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros_like_trainable(store),
            v: zeros_like_trainable(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let step = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(self.eps);
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        for i in 0..store.len() {
            let id = crate::params::ParamId(i);
            let (Some(m), Some(v), Some(g)) = (self.m[i].as_mut(), self.v[i].as_mut(), grads.param(i)) else {
                continue;
            };
            let p = store.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p *= decay;
                *p -= step * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }

    pub fn slots(&self, store: &ParamStore<T>) -> Slots<T> {
        let mut s = export("adam.m.", store, &self.m);
        s.extend(export("adam.v.", store, &self.v));
        s
    }

    pub fn load_slots(&mut self, store: &ParamStore<T>, slots: &[(String, Tensor<T>)]) -> Result<()> {
        import("adam.m.", store, &mut self.m, slots)?;
        import("adam.v.", store, &mut self.v, slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sonoseg_tensor::Tape;

    #[test]
    fn poly_values() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9), 0.0);
        assert!((poly_lr(50, 100, 0.01, 0.9) - 5.359e-3).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = poly_lr(s, 100, 0.01, 0.9);
            assert!(lr < prev);
            prev = lr;
        }
    }

    fn single_param(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Trainable, Tensor::from_vec(&[1], vec![value]).unwrap());
        store
    }

    fn grads_of(
        store: &ParamStore<f64>,
        f: impl Fn(&mut Tape<f64>, sonoseg_tensor::Var) -> sonoseg_tensor::Var,
    ) -> Gradients<f64> {
        let mut tape = Tape::new();
        let w = tape.param(0, store.value(crate::params::ParamId(0)));
        let loss = f(&mut tape, w);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn coupled_weight_decay_with_zero_loss_gradient() {
        let mut store = single_param(2.0);
        let g = grads_of(&store, |t, w| t.scale(w, 0.0));
        let mut sgd = Sgd::new(&store, 0.9, 1e-4);
        sgd.step(&mut store, &g, 0.1);
        let p = store.value(crate::params::ParamId(0)).data()[0];
        assert!((p - 2.0 * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = single_param(0.0);
        let mut sgd = Sgd::new(&store, 0.5, 0.0);
        for _ in 0..2 {
            let g = grads_of(&store, |t, w| t.sum(w));
            sgd.step(&mut store, &g, 1.0);
        }
        // v1 = 1, v2 = 1.5
        assert_eq!(store.value(crate::params::ParamId(0)).data()[0], -2.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = single_param(1.0);
        let mut adam = Adam::new(&store, 0.0);
        let g = grads_of(&store, |t, w| t.scale(w, 3.0));
        adam.step(&mut store, &g, 0.01);
        let p = store.value(crate::params::ParamId(0)).data()[0];
        assert!((p - 0.99).abs() < 1e-6);
    }
}
