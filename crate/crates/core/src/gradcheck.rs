//! Central finite-difference gradient checks for layers that read their
//! weights from a [`ParamStore`].

use rand::Rng;
use sonoseg_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode};
use crate::params::{ParamKind, ParamStore};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest per-tensor relative error `max|a - n| / max(|a|, |n|, 1e-6)`.
    pub max_rel_error: f64,
    /// Name of the tensor that produced it.
    pub worst: String,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

/// Reduces `out` to a scalar by a dot product with a fixed random direction,
/// so every element of `out` receives a distinct upstream gradient. The
/// direction is scaled by `1 / sqrt(numel)` to keep the result O(1).
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng_from(seed);
    let k = 1.0 / (tape.value(out).numel() as f64).sqrt();
    let dir = Tensor::from_fn(tape.shape(out), |_| k * rng.random_range(-1.0..1.0));
    let d = tape.constant(dir);
    let m = tape.mul(out, d)?;
    Ok(tape.sum(m))
}

/// Evenly spaced coordinates, at most `limit` of `n`.
fn coordinates(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Denominator floor, so tensors whose true gradient is zero (a bias
/// followed by batch norm) are judged on absolute error.
const SCALE_FLOOR: f64 = 1e-6;

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(SCALE_FLOOR);
    let err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    err / scale
}

/// Compares the tape gradient of the scalar `f` against central differences
/// with step `h`, for every trainable parameter and every input. `f` runs in
/// train mode and must be deterministic. `limit` caps the coordinates
/// checked per tensor.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    limit: Option<usize>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut ctx = Ctx::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        let v = ctx.tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Invalid(format!(
                "gradient check needs a scalar, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut ctx = Ctx::new(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    let grads = ctx.tape.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let note = |name: &str, analytic: &[f64], numeric: &[f64], report: &mut GradReport| {
        let e = relative(analytic, numeric);
        report.checked += analytic.len();
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name.to_string();
        }
    };

    let mut work = store.clone();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Trainable)
        .map(|(id, e)| (id, e.name.clone()))
        .collect();
    for (id, name) in ids {
        let zero = Tensor::zeros(store.value(id).shape());
        let g = grads.param(id.0).unwrap_or(&zero);
        let coords = coordinates(g.numel(), limit);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work, inputs)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work, inputs)?;
            work.value_mut(id).data_mut()[j] = orig;
            analytic.push(g.data()[j]);
            numeric.push((plus - minus) / (2.0 * h));
        }
        note(&name, &analytic, &numeric, &mut report);
    }

    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let g = grads.get(*var).unwrap_or(&zero);
        let coords = coordinates(g.numel(), limit);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + h;
            let plus = eval(store, &perturbed)?;
            perturbed[i].data_mut()[j] = orig - h;
            let minus = eval(store, &perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            analytic.push(g.data()[j]);
            numeric.push((plus - minus) / (2.0 * h));
        }
        note(&format!("input{i}"), &analytic, &numeric, &mut report);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_sampling() {
        assert_eq!(coordinates(5, None), vec![0, 1, 2, 3, 4]);
        assert_eq!(coordinates(5, Some(10)), vec![0, 1, 2, 3, 4]);
        assert_eq!(coordinates(10, Some(3)), vec![0, 3, 6]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of detach(x) * x is x analytically, 2x numerically.
        let store = ParamStore::<f64>::new();
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&store, &[x], 1e-6, None, |ctx, v| {
            let d = ctx.tape.detach(v[0]);
            let p = ctx.tape.mul(d, v[0])?;
            Ok(ctx.tape.sum(p))
        })
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
        assert_eq!(r.worst, "input0");
    }
}
