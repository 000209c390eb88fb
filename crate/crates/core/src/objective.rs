//! Segmentation losses and the unsupervised weight schedule.

use serde::{Deserialize, Serialize};
use sonoseg_tensor::{Scalar, Tape, Var};

use crate::backbone::ForwardOutputs;
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const BCE_WEIGHT: f64 = 0.5;

/// `0.5 * BCE + (1 - Dice)` on logits. Both terms aggregate over the whole
/// batch. Errors if `target` has values outside {0, 1}.
pub fn bce_dice<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    if tape
        .value(target)
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Invalid("segmentation target must be binary".into()));
    }
    let bce = tape.bce_with_logits(logits, target)?;
    let dice = tape.dice_with_logits(logits, target, DICE_EPS)?;
    let bce = tape.scale(bce, BCE_WEIGHT);
    Ok(tape.add(bce, dice)?)
}

/// Mean of [`bce_dice`] over every decoder output. Returns the loss and the
/// per-decoder values (aux decoders first, main last).
pub fn supervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &ForwardOutputs,
    num_aux: usize,
    target: Var,
) -> Result<(Var, Vec<f64>)> {
    if outputs.aux.len() != num_aux {
        return Err(Error::Invalid(format!(
            "expected {num_aux} auxiliary outputs, got {}",
            outputs.aux.len()
        )));
    }
    let mut terms = Vec::with_capacity(num_aux + 1);
    for logits in outputs.all() {
        terms.push(bce_dice(tape, logits, target)?);
    }
    let per_decoder = terms.iter().map(|&v| tape.value(v).data()[0].as_f64()).collect();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok((tape.scale(acc, 1.0 / terms.len() as f64), per_decoder))
}

/// Mean over aux decoders of the pixel-mean squared difference between aux
/// and main probabilities. The main map is a fixed target: no gradient
/// reaches the main branch through this loss.
pub fn consistency_loss<T: Scalar>(tape: &mut Tape<T>, main: Var, aux: &[Var]) -> Result<Var> {
    if aux.is_empty() {
        return Err(Error::Invalid(
            "consistency loss needs at least one auxiliary output".into(),
        ));
    }
    let target = tape.detach(main);
    let target = tape.sigmoid(target);
    let mut acc = None;
    for &a in aux {
        let p = tape.sigmoid(a);
        let d = tape.mse(p, target)?;
        acc = Some(match acc {
            None => d,
            Some(s) => tape.add(s, d)?,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), 1.0 / aux.len() as f64))
}

/// Gaussian ramp for the unsupervised weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub w_max: f64,
    pub t_max: u64,
}

impl WarmupSchedule {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.w_max > 0.0 && self.w_max.is_finite()) {
            errors.push(format!("objective.w_max must be > 0, got {}", self.w_max));
        }
        if self.t_max == 0 {
            errors.push("warm-up t_max must be >= 1".into());
        }
        errors
    }
}

/// `w_max * exp(-5 (1 - step / t_max)^2)`, held at `w_max` past `t_max`.
pub fn lambda_at(step: i64, schedule: &WarmupSchedule) -> Result<f64> {
    if step < 0 {
        return Err(Error::Invalid(format!("negative step {step}")));
    }
    if schedule.t_max == 0 {
        return Err(Error::Invalid("warm-up t_max must be >= 1".into()));
    }
    let step = step as u64;
    if step >= schedule.t_max {
        return Ok(schedule.w_max);
    }
    let r = 1.0 - step as f64 / schedule.t_max as f64;
    Ok(schedule.w_max * (-5.0 * r * r).exp())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub supervised: f64,
    pub unsupervised: f64,
    pub lambda: f64,
    pub total: f64,
    pub per_decoder_supervised: Vec<f64>,
}

pub fn total_loss(supervised: f64, unsupervised: f64, step: i64, schedule: &WarmupSchedule) -> Result<LossReport> {
    if !supervised.is_finite() {
        return Err(Error::NonFinite(format!("supervised loss is {supervised}")));
    }
    if !unsupervised.is_finite() {
        return Err(Error::NonFinite(format!("consistency loss is {unsupervised}")));
    }
    let lambda = lambda_at(step, schedule)?;
    Ok(LossReport {
        supervised,
        unsupervised,
        lambda,
        total: supervised + lambda * unsupervised,
        per_decoder_supervised: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sonoseg_tensor::Tensor;

    fn eval_bce_dice(logits: Vec<f64>, target: Vec<f64>, shape: &[usize]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_vec(shape, logits).unwrap());
        let t = tape.constant(Tensor::from_vec(shape, target).unwrap());
        let v = bce_dice(&mut tape, l, t).unwrap();
        tape.value(v).data()[0]
    }

    #[test]
    fn bce_dice_hand_value() {
        let v = eval_bce_dice(vec![0.0; 4], vec![1.0; 4], &[1, 1, 2, 2]);
        let dice = 1.0 - (2.0 * 2.0 + DICE_EPS) / (2.0 + 4.0 + DICE_EPS);
        let expect = 0.5 * std::f64::consts::LN_2 + dice;
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.67991).abs() < 1e-4);
    }

    #[test]
    fn bce_dice_perfect_and_empty_limits() {
        let target = vec![1.0, 0.0, 0.0, 1.0];
        let logits = target.iter().map(|&t| if t > 0.5 { 20.0 } else { -20.0 }).collect();
        assert!(eval_bce_dice(logits, target, &[1, 1, 2, 2]) < 1e-6);
        let v = eval_bce_dice(vec![-30.0; 4], vec![0.0; 4], &[1, 1, 2, 2]);
        assert!(v.abs() < 1e-5, "{v}");
    }

    #[test]
    fn non_binary_target_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let t = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        assert!(bce_dice(&mut tape, l, t).is_err());
    }

    #[test]
    fn lambda_closed_forms() {
        let s = WarmupSchedule {
            w_max: 0.1,
            t_max: 1000,
        };
        assert_eq!(lambda_at(1000, &s).unwrap(), 0.1);
        assert_eq!(lambda_at(5000, &s).unwrap(), 0.1);
        assert!((lambda_at(0, &s).unwrap() - 6.7379e-4).abs() < 1e-8);
        assert!((lambda_at(500, &s).unwrap() - 2.8650e-2).abs() < 1e-6);
        assert!(lambda_at(-1, &s).is_err());
    }

    #[test]
    fn total_combines_terms() {
        let s = WarmupSchedule { w_max: 0.1, t_max: 10 };
        let r = total_loss(0.5, 0.2, 10, &s).unwrap();
        assert!((r.total - 0.52).abs() < 1e-15);
        let r = total_loss(0.5, 1.0, 0, &s).unwrap();
        assert!((r.total - (0.5 + 0.1 * (-5.0f64).exp())).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 0, &s).is_err());
    }
}
