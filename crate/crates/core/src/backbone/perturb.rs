//! Feature perturbations for the auxiliary decoders. Each one is a
//! multiplicative mask, so the perturbed map is `f * m` with `m` held
//! constant during backprop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sonoseg_tensor::{Scalar, Tensor, Var};

use super::config::PerturbationSpec;
use crate::error::Result;
use crate::nn::{Ctx, Mode};

/// Builds the multiplier for `f` under `spec`.
pub fn perturbation_mask<T: Scalar>(f: &Tensor<T>, spec: &PerturbationSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    match *spec {
        PerturbationSpec::None => Ok(Tensor::ones(f.shape())),
        PerturbationSpec::FNoise { noise_bound } => Ok(Tensor::from_fn(f.shape(), |_| {
            let u = if noise_bound > 0.0 {
                rng.random_range(-noise_bound..noise_bound)
            } else {
                0.0
            };
            T::from_f64(1.0 + u)
        })),
        PerturbationSpec::Dropout { rate } => {
            let keep = T::from_f64(1.0 / (1.0 - rate));
            Ok(Tensor::from_fn(f.shape(), |_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            }))
        }
        PerturbationSpec::FDrop {
            drop_threshold_range: [lo, hi],
        } => {
            let (n, c, h, w) = f.dims4()?;
            let plane = h * w;
            let mut mask = Tensor::ones(f.shape());
            let src = f.data();
            for b in 0..n {
                let mut saliency = vec![0.0f64; plane];
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for (s, v) in saliency.iter_mut().zip(&src[off..off + plane]) {
                        *s += v.as_f64().abs();
                    }
                }
                let max = saliency.iter().cloned().fold(0.0, f64::max);
                let gamma = if hi > lo { rng.random_range(lo..hi) } else { lo };
                if max <= 0.0 {
                    continue;
                }
                let out = mask.data_mut();
                for (p, &s) in saliency.iter().enumerate() {
                    if s / max >= gamma {
                        for ch in 0..c {
                            out[(b * c + ch) * plane + p] = T::zero();
                        }
                    }
                }
            }
            Ok(mask)
        }
    }
}

/// Applies `spec` to `f`. Identity in eval mode.
pub fn perturb<T: Scalar>(ctx: &mut Ctx<T>, f: Var, spec: &PerturbationSpec, rng: &mut ChaCha8Rng) -> Result<Var> {
    if ctx.mode() == Mode::Eval || *spec == PerturbationSpec::None {
        return Ok(f);
    }
    let mask = perturbation_mask(ctx.tape.value(f), spec, rng)?;
    let m = ctx.tape.constant(mask);
    Ok(ctx.tape.mul(f, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn features(seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_noise_is_identity() {
        let f = features(1);
        let m = perturbation_mask(&f, &PerturbationSpec::FNoise { noise_bound: 0.0 }, &mut rng_from(2)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn noise_is_bounded_relative_to_feature() {
        let f = features(3);
        let mut rng = rng_from(4);
        for _ in 0..20 {
            let m = perturbation_mask(&f, &PerturbationSpec::f_noise(), &mut rng).unwrap();
            for (&x, &k) in f.data().iter().zip(m.data()) {
                assert!((x * k - x).abs() <= 0.3 * x.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn dropout_survivor_fraction_and_mean() {
        let n = 200_000;
        let f = Tensor::<f64>::ones(&[1, 1, 1, n]);
        let m = perturbation_mask(&f, &PerturbationSpec::dropout(), &mut rng_from(5)).unwrap();
        let survivors = m.data().iter().filter(|&&v| v > 0.0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((survivors - n as f64 * 0.5).abs() <= 3.0 * sigma);
        assert!((m.mean() - 1.0).abs() < 0.01);
    }

    #[test]
    fn fdrop_removes_the_most_salient_positions() {
        // One position dominates: it must always be dropped, the faint
        // ones (saliency 0.1 < 0.6) never.
        let mut f = Tensor::<f64>::full(&[1, 2, 4, 4], 0.05);
        f.data_mut()[5] = 1.0;
        f.data_mut()[16 + 5] = -1.0;
        let mut rng = rng_from(6);
        for _ in 0..10 {
            let m = perturbation_mask(&f, &PerturbationSpec::f_drop(), &mut rng).unwrap();
            for ch in 0..2 {
                for p in 0..16 {
                    let expect = if p == 5 { 0.0 } else { 1.0 };
                    assert_eq!(m.data()[ch * 16 + p], expect);
                }
            }
        }
    }

    #[test]
    fn fdrop_on_zero_features_keeps_everything() {
        let f = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let m = perturbation_mask(&f, &PerturbationSpec::f_drop(), &mut rng_from(7)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }
}
