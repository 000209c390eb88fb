use proptest::prelude::*;
use sonoseg::backbone::{Network, NetworkConfig, PerturbationSpec};
use sonoseg::nn::{Ctx, Mode};
use sonoseg::objective::{bce_dice, consistency_loss, lambda_at, WarmupSchedule, DICE_EPS};
use sonoseg::params::ParamStore;
use sonoseg::rng::rng_from;
use sonoseg_tensor::{Tape, Tensor};

fn eval_bce_dice(logits: &[f64], target: &[f64], shape: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::from_vec(shape, logits.to_vec()).unwrap());
    let t = tape.constant(Tensor::from_vec(shape, target.to_vec()).unwrap());
    let v = bce_dice(&mut tape, l, t).unwrap();
    tape.value(v).data()[0]
}

fn eval_consistency(main: &[f64], aux: &[Vec<f64>]) -> f64 {
    let shape = [1, 1, 1, main.len()];
    let mut tape = Tape::<f64>::new();
    let m = tape.constant(Tensor::from_vec(&shape, main.to_vec()).unwrap());
    let a: Vec<_> = aux
        .iter()
        .map(|x| tape.constant(Tensor::from_vec(&shape, x.clone()).unwrap()))
        .collect();
    let v = consistency_loss(&mut tape, m, &a).unwrap();
    tape.value(v).data()[0]
}

/// Reference from the definition: 0.5 * mean BCE + 1 - soft Dice.
fn bce_dice_reference(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(target) {
        let p = 1.0 / (1.0 + (-z).exp());
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        inter += p * y;
        sp += p;
        st += y;
    }
    0.5 * bce / n + 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn all_ones_target_with_zero_logits() {
    let v = eval_bce_dice(&[0.0; 4], &[1.0; 4], &[1, 1, 2, 2]);
    assert!((v - 0.67991).abs() < 1e-4, "{v}");
}

#[test]
fn warmup_reference_points() {
    let s = WarmupSchedule {
        w_max: 0.1,
        t_max: 2000,
    };
    assert!((lambda_at(0, &s).unwrap() - 6.7379e-4).abs() < 5e-9);
    assert!((lambda_at(1000, &s).unwrap() - 2.8650e-2).abs() < 5e-7);
    assert_eq!(lambda_at(2000, &s).unwrap(), 0.1);
}

#[test]
fn constant_offset_gives_squared_offset() {
    for d in [-0.3f64, 0.05, 0.25] {
        // Probabilities 0.5 for main and 0.5 + d for every aux map.
        let z = (0.5 + d) / (0.5 - d);
        let aux_logit = z.ln();
        let main = vec![0.0; 16];
        let aux = vec![vec![aux_logit; 16]; 3];
        let v = eval_consistency(&main, &aux);
        assert!((v - d * d).abs() <= 1e-10, "d={d}: {v}");
    }
}

fn tiny_network() -> (NetworkConfig, Network, ParamStore<f64>) {
    let cfg = NetworkConfig {
        encoder_channels: vec![4, 8],
        bottleneck_channels: 8,
        convmixer_length: 3,
        convmixer_kernel: 3,
        taps: vec![0, 1, 2, 3],
        perturbations: vec![
            PerturbationSpec::f_noise(),
            PerturbationSpec::f_drop(),
            PerturbationSpec::dropout(),
        ],
        ..NetworkConfig::default()
    };
    let mut store = ParamStore::new();
    let net = Network::new(&cfg, &mut store, 3).unwrap();
    (cfg, net, store)
}

#[test]
fn consistency_gradient_never_reaches_the_main_decoder() {
    let (_, net, store) = tiny_network();
    let mut rng = rng_from(4);
    let images = Tensor::from_fn(&[2, 1, 8, 8], |_| rand::Rng::random_range(&mut rng, 0.0..1.0));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(images);
    let out = net.forward(&mut ctx, x, &mut rng_from(5)).unwrap();
    let unsup = consistency_loss(&mut ctx.tape, out.main, &out.aux).unwrap();
    let grads = ctx.tape.backward(unsup).unwrap();
    let mut main_params = 0;
    let mut aux_nonzero = false;
    for (id, e) in store.trainable() {
        let g = grads.param(id.0);
        if e.name.starts_with("decoder.main.") {
            main_params += 1;
            if let Some(g) = g {
                assert!(g.data().iter().all(|&v| v == 0.0), "{} has gradient", e.name);
            }
        }
        if e.name.starts_with("decoder.aux") {
            aux_nonzero |= g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        }
    }
    assert!(main_params > 0);
    assert!(aux_nonzero);
}

#[test]
fn eval_forward_is_pure() {
    let (_, net, store) = tiny_network();
    let images = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.37).sin().abs());
    let run = |seed| {
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.input(images.clone());
        let out = net.forward(&mut ctx, x, &mut rng_from(seed)).unwrap();
        assert!(out.aux.is_empty());
        ctx.tape.value(out.main).clone()
    };
    assert_eq!(run(1), run(2));
}

fn logits_and_target(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    })
}

proptest! {
    #[test]
    fn bce_dice_matches_definition((logits, target) in logits_and_target(32)) {
        let n = logits.len();
        let v = eval_bce_dice(&logits, &target, &[1, 1, 1, n]);
        let r = bce_dice_reference(&logits, &target);
        prop_assert!((v - r).abs() <= 1e-10 * r.abs().max(1.0), "{v} vs {r}");
        prop_assert!(v >= -1e-5);
    }

    #[test]
    fn bce_dice_is_permutation_invariant(
        (logits, target) in logits_and_target(24),
        seed in any::<u64>(),
    ) {
        let n = logits.len();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_from(seed));
        let pl: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
        let pt: Vec<f64> = order.iter().map(|&i| target[i]).collect();
        let a = eval_bce_dice(&logits, &target, &[1, 1, 1, n]);
        let b = eval_bce_dice(&pl, &pt, &[1, 1, 1, n]);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn lambda_is_increasing_and_bounded(w_max in 1e-3f64..10.0, t_max in 2u64..5000, a in 0u64..5000, b in 0u64..5000) {
        let s = WarmupSchedule { w_max, t_max };
        let (lo, hi) = (a.min(b).min(t_max), a.max(b).min(t_max));
        let (la, lb) = (lambda_at(lo as i64, &s).unwrap(), lambda_at(hi as i64, &s).unwrap());
        prop_assert!(la > 0.0 && lb <= w_max);
        if lo < hi {
            prop_assert!(la < lb);
        }
        prop_assert_eq!(lambda_at(t_max as i64, &s).unwrap(), w_max);
    }

    #[test]
    fn consistency_is_non_negative_and_zero_only_at_agreement(
        main in prop::collection::vec(-5.0f64..5.0, 1..16),
        offsets in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let aux: Vec<Vec<f64>> = offsets.iter().map(|o| main.iter().map(|m| m + o).collect()).collect();
        let v = eval_consistency(&main, &aux);
        prop_assert!(v >= 0.0);
        let same = eval_consistency(&main, &[main.clone(), main.clone()]);
        prop_assert_eq!(same, 0.0);
        // Reference: mean over aux maps of the mean squared probability gap.
        let mut expect = 0.0;
        for a in &aux {
            let s: f64 = a.iter().zip(&main).map(|(x, m)| (sigmoid(*x) - sigmoid(*m)).powi(2)).sum();
            expect += s / main.len() as f64;
        }
        expect /= aux.len() as f64;
        prop_assert!((v - expect).abs() <= 1e-12);
        if offsets.iter().any(|o| o.abs() > 1e-3) {
            prop_assert!(v > 0.0);
        }
    }
}
