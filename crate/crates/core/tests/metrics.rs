use proptest::prelude::*;
use sonoseg::data::Mask;
use sonoseg::metrics::{aggregate, confusion, confusion_slices, mean_std, Confusion, Scores};

/// Per-pixel oracle written independently of the library: counts by
/// explicit predicates and ratios straight from the definitions.
fn oracle(pred: &[u8], gt: &[u8]) -> [f64; 4] {
    let count = |f: &dyn Fn(u8, u8) -> bool| pred.iter().zip(gt).filter(|(&p, &g)| f(p, g)).count() as f64;
    let tp = count(&|p, g| p == 1 && g == 1);
    let fp = count(&|p, g| p == 1 && g == 0);
    let fn_ = count(&|p, g| p == 0 && g == 1);
    let empty = tp + fp + fn_ == 0.0;
    let div = |a: f64, b: f64| {
        if b == 0.0 {
            if empty {
                1.0
            } else {
                0.0
            }
        } else {
            a / b
        }
    };
    [
        div(tp, tp + fp + fn_),
        div(tp, tp + fn_),
        div(tp, tp + fp),
        div(2.0 * tp, 2.0 * tp + fp + fn_),
    ]
}

fn mask_pair(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..=1, n), prop::collection::vec(0u8..=1, n))
}

#[test]
fn oracle_agreement_on_1000_pairs() {
    use rand::Rng;
    let mut rng = sonoseg::rng::rng_from(77);
    for i in 0..1000 {
        // Vary density so empty and full masks both occur.
        let dp = [0.0, 0.05, 0.3, 0.7, 1.0][i % 5];
        let dg = [0.0, 0.2, 0.5, 0.9, 1.0][(i / 5) % 5];
        let pred: Vec<u8> = (0..256).map(|_| (rng.random::<f64>() < dp) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| (rng.random::<f64>() < dg) as u8).collect();
        let p = Mask::new(16, 16, pred.clone()).unwrap();
        let g = Mask::new(16, 16, gt.clone()).unwrap();
        let s = confusion(&p, &g).unwrap().scores();
        assert_eq!(s.as_array(), oracle(&pred, &gt), "pair {i}");
        if s.iou > 0.0 {
            assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() <= 1e-15);
        }
    }
}

#[test]
fn empty_conventions() {
    let both_empty = confusion_slices(&[0, 0], &[0, 0]).unwrap();
    assert_eq!(both_empty.scores().as_array(), [1.0; 4]);
    let missed = confusion_slices(&[0, 0], &[1, 0]).unwrap();
    assert_eq!(missed.scores().as_array(), [0.0; 4]);
    let hallucinated = confusion_slices(&[1, 0], &[0, 0]).unwrap();
    assert_eq!(hallucinated.scores().as_array(), [0.0; 4]);
}

#[test]
fn mismatched_inputs_are_rejected() {
    assert!(confusion_slices(&[0, 1], &[0]).is_err());
    assert!(confusion_slices(&[2], &[0]).is_err());
    assert!(confusion(&Mask::empty(2, 2), &Mask::empty(4, 1)).is_err());
}

#[test]
fn aggregation_uses_sample_deviation() {
    let m = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m.mean - 2.5).abs() < 1e-15);
    assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[0.7]).std, 0.0);
    let runs = [
        Scores {
            iou: 0.5,
            recall: 0.6,
            precision: 0.7,
            f1: 0.8,
        },
        Scores {
            iou: 0.7,
            recall: 0.6,
            precision: 0.5,
            f1: 0.4,
        },
    ];
    let a = aggregate(&runs).unwrap();
    assert!((a.scores[0].mean - 0.6).abs() < 1e-15);
    assert_eq!(a.runs, 2);
    assert!(aggregate(&[]).is_err());
}

proptest! {
    #[test]
    fn scores_match_oracle_and_lie_in_unit_interval((pred, gt) in mask_pair(64)) {
        let c = confusion_slices(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), 64);
        let s = c.scores().as_array();
        prop_assert_eq!(s, oracle(&pred, &gt));
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn f1_iou_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
        let c = Confusion { tp, fp, fn_, tn };
        let (i, f) = (c.iou(), c.f1());
        prop_assert!((f - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        if tp > 0 {
            prop_assert!(i <= f);
        }
    }

    #[test]
    fn monotone_in_tp_with_totals_fixed(tp in 0u64..500, fp in 1u64..500, fn_ in 1u64..500, tn in 0u64..500) {
        // Move one false positive and one false negative into tp and tn.
        let a = Confusion { tp, fp, fn_, tn };
        let b = Confusion { tp: tp + 1, fp: fp - 1, fn_: fn_ - 1, tn: tn + 1 };
        prop_assert_eq!(a.total(), b.total());
        for (x, y) in a.scores().as_array().iter().zip(b.scores().as_array()) {
            prop_assert!(*x <= y);
        }
    }

    #[test]
    fn permutation_symmetry((pred, gt) in mask_pair(48), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..48).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut sonoseg::rng::rng_from(seed));
        let pp: Vec<u8> = order.iter().map(|&i| pred[i]).collect();
        let pg: Vec<u8> = order.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(confusion_slices(&pred, &gt).unwrap(), confusion_slices(&pp, &pg).unwrap());
    }
}
