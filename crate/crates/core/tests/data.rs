use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;

use proptest::prelude::*;
use sonoseg::data::{
    augment, generate_toy, load_directory, make_splits, parse_manifest, partition_labels, read_split, save_gray_png,
    subset_size, write_manifest, write_sample, write_split, AugmentationConfig, BatchPlan, GrayImage, LoadOptions,
    Mask, Rotation, Sample, Source, ToyGenConfig, Transform, SYNTHETIC_MANIFEST,
};
use sonoseg::rng::rng_from;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case_{i:04}")).collect()
}

/// Round-half-down of `k * n / 1000`, in integers.
fn subset_oracle(k: u64, n: u64) -> u64 {
    (2 * k * n + 999) / 2000
}

#[test]
fn half_splits_leave_the_larger_part_as_remainder() {
    assert_eq!(subset_size(0.5, 1359), 679);
    assert_eq!(1359 - subset_size(0.5, 1359), 680);
    assert_eq!(subset_size(0.7, 1942), 1359);
    assert_eq!(subset_size(0.7, 780), 546);
}

#[test]
fn toy_generation_is_deterministic_and_well_formed() {
    let cfg = ToyGenConfig {
        seed: 7,
        ..ToyGenConfig::default()
    };
    let a = generate_toy(&cfg, 100).unwrap();
    let b = generate_toy(&cfg, 100).unwrap();
    assert_eq!(a, b);
    let first = generate_toy(&cfg, 3).unwrap();
    assert_eq!(&a[..3], &first[..]);
    for s in &a {
        let m = s.mask.as_ref().unwrap();
        assert_eq!(s.size(), (64, 64));
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.data.iter().all(|&v| v <= 1));
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for (&p, &k) in s.image.data.iter().zip(&m.data) {
            if k == 1 {
                inside += p as f64;
                ni += 1;
            } else {
                outside += p as f64;
                no += 1;
            }
        }
        assert!(ni > 0 && no > 0);
        assert!(inside / (ni as f64) < outside / (no as f64), "{}", s.id);
    }
    assert!(generate_toy(&cfg, 0).is_err());
}

#[test]
fn single_lesion_area_follows_the_ellipse_envelope() {
    let cfg = ToyGenConfig {
        lesion_count_range: (1, 1),
        lesion_axis_range: (8.0, 12.0),
        seed: 3,
        ..ToyGenConfig::default()
    };
    // Rasterized area of an ellipse with full axes in [8, 12], with a
    // perimeter-sized allowance for pixel-centre sampling.
    let (lo, hi) = (PI * 64.0 / 4.0, PI * 144.0 / 4.0);
    let slack = PI * 12.0;
    for s in generate_toy(&cfg, 200).unwrap() {
        let area = s.mask.unwrap().foreground() as f64;
        assert!(area >= lo - slack && area <= hi + slack, "{}: {area}", s.id);
    }
}

#[test]
fn directory_roundtrip_with_sources() {
    let dir = tempfile::tempdir().unwrap();
    let real = dir.path().join("real");
    let cfg = ToyGenConfig {
        image_size: 32,
        lesion_axis_range: (6.0, 12.0),
        ..ToyGenConfig::default()
    };
    let samples = generate_toy(&cfg, 6).unwrap();
    for s in &samples[..4] {
        write_sample(&real, s, "_mask").unwrap();
    }
    // One unlabeled image and one synthetic directory.
    let unl = Sample {
        mask: None,
        ..samples[4].clone()
    };
    write_sample(&real, &unl, "_mask").unwrap();
    let synth = real.join("synthetic");
    write_sample(
        &synth,
        &Sample {
            mask: None,
            id: "synth_0_0".into(),
            ..samples[5].clone()
        },
        "_mask",
    )
    .unwrap();
    fs::write(synth.join(SYNTHETIC_MANIFEST), "count = 1\n").unwrap();

    let opts = LoadOptions {
        mask_suffix: "_mask".into(),
        size: None,
    };
    let loaded = load_directory(&real, &opts).unwrap();
    assert_eq!(loaded.len(), 6);
    let by_id = |id: &str| loaded.iter().find(|s| s.id == id).unwrap();
    for s in &samples[..4] {
        let l = by_id(&s.id);
        assert_eq!(l.source, Source::RealLabeled);
        assert_eq!(l.mask, s.mask);
        for (a, b) in l.image.data.iter().zip(&s.image.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    assert_eq!(by_id(&samples[4].id).source, Source::RealUnlabeled);
    assert_eq!(by_id("synth_0_0").source, Source::Synthetic);
    assert!(by_id("synth_0_0").mask.is_none());

    let resized = load_directory(
        &real,
        &LoadOptions {
            size: Some((16, 16)),
            ..opts.clone()
        },
    )
    .unwrap();
    assert!(resized.iter().all(|s| s.size() == (16, 16)));
    assert!(resized
        .iter()
        .filter_map(|s| s.mask.as_ref())
        .all(|m| m.data.iter().all(|&v| v <= 1)));
}

#[test]
fn multiple_masks_are_merged() {
    let dir = tempfile::tempdir().unwrap();
    let first = Mask::new(4, 4, [1, 0, 0, 0].repeat(4)).unwrap();
    let s = Sample::new("a", GrayImage::filled(4, 4, 0.5), Some(first), Source::RealLabeled).unwrap();
    write_sample(dir.path(), &s, "_mask").unwrap();
    let second: Vec<u8> = [0, 0, 0, 255].repeat(4);
    save_gray_png(&dir.path().join("a_mask_1.png"), 4, 4, &second).unwrap();
    let loaded = load_directory(
        dir.path(),
        &LoadOptions {
            size: None,
            ..LoadOptions::default()
        },
    )
    .unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].mask.as_ref().unwrap().data, [1, 0, 0, 1].repeat(4));
}

#[test]
fn broken_layouts_name_the_offending_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    save_gray_png(
        &dir.path().join("orphan_mask.png"),
        2,
        2,
        &m.data.iter().map(|v| v * 255).collect::<Vec<_>>(),
    )
    .unwrap();
    let err = load_directory(dir.path(), &LoadOptions::default())
        .unwrap_err()
        .to_string();
    assert!(err.contains("orphan_mask.png"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
    let err = load_directory(dir.path(), &LoadOptions::default())
        .unwrap_err()
        .to_string();
    assert!(err.contains("bad.png"), "{err}");

    let empty = tempfile::tempdir().unwrap();
    assert!(load_directory(empty.path(), &LoadOptions::default()).is_err());
}

#[test]
fn split_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let splits = make_splits(&ids(40), 0.7, 3, 11).unwrap();
    for s in &splits {
        let p = partition_labels(s, 0.25, 11).unwrap();
        write_split(dir.path(), &p).unwrap();
        let back = read_split(dir.path(), p.repeat_index).unwrap();
        assert_eq!(back.train_ids, p.train_ids);
        assert_eq!(back.val_ids, p.val_ids);
        assert_eq!(back.labeled_ids, p.labeled_ids);
    }
    assert!(read_split(dir.path(), 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subset_size_rounds_half_down(k in 1u64..=1000, n in 0u64..5000) {
        prop_assert_eq!(subset_size(k as f64 / 1000.0, n as usize) as u64, subset_oracle(k, n));
    }

    #[test]
    fn splits_partition_and_are_reproducible(
        n in 2usize..200,
        ratio_k in 1u64..1000,
        repeats in 1usize..4,
        frac_k in 1u64..=1000,
        seed in any::<u64>(),
    ) {
        let ratio = ratio_k as f64 / 1000.0;
        let all = ids(n);
        let a = make_splits(&all, ratio, repeats, seed).unwrap();
        prop_assert_eq!(&a, &make_splits(&all, ratio, repeats, seed).unwrap());
        // Input order does not matter.
        let mut rev = all.clone();
        rev.reverse();
        prop_assert_eq!(&a, &make_splits(&rev, ratio, repeats, seed).unwrap());
        let expect_train = subset_oracle(ratio_k, n as u64).clamp(1, n as u64 - 1) as usize;
        for s in &a {
            prop_assert_eq!(s.train_ids.len(), expect_train);
            let train: HashSet<_> = s.train_ids.iter().collect();
            let val: HashSet<_> = s.val_ids.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), n);
            let p = partition_labels(s, frac_k as f64 / 1000.0, seed).unwrap();
            prop_assert_eq!(&p, &partition_labels(s, frac_k as f64 / 1000.0, seed).unwrap());
            prop_assert_eq!(p.labeled_ids.len() as u64, subset_oracle(frac_k, expect_train as u64));
            prop_assert_eq!(p.labeled_ids.len() + p.unlabeled_ids().len(), p.train_ids.len());
            prop_assert!(p.labeled_ids.iter().all(|id| train.contains(id)));
        }
    }

    #[test]
    fn batch_plan_cycles_through_each_pool(
        nl in 1usize..40,
        nu in 1usize..60,
        lpb in 1usize..6,
        upb in 0usize..6,
        seed in any::<u64>(),
    ) {
        let plan = BatchPlan::new(nl, nu, lpb, upb, seed).unwrap();
        prop_assert_eq!(plan.steps_per_epoch(), nl.div_ceil(lpb));
        let batches: Vec<_> = (0..3 * plan.steps_per_epoch()).map(|k| plan.batch(k)).collect();
        let flat_l: Vec<usize> = batches.iter().flat_map(|b| b.0.clone()).collect();
        let flat_u: Vec<usize> = batches.iter().flat_map(|b| b.1.clone()).collect();
        for (k, (l, u)) in batches.iter().enumerate() {
            prop_assert_eq!(l.len(), lpb);
            prop_assert_eq!(u.len(), upb);
            prop_assert_eq!(&plan.batch(k), &(l.clone(), u.clone()));
        }
        // Every full pass over a pool visits each item exactly once.
        for (flat, len) in [(&flat_l, nl), (&flat_u, nu)] {
            for pass in flat.chunks_exact(len) {
                let mut sorted = pass.to_vec();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..len).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn augmentation_moves_image_and_mask_together(
        w in 1usize..12,
        h in 1usize..12,
        seed in any::<u64>(),
        bits in prop::collection::vec(0u8..=1, 144),
    ) {
        let mask = Mask::new(w, h, bits[..w * h].to_vec()).unwrap();
        // Image pixels encode both the mask bit and the position, so any
        // misalignment shows up.
        let image = GrayImage::new(
            w,
            h,
            (0..w * h).map(|i| (mask.data[i] as f32 + i as f32 * 2.0) / (2.0 * (w * h) as f32 + 1.0)).collect(),
        )
        .unwrap();
        let s = Sample::new("s", image, Some(mask), Source::RealLabeled).unwrap();
        let cfg = AugmentationConfig { flip_horizontal_prob: 0.5, flip_vertical_prob: 0.5, rotation: Rotation::RightAngles };
        let out = augment(&s, &cfg, &mut rng_from(seed));
        let m = out.mask.as_ref().unwrap();
        prop_assert_eq!((m.width, m.height), out.size());
        prop_assert_eq!(out.size() == (w, h) || out.size() == (h, w), true);
        let scale = 2.0 * (w * h) as f32 + 1.0;
        let mut seen = HashSet::new();
        for (p, &b) in out.image.data.iter().zip(&m.data) {
            let code = (p * scale).round() as usize;
            prop_assert_eq!((code % 2) as u8, b);
            seen.insert(code / 2);
        }
        prop_assert_eq!(seen.len(), w * h);
    }

    #[test]
    fn transforms_compose_with_their_inverse(
        n in 1usize..9,
        flip_h: bool,
        flip_v: bool,
        quarter_turns in 0u8..4,
    ) {
        let grid: Vec<usize> = (0..n * n).collect();
        let t = Transform { flip_h, flip_v, quarter_turns };
        // Undo: rotate back, then flips (each is its own inverse).
        let back_rot = Transform { quarter_turns: (4 - quarter_turns) % 4, ..Default::default() };
        let flips = Transform { flip_h, flip_v, quarter_turns: 0 };
        let there = t.apply(&grid, n, n);
        prop_assert_eq!(flips.apply(&back_rot.apply(&there, n, n), n, n), grid);
    }

    #[test]
    fn manifests_roundtrip(names in prop::collection::hash_set("[a-z][a-z0-9_ ()-]{0,12}[a-z0-9)]", 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let list: Vec<String> = names.into_iter().collect();
        write_manifest(&path, &list).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        prop_assert_eq!(parse_manifest(&text).unwrap(), list);
    }
}
