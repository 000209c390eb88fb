//! Forward kernels against direct nested-loop definitions.

use proptest::prelude::*;
use sonoseg_tensor::{ConvGeom, Tape, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    // Small splitmix-style stream; the values only need to be varied.
    let mut s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(shape, |_| {
        s ^= s >> 30;
        s = s.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        s ^= s >> 27;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn at(t: &Tensor<f64>, i: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeom) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let span = g.dilation * (k - 1) + 1;
    let ho = (h + 2 * g.padding - span) / g.stride + 1;
    let wo = (wd + 2 * g.padding - span) / g.stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += at(x, [ni, ci, iy as usize, ix as usize]) * at(w, [co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_sum(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, padding in 0usize..3,
        dilation in 1usize..3, seed in any::<u64>(),
    ) {
        let span = dilation * (k - 1) + 1;
        prop_assume!(h + 2 * padding >= span && w + 2 * padding >= span);
        let geom = ConvGeom { stride, padding, dilation };
        let x = tensor(&[n, cin, h, w], seed);
        let wt = tensor(&[cout, cin, k, k], seed ^ 1);
        let b = tensor(&[cout], seed ^ 2);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), geom).unwrap();
        prop_assert!(close(tape.value(y).data(), &naive_conv(&x, &wt, b.data(), geom)));
    }

    #[test]
    fn depthwise_matches_per_channel_conv(
        n in 1usize..3, c in 1usize..5, h in 3usize..9, k in prop::sample::select(vec![3usize, 5, 7]),
        seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = tensor(&[n, c, h, h], seed);
        let wt = tensor(&[c, 1, k, k], seed ^ 1);
        let b = tensor(&[c], seed ^ 2);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
        let y = tape.depthwise_conv2d(xv, wv, Some(bv), pad).unwrap();
        let got = tape.value(y);
        prop_assert_eq!(got.shape(), &[n, c, h, h][..]);
        let geom = ConvGeom { stride: 1, padding: pad, dilation: 1 };
        for ci in 0..c {
            let xc = Tensor::from_fn(&[n, 1, h, h], |i| {
                let (ni, p) = (i / (h * h), i % (h * h));
                x.data()[(ni * c + ci) * h * h + p]
            });
            let wc = Tensor::from_vec(&[1, 1, k, k], wt.data()[ci * k * k..(ci + 1) * k * k].to_vec()).unwrap();
            let want = naive_conv(&xc, &wc, &b.data()[ci..=ci], geom);
            for ni in 0..n {
                let start = (ni * c + ci) * h * h;
                prop_assert!(close(&got.data()[start..start + h * h], &want[ni * h * h..(ni + 1) * h * h]));
            }
        }
    }

    #[test]
    fn max_pool_takes_block_maxima(n in 1usize..3, c in 1usize..3, h in 1usize..5, seed in any::<u64>()) {
        let x = tensor(&[n, c, 2 * h, 2 * h], seed);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let p = tape.max_pool2(xv).unwrap();
        let got = tape.value(p);
        for (ni, ci, y, xx) in (0..n).flat_map(|a| (0..c).flat_map(move |b| (0..h).flat_map(move |y| (0..h).map(move |x| (a, b, y, x))))) {
            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(dy, dx)| at(&x, [ni, ci, 2 * y + dy, 2 * xx + dx]))
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(at(got, [ni, ci, y, xx]), m);
        }
    }

    #[test]
    fn upsampling_interpolates_at_half_pixel_centers(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = tensor(&[1, 1, h, w], seed);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let u = tape.upsample2(xv).unwrap();
        let got = tape.value(u);
        prop_assert_eq!(got.shape(), &[1, 1, 2 * h, 2 * w][..]);
        let coord = |o: usize, len: usize| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(len - 1), s - i0 as f64)
        };
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let (y0, y1, fy) = coord(oy, h);
                let (x0, x1, fx) = coord(ox, w);
                let v = |y, xx| at(&x, [0, 0, y, xx]);
                let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                prop_assert!((at(got, [0, 0, oy, ox]) - want).abs() <= 1e-12);
            }
        }
    }
}
