use proptest::prelude::*;
use sdtp_core::ops::{self, KernelWeights, MlpWeights};
use sdtp_core::{FeatureMap, SeededRng, Tensor, TokenMatrix};

/// Direct zero-padded convolution with explicit bounds checks.
fn direct_conv(x: &FeatureMap, k: &KernelWeights, dil: (usize, usize)) -> FeatureMap {
    let (c, h, w) = x.shape();
    let (oc, ic, kh, kw) = k.shape();
    assert_eq!(ic, c);
    let wt = k.weight.data();
    FeatureMap::from_fn(oc, h, w, |o, y, xx| {
        let mut acc = k.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        for i in 0..ic {
            for a in 0..kh {
                for b in 0..kw {
                    let sy = y as isize + (a as isize - (kh / 2) as isize) * dil.0 as isize;
                    let sx = xx as isize + (b as isize - (kw / 2) as isize) * dil.1 as isize;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    acc += wt[((o * ic + i) * kh + a) * kw + b] * x.at(i, sy as usize, sx as usize);
                }
            }
        }
        acc
    })
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

#[test]
fn dilated_impulse_lands_on_nine_offsets() {
    let mut x = FeatureMap::zeros(1, 7, 7);
    x.set(0, 3, 3, 1.0);
    let k = KernelWeights::new(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = ops::conv2d(&x, &k, (3, 3)).unwrap();
    assert_eq!(y, direct_conv(&x, &k, (3, 3)));
    for yy in 0..7 {
        for xx in 0..7 {
            let expected = [0, 3, 6].contains(&yy) && [0, 3, 6].contains(&xx);
            assert_eq!(y.at(0, yy, xx) != 0.0, expected, "({yy}, {xx})");
        }
    }
}

#[test]
fn random_convolutions_match_direct_oracle() {
    let mut rng = SeededRng::new(4);
    for kernel in [(1, 1), (3, 3), (3, 1), (1, 3)] {
        for dil in [(1, 1), (2, 2), (3, 1), (1, 4)] {
            let x = FeatureMap::from_tensor(rng.normal_tensor(&[3, 6, 5])).unwrap();
            let k = KernelWeights::new(rng.normal_tensor(&[2, 3, kernel.0, kernel.1]))
                .unwrap()
                .with_bias(rng.normal_tensor(&[2]));
            let got = ops::conv2d(&x, &k, dil).unwrap();
            let want = direct_conv(&x, &k, dil);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_moments() {
    let mut rng = SeededRng::new(8);
    // scaled so the epsilon's effect on the variance (~1e-5 / var) stays
    // below 1e-6
    let x = TokenMatrix::from_tensor(rng.normal_tensor(&[4, 8]).map(|v| 10.0 * v)).unwrap();
    let y = ops::layer_norm(&x, &[1.0; 8], &[0.0; 8]).unwrap();
    for r in 0..4 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        // the epsilon shrinks the variance slightly below one
        let xr = x.row(r);
        let m = xr.iter().sum::<f64>() / 8.0;
        let raw_var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
        assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_rejects_width_mismatch() {
    let x = TokenMatrix::new(2, 3, vec![0.0; 6]).unwrap();
    assert!(ops::layer_norm(&x, &[1.0; 2], &[0.0; 3]).is_err());
}

#[test]
fn mlp_matches_triple_loop() {
    let mut rng = SeededRng::new(15);
    let x = TokenMatrix::from_tensor(rng.normal_tensor(&[3, 4])).unwrap();
    let w = MlpWeights::init(4, 2.0, &mut rng).unwrap();
    let hid = w.hidden();
    assert_eq!(hid, 8);
    let mut h = naive_matmul(x.data(), w.w1.data(), 3, 4, hid);
    for (i, v) in h.iter_mut().enumerate() {
        let z = *v + w.b1.data()[i % hid];
        *v = 0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    }
    let mut y = naive_matmul(&h, w.w2.data(), 3, hid, 4);
    for (i, v) in y.iter_mut().enumerate() {
        *v += w.b2.data()[i % 4];
    }
    let got = ops::mlp(&x, &w).unwrap();
    for (a, b) in got.data().iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_golden_row() {
    // softmax([1, 2, 3]), rounded from a 50-digit reference
    let want = [
        0.090_030_573_170_380_46,
        0.24472847105479765,
        0.665_240_955_774_821_9,
    ];
    let s = ops::softmax_rows(&TokenMatrix::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
    for (a, b) in s.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn convolution_preserves_spatial_shape(
        c in 1usize..3, h in 1usize..9, w in 1usize..9,
        kernel in prop::sample::select(vec![(1usize, 1usize), (3, 3), (3, 1), (1, 3)]),
        dh in 1usize..6, dw in 1usize..6, out in 1usize..3,
    ) {
        let x = FeatureMap::zeros(c, h, w);
        let k = KernelWeights::new(Tensor::full(&[out, c, kernel.0, kernel.1], 0.5)).unwrap();
        let y = ops::conv2d(&x, &k, (dh, dw)).unwrap();
        prop_assert_eq!(y.shape(), (out, h, w));
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(
        prop::collection::vec(-1e3f64..1e3, 1..8), 1..5)
    ) {
        let width = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| {
            let mut r = r.clone();
            r.resize(width, 0.0);
            r
        }).collect();
        let s = ops::softmax_rows(&TokenMatrix::new(rows.len(), width, data).unwrap());
        for r in 0..rows.len() {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
