use std::sync::Arc;

use gpo_core::tensor::{Tape, Tensor};
use gpo_core::wavelet::{dwt, dwt_packed, idwt, idwt_packed, WaveletBasis, WaveletTransform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn constant_signal_has_no_details() {
    for basis in WaveletBasis::all() {
        let c = dwt(&[2.5; 32], &[32], basis, 3).unwrap();
        for band in c.details.iter().flatten() {
            assert!(band.iter().all(|v| v.abs() < 1e-12), "{basis}");
        }
    }
}

#[test]
fn parseval_on_length_64() {
    let x = random(64, 1);
    let energy: f64 = x.iter().map(|v| v * v).sum();
    for basis in WaveletBasis::all() {
        let c = dwt(&x, &[64], basis, 3).unwrap();
        assert!((c.energy() - energy).abs() < 1e-10, "{basis}");
    }
}

#[test]
fn round_trip_1d_db4_three_levels() {
    let x = random(256, 2);
    let c = dwt(&x, &[256], WaveletBasis::Db4, 3).unwrap();
    assert!(max_diff(&idwt(&c).unwrap(), &x) < 1e-10);
}

#[test]
fn round_trip_2d_haar_two_levels() {
    let x = random(32 * 32, 3);
    let c = dwt(&x, &[32, 32], WaveletBasis::Haar, 2).unwrap();
    assert!(max_diff(&idwt(&c).unwrap(), &x) < 1e-10);
}

#[test]
fn round_trip_every_basis_and_level() {
    for basis in WaveletBasis::all() {
        for levels in 1..=5 {
            let x = random(128, levels as u64);
            let back = idwt_packed(&dwt_packed(&x, &[128], basis, levels).unwrap(), &[128], basis, levels).unwrap();
            assert!(max_diff(&back, &x) < 1e-10, "{basis} L={levels}");
            let y = random(32 * 64, 10 + levels as u64);
            let back = idwt_packed(
                &dwt_packed(&y, &[32, 64], basis, levels).unwrap(),
                &[32, 64],
                basis,
                levels,
            )
            .unwrap();
            assert!(max_diff(&back, &y) < 1e-10, "2d {basis} L={levels}");
        }
    }
}

#[test]
fn zero_coefficients_give_zero_signal() {
    let c = dwt(&[0.0; 64], &[8, 8], WaveletBasis::Db6, 2).unwrap();
    assert!(idwt(&c).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn mismatched_coefficients_are_rejected() {
    let mut c = dwt(&random(64, 4), &[64], WaveletBasis::Db4, 2).unwrap();
    c.details.pop();
    assert!(idwt(&c).is_err());
}

#[test]
fn transform_primitives_match_finite_differences() {
    for basis in WaveletBasis::all() {
        for inverse in [false, true] {
            let prim = Arc::new(if inverse {
                WaveletTransform::inverse(basis, 2)
            } else {
                WaveletTransform::forward(basis, 2)
            });
            let x0 = random(2 * 8 * 8, 5);
            let wts = Tensor::new(vec![1, 2, 8, 8], random(128, 6)).unwrap();
            let loss = |x: &[f64]| {
                let mut tape = Tape::new();
                let xv = tape.param(Tensor::new(vec![1, 2, 8, 8], x.to_vec()).unwrap());
                let w = tape.constant(wts.clone());
                let y = tape.apply(prim.clone(), &[xv]).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                let yw = tape.mul(y2, w).unwrap();
                let s = tape.sum(yw).unwrap();
                let v = tape.value(s).data()[0];
                let g = tape.backward(s).unwrap().get(xv).unwrap().data().to_vec();
                (v, g)
            };
            let (_, grad) = loss(&x0);
            let h = 1e-5;
            for i in (0..x0.len()).step_by(7) {
                let mut xp = x0.clone();
                xp[i] += h;
                let mut xm = x0.clone();
                xm[i] -= h;
                let fd = (loss(&xp).0 - loss(&xm).0) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-5, "{basis} inverse={inverse} i={i}: {fd} vs {}", grad[i]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dwt_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = random(64, seed);
        let y = random(64, seed + 1);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        for basis in WaveletBasis::all() {
            let cx = dwt_packed(&x, &[64], basis, 3).unwrap();
            let cy = dwt_packed(&y, &[64], basis, 3).unwrap();
            let cm = dwt_packed(&mix, &[64], basis, 3).unwrap();
            for i in 0..64 {
                prop_assert!((cm[i] - (a * cx[i] + b * cy[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_by_block_permutes_coarsest_coefficients(seed in 0u64..1000, levels in 1usize..4) {
        let n = 64;
        let step = 1 << levels;
        let x = random(n, seed);
        let shifted: Vec<f64> = (0..n).map(|i| x[(i + step) % n]).collect();
        for basis in WaveletBasis::all() {
            let c = dwt(&x, &[n], basis, levels).unwrap();
            let cs = dwt(&shifted, &[n], basis, levels).unwrap();
            let m = c.approx.len();
            for k in 0..m {
                prop_assert!((cs.approx[k] - c.approx[(k + 1) % m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval_2d(seed in 0u64..1000, levels in 1usize..4) {
        let x = random(16 * 32, seed);
        let energy: f64 = x.iter().map(|v| v * v).sum();
        for basis in WaveletBasis::all() {
            let c = dwt(&x, &[16, 32], basis, levels).unwrap();
            prop_assert!((c.energy() - energy).abs() < 1e-10);
        }
    }
}
