//! Randomized roundtrip error-bound checks: 10,000 seeded matrices per codec.

use nebula::codec::{decode, encode, CodecMethod};
use nebula::matrix::{svd, Mat};
use nebula::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const CASES: u64 = 10_000;

fn random_case(seed: u64) -> Matrix {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=8);
    let n = rng.gen_range(1..=8);
    Mat::from_fn(m, n, |_, _| rng.gen_range(-10.0..10.0))
}

#[test]
fn identity_roundtrip_is_bit_exact_for_10k_matrices() {
    for i in 0..CASES {
        let x = random_case(i);
        let y = decode(&encode(&x, &CodecMethod::Identity, i).unwrap()).unwrap();
        assert_eq!(x.as_slice(), y.as_slice(), "case {i}");
    }
}

#[test]
fn fp16_relative_error_bound_holds_for_10k_matrices() {
    for i in 0..CASES {
        let x = random_case(100_000 + i);
        let y = decode(&encode(&x, &CodecMethod::Fp16, i).unwrap()).unwrap();
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            // Half-ulp relative bound in the normal range; absolute floor
            // covers the subnormal range.
            let bound = a.abs() * 2f64.powi(-11) + 2f64.powi(-25);
            assert!((a - b).abs() <= bound, "case {i}: {a} -> {b}");
        }
    }
}

#[test]
fn int8_error_stays_within_half_scale_for_10k_matrices() {
    for i in 0..CASES {
        let x = random_case(200_000 + i);
        let payload = encode(&x, &CodecMethod::Int8, i).unwrap();
        let scale = f64::from_le_bytes(payload.body[0..8].try_into().unwrap());
        let y = decode(&payload).unwrap();
        let worst = x.sub(&y).max_abs();
        assert!(worst <= scale / 2.0 + 1e-12, "case {i}: worst {worst} scale {scale}");
    }
}

#[test]
fn svd_roundtrip_error_matches_dropped_tail_for_10k_matrices() {
    for i in 0..CASES {
        let x = random_case(300_000 + i);
        let mut rng = ChaCha20Rng::seed_from_u64(900_000 + i);
        let rho = rng.gen_range(0.05..=1.0);
        let payload = encode(&x, &CodecMethod::Svd { keep_fraction: rho }, i).unwrap();
        let y = decode(&payload).unwrap();
        let rank = payload.rank as usize;
        let f = svd(&x).unwrap();
        let tail: f64 = f.sigma[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = x.sub(&y).frobenius_norm();
        assert!(
            (err - tail).abs() <= 1e-7 * (1.0 + x.frobenius_norm()),
            "case {i}: rho {rho} rank {rank} err {err} tail {tail}"
        );
    }
}

#[test]
fn nested_fp16_svd_error_bound_holds_for_10k_matrices() {
    for i in 0..CASES {
        let x = random_case(400_000 + i);
        let mut rng = ChaCha20Rng::seed_from_u64(800_000 + i);
        let rho = rng.gen_range(0.05..=1.0);
        let payload = encode(&x, &CodecMethod::fp16_svd(rho), i).unwrap();
        let y = decode(&payload).unwrap();
        let rank = payload.rank as usize;
        let f = svd(&x).unwrap();
        let tail: f64 = f.sigma[rank..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = x.sub(&y).frobenius_norm();
        // Truncation tail plus half-precision noise on the factors.
        let slack = 0.02 * (1.0 + x.frobenius_norm());
        assert!(err <= tail + slack, "case {i}: rho {rho} err {err} tail {tail}");
    }
}
