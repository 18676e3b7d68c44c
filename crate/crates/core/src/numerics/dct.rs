//! Orthonormal DCT-II and its inverse.

use rustdct::DctPlanner;

use super::WeightVector;
use crate::error::{Error, Result};

/// Orthonormal DCT-II:
/// `X_k = s_k * sum_n x_n cos(pi (2n + 1) k / (2N))`, `s_0 = sqrt(1/N)`, `s_k = sqrt(2/N)`.
pub fn dct2(v: &[f64]) -> Result<WeightVector> {
    let n = v.len();
    if n == 0 {
        return Err(Error::EmptyVector);
    }
    let mut buf = v.to_vec();
    DctPlanner::new().plan_dct2(n).process_dct2(&mut buf);
    let s0 = (1.0 / n as f64).sqrt();
    let sk = (2.0 / n as f64).sqrt();
    buf[0] *= s0;
    buf[1..].iter_mut().for_each(|x| *x *= sk);
    Ok(buf.into())
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(coeffs: &[f64]) -> Result<WeightVector> {
    let n = coeffs.len();
    if n == 0 {
        return Err(Error::EmptyVector);
    }
    // rustdct's DCT-III computes x_n = X_0 / 2 + sum_{k>=1} X_k cos(...).
    let mut buf = coeffs.to_vec();
    buf[0] *= 2.0 * (1.0 / n as f64).sqrt();
    let sk = (2.0 / n as f64).sqrt();
    buf[1..].iter_mut().for_each(|x| *x *= sk);
    DctPlanner::new().plan_dct3(n).process_dct3(&mut buf);
    Ok(buf.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use std::f64::consts::PI;

    /// Direct O(n^2) summation.
    fn naive_dct2(v: &[f64]) -> Vec<f64> {
        let n = v.len() as f64;
        (0..v.len())
            .map(|k| {
                let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                let sum: f64 = v
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos())
                    .sum();
                s * sum
            })
            .collect()
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(dct2(&[]), Err(Error::EmptyVector)));
    }

    #[test]
    fn constant_vector_is_dc_only() {
        let c = dct2(&[2.5; 16]).unwrap();
        assert!((c[0] - 2.5 * 4.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn zero_maps_to_zero() {
        assert!(dct2(&[0.0; 7]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn impulse_matches_naive() {
        let v = [1.0, 0.0, 0.0, 0.0];
        let fast = dct2(&v).unwrap();
        for (a, b) in fast.iter().zip(naive_dct2(&v)) {
            assert!((a - b).abs() < 1e-10);
        }
        // X_k = s_k for an impulse at n = 0 scaled by cos(pi k / 8).
        assert!((fast[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn random_lengths_match_naive_and_invert() {
        let mut rng = Rng::new(3);
        for n in [1usize, 2, 3, 5, 8, 17, 64, 101] {
            let v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
            let fast = dct2(&v).unwrap();
            for (a, b) in fast.iter().zip(naive_dct2(&v)) {
                assert!((a - b).abs() < 1e-10, "n={n}");
            }
            let back = idct2(&fast).unwrap();
            let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (a, b) in back.iter().zip(&v) {
                assert!((a - b).abs() < 1e-10 * scale);
            }
            let norm_in: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((fast.norm() - norm_in).abs() < 1e-10 * norm_in.max(1.0));
        }
    }
}
