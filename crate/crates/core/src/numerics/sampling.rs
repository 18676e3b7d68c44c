use super::Rng;
use crate::error::{Error, Result};

/// Draw from a symmetric Dirichlet(alpha) over `k` categories.
///
/// Gamma variates are handled in log space so that tiny concentrations
/// (where raw Gamma draws underflow to zero) still normalise cleanly:
/// for `alpha < 1`, `ln G(alpha) = ln G(alpha + 1) + ln(U) / alpha`.
pub fn sample_dirichlet(rng: &mut Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConcentration(alpha));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("dirichlet needs k >= 1".into()));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            if alpha >= 1.0 {
                rng.gamma(alpha).ln()
            } else {
                let g = rng.gamma(alpha + 1.0);
                // 1 - U lies in (0, 1], so the log is finite.
                let u = 1.0 - rng.uniform();
                g.ln() + u.ln() / alpha
            }
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_concentration() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            sample_dirichlet(&mut rng, 0.0, 3),
            Err(Error::InvalidConcentration(_))
        ));
        assert!(sample_dirichlet(&mut rng, -1.0, 3).is_err());
    }

    #[test]
    fn single_category() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_dirichlet(&mut rng, 0.3, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn sums_to_one() {
        let mut rng = Rng::new(9);
        for alpha in [0.01, 0.1, 0.5, 1.0, 10.0, 1e6] {
            for _ in 0..50 {
                let p = sample_dirichlet(&mut rng, alpha, 10).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
            }
        }
    }

    #[test]
    fn large_alpha_concentrates() {
        let mut rng = Rng::new(5);
        let mut mean = [0.0; 4];
        for _ in 0..100 {
            let p = sample_dirichlet(&mut rng, 1e6, 4).unwrap();
            for (m, x) in mean.iter_mut().zip(&p) {
                *m += x / 100.0;
            }
            assert!(p.iter().all(|x| (x - 0.25).abs() < 0.02));
        }
        assert!(mean.iter().all(|x| (x - 0.25).abs() < 0.02));
    }

    #[test]
    fn small_alpha_is_sparse() {
        // Independent route: normalised raw Gamma(alpha) draws, with draws
        // that underflow everywhere skipped.
        let mut oracle_rng = Rng::new(77);
        let mut oracle_sum = 0.0;
        let mut oracle_n = 0;
        for _ in 0..1000 {
            let g: Vec<f64> = (0..10).map(|_| oracle_rng.gamma(0.1)).collect();
            let t: f64 = g.iter().sum();
            if t > 0.0 {
                oracle_sum += g.iter().cloned().fold(0.0, f64::max) / t;
                oracle_n += 1;
            }
        }
        let oracle_mean = oracle_sum / oracle_n as f64;
        assert!(oracle_mean > 0.6);

        let mut rng = Rng::new(78);
        let mean_max: f64 = (0..1000)
            .map(|_| {
                sample_dirichlet(&mut rng, 0.1, 10)
                    .unwrap()
                    .into_iter()
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean_max > 0.6);
        assert!((mean_max - oracle_mean).abs() < 0.05);
    }

    #[test]
    fn reproducible() {
        let a = sample_dirichlet(&mut Rng::new(3), 0.5, 6).unwrap();
        let b = sample_dirichlet(&mut Rng::new(3), 0.5, 6).unwrap();
        assert_eq!(a, b);
    }
}
