//! Evaluation metrics: classifier two-sample test, distance of sample means,
//! singular spectra, and the one-sample Kolmogorov–Smirnov test.

mod c2st;

pub use c2st::{c2st, C2stConfig};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A metric value with the configuration and seed that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

fn column_means(samples: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for s in samples {
        for (a, v) in m.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Squared distance between sample means, each dimension measured in units
/// of its prior standard deviation.
pub fn mse_of_means(samples: &[Vec<f64>], reference: &[Vec<f64>], prior_stds: &[f64]) -> Result<f64> {
    let d = prior_stds.len();
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::structural("empty sample set"));
    }
    if samples.iter().chain(reference).any(|s| s.len() != d) {
        return Err(Error::structural("sample dimension does not match prior scales"));
    }
    let (a, b) = (column_means(samples, d), column_means(reference, d));
    Ok(a.iter()
        .zip(&b)
        .zip(prior_stds)
        .map(|((x, y), s)| ((x - y) / s).powi(2))
        .sum())
}

/// Singular values of the column-centered matrix, in descending order.
pub fn singular_spectrum(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    singular_values(rows, true)
}

/// Singular values in descending order, optionally after subtracting the
/// mean row.
pub fn singular_values(rows: &[Vec<f64>], center: bool) -> Result<Vec<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Err(Error::structural("empty matrix"));
    }
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::structural("ragged matrix"));
    }
    let means = if center { column_means(rows, m) } else { vec![0.0; m] };
    let mat = DMatrix::from_fn(n, m, |i, j| rows[i][j] - means[j]);
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values at least `rel_threshold` times the largest.
pub fn effective_dimension(values: &[f64], rel_threshold: f64) -> usize {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    values.iter().filter(|v| **v >= rel_threshold * max).count()
}

/// Asymptotic Kolmogorov distribution tail `P(K > λ)`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov statistic against `cdf` and its asymptotic
/// p-value (with Stephens' finite-sample correction).
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::structural("KS test needs samples"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sqrt_n = n.sqrt();
    Ok((d, kolmogorov_tail((sqrt_n + 0.12 + 0.11 / sqrt_n) * d)))
}

/// Normal CDF.
pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(mean, std).expect("positive std").cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn draws(n: usize, mu: f64, seed: u64) -> Vec<f64> {
        let d = Normal::new(mu, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn mse_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(mse_of_means(&a, &a, &[1.0, 1.0]).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|r| vec![r[0] + 2.0, r[1]]).collect();
        assert_eq!(mse_of_means(&a, &b, &[2.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn mse_shift_invariant() {
        // dyadic values and a power-of-two count keep every mean exact
        let q = |v: f64| vec![(v * 64.0).round() / 64.0];
        let a: Vec<Vec<f64>> = draws(64, 0.0, 1).into_iter().map(q).collect();
        let b: Vec<Vec<f64>> = draws(64, 0.3, 2).into_iter().map(q).collect();
        let shift = |s: &[Vec<f64>]| s.iter().map(|r| vec![r[0] + 0.25]).collect::<Vec<_>>();
        assert_eq!(
            mse_of_means(&a, &b, &[1.0]).unwrap(),
            mse_of_means(&shift(&a), &shift(&b), &[1.0]).unwrap()
        );
    }

    #[test]
    fn mse_monte_carlo_floor() {
        let d = 3;
        let set = |seed| -> Vec<Vec<f64>> {
            let v = draws(10_000 * d, 0.0, seed);
            v.chunks(d).map(|c| c.to_vec()).collect()
        };
        let m = mse_of_means(&set(1), &set(2), &[1.0; 3]).unwrap();
        assert!(m < 10.0 * d as f64 / 1e4, "{m}");
    }

    #[test]
    fn rank_one_and_orthogonal() {
        let base: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let rows: Vec<Vec<f64>> = (0..8).map(|k| base.iter().map(|v| v * k as f64).collect()).collect();
        let sv = singular_spectrum(&rows).unwrap();
        for t in [1e-6, 1e-2, 0.5, 0.99] {
            assert_eq!(effective_dimension(&sv, t), 1);
        }
        // orthogonal rows span their full count; centering removes the mean row
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..9).map(|j| if i == j { 1.0 + i as f64 } else { 0.0 }).collect())
            .collect();
        assert_eq!(effective_dimension(&singular_values(&rows, false).unwrap(), 1e-2), 5);
        assert_eq!(effective_dimension(&singular_spectrum(&rows).unwrap(), 1e-2), 4);
    }

    #[test]
    fn spectrum_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..12).map(|_| n.sample(&mut rng)).collect()).collect();
        let sv = singular_spectrum(&rows).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| 7.5 * v).collect()).collect();
        assert_eq!(effective_dimension(&singular_spectrum(&rev).unwrap(), 0.3), effective_dimension(&sv, 0.3));
        assert_eq!(effective_dimension(&singular_spectrum(&scaled).unwrap(), 0.3), effective_dimension(&sv, 0.3));
        assert!(singular_spectrum(&[]).is_err());
    }

    #[test]
    fn ks_matches_brute_force() {
        let x = draws(500, 0.0, 4);
        let (d, _) = ks_statistic(&x, |v| normal_cdf(v, 0.0, 1.0)).unwrap();
        // direct sup over the empirical cdf evaluated just before and at each point
        let mut brute: f64 = 0.0;
        for &t in &x {
            let below = x.iter().filter(|v| **v < t).count() as f64 / 500.0;
            let at = x.iter().filter(|v| **v <= t).count() as f64 / 500.0;
            let f = normal_cdf(t, 0.0, 1.0);
            brute = brute.max((at - f).abs()).max((below - f).abs());
        }
        assert!((d - brute).abs() < 1e-12);
    }

    #[test]
    fn ks_constant_samples() {
        let (d, p) = ks_statistic(&vec![50.0; 200], |v| normal_cdf(v, 0.0, 1.0)).unwrap();
        assert!(d > 0.99 && p < 1e-10);
    }

    #[test]
    fn ks_p_values_calibrated() {
        let rejections = (0..200)
            .filter(|&seed| ks_statistic(&draws(200, 0.0, seed), |v| normal_cdf(v, 0.0, 1.0)).unwrap().1 < 0.05)
            .count();
        let frac = rejections as f64 / 200.0;
        assert!((0.02..=0.09).contains(&frac), "{frac}");
    }
}
