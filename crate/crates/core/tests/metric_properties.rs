use gnpe::metrics::{c2st, mse_of_means, C2stConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_1d(n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            vec![z + shift]
        })
        .collect()
}

#[test]
fn c2st_is_symmetric() {
    let cfg = C2stConfig::default();
    for shift in [0.0, 1.0] {
        let a = normal_1d(2000, 0.0, 1);
        let b = normal_1d(2000, shift, 2);
        let ab = c2st(&a, &b, &cfg).unwrap();
        let ba = c2st(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 0.02, "shift {shift}: {ab} vs {ba}");
    }
}

#[test]
fn c2st_grows_with_separation() {
    let cfg = C2stConfig::default();
    let a = normal_1d(2000, 0.0, 3);
    let scores: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .map(|s| c2st(&a, &normal_1d(2000, *s, 4), &cfg).unwrap())
        .collect();
    for w in scores.windows(2) {
        assert!(w[1] > w[0] - 0.02, "{scores:?}");
    }
    // Bayes accuracy of two unit Gaussians `d` apart is Φ(d/2).
    assert!((scores[3] - 0.8413).abs() < 0.03, "{scores:?}");
}

#[test]
fn mse_unchanged_by_common_shift() {
    let a = vec![vec![0.5, -1.0], vec![1.5, 2.0]];
    let b = vec![vec![-0.5, 0.25]];
    let shift = |s: &[Vec<f64>]| -> Vec<Vec<f64>> { s.iter().map(|r| vec![r[0] + 4.0, r[1] - 8.0]).collect() };
    let before = mse_of_means(&a, &b, &[1.0, 2.0]).unwrap();
    assert_eq!(mse_of_means(&shift(&a), &shift(&b), &[1.0, 2.0]).unwrap(), before);
}
