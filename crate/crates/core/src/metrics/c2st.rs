use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nde::Standardization;
use crate::nn::{Adam, AdamConfig, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct C2stConfig {
    /// Hidden widths as multiples of the sample dimension.
    pub hidden_multiples: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the pooled samples used for training.
    pub train_fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for C2stConfig {
    fn default() -> Self {
        Self {
            hidden_multiples: vec![10, 10],
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            train_fraction: 0.5,
            repetitions: 5,
            seed: 0,
        }
    }
}

impl C2stConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("c2st.train_fraction", "must lie in (0, 1)"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("c2st.repetitions", "must be at least 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("c2st.epochs", "epochs and batch size must be positive"));
        }
        Ok(())
    }
}

fn to_array(rows: &[Vec<f64>], d: usize) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::structural("samples have inconsistent dimensions"));
    }
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("row lengths checked"))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One train/test split: held-out accuracy of an MLP classifier.
fn accuracy_once(x: &Array2<f64>, y: &[f64], cfg: &C2stConfig, seed: u64) -> f64 {
    let n = x.nrows();
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = idx.split_at(n_train);
    let widths: Vec<usize> = cfg.hidden_multiples.iter().map(|m| m * d).chain([1]).collect();
    let net = Network::mlp(d, &widths, false).expect("valid widths");
    let mut params = net.init_params(seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        params.len(),
    );
    let mut order = train.to_vec();
    let mut grads = vec![0.0; params.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let trace = net.forward(&params, xb);
            let m = batch.len() as f64;
            let grad_out = Array2::from_shape_fn((batch.len(), 1), |(i, _)| {
                (sigmoid(trace.output()[[i, 0]]) - y[batch[i]]) / m
            });
            grads.iter_mut().for_each(|g| *g = 0.0);
            net.backward(&params, &trace, grad_out, &mut grads, false);
            adam.step(&mut params, &grads);
        }
    }
    let logits = net.forward(&params, x.select(Axis(0), test));
    let correct = test
        .iter()
        .zip(logits.output().column(0))
        .filter(|(&i, &z)| (z > 0.0) == (y[i] > 0.5))
        .count();
    correct as f64 / test.len() as f64
}

/// Classifier two-sample test: mean held-out accuracy of a classifier
/// separating `p` from `q`, over fresh splits. 0.5 means indistinguishable.
pub fn c2st(p: &[Vec<f64>], q: &[Vec<f64>], cfg: &C2stConfig) -> Result<f64> {
    cfg.validate()?;
    let d = p.first().map_or(0, |r| r.len());
    if d == 0 || q.first().map_or(0, |r| r.len()) != d {
        return Err(Error::structural("sample sets must share a non-zero dimension"));
    }
    let (a, b) = (to_array(p, d)?, to_array(q, d)?);
    let mut x = ndarray::concatenate![Axis(0), a, b];
    let z = Standardization::fit(x.view());
    x = z.apply(x.view());
    let mut y = vec![0.0; a.nrows()];
    y.extend(std::iter::repeat(1.0).take(b.nrows()));
    let scores: Vec<f64> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| accuracy_once(&x, &y, cfg, cfg.seed.wrapping_add(r as u64)))
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn normal_set(n: usize, d: usize, mu: f64, seed: u64) -> Vec<Vec<f64>> {
        let dist = Normal::new(mu, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| dist.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn separable_sets_score_near_one() {
        let cfg = C2stConfig {
            repetitions: 2,
            ..Default::default()
        };
        let s = c2st(&normal_set(1000, 1, 0.0, 1), &normal_set(1000, 1, 10.0, 2), &cfg).unwrap();
        assert!(s > 0.99, "{s}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cfg = C2stConfig::default();
        assert!(c2st(&normal_set(10, 1, 0.0, 1), &normal_set(10, 2, 0.0, 2), &cfg).is_err());
    }

    #[test]
    fn bad_split_rejected() {
        let cfg = C2stConfig {
            train_fraction: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

