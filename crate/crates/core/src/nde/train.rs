use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::TrainingDataset;
use super::{Batch, ConditionalGaussianEstimator, GnpeTransform, Standardization};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};

/// Rows per gradient shard. Fixed so results do not depend on the thread count.
const SHARD: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seeds shuffling and proxy draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 128,
            max_epochs: 500,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("train.adam.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::config("train.adam", "moment decays must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }
}

/// Targets, contexts and proxies for a set of rows, in physical units.
fn materialize(
    data: &TrainingDataset,
    rows: std::ops::Range<usize>,
    transform: Option<&GnpeTransform>,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let Some(t) = transform else {
        return Ok(Batch {
            targets: data.thetas.slice(ndarray::s![rows.clone(), ..]).to_owned(),
            contexts: data.xs.slice(ndarray::s![rows, ..]).to_owned(),
            proxies: None,
        });
    };
    // kernel draws are sequential so the result is independent of scheduling
    let proxies: Vec<_> = rows
        .clone()
        .map(|i| {
            let theta = data.theta(i).to_vec();
            crate::group::make_proxy(&t.pose_of(&theta)?, t.kernel(), rng)
        })
        .collect::<Result<_>>()?;
    let examples: Vec<_> = rows
        .clone()
        .into_par_iter()
        .zip(proxies.par_iter())
        .map(|(i, g)| t.apply_with_proxy(&data.theta(i).to_vec(), &data.x(i).to_vec(), g))
        .collect::<Result<_>>()?;
    let n = examples.len();
    let stack = |f: &dyn Fn(&super::TransformedExample) -> &Vec<f64>, w: usize| {
        let mut a = Array2::zeros((n, w));
        for (mut row, e) in a.rows_mut().into_iter().zip(&examples) {
            row.assign(&ndarray::ArrayView1::from(f(e)));
        }
        a
    };
    let targets = stack(&|e| &e.target, t.target_cols().len());
    let contexts = stack(&|e| &e.context, data.xs.ncols());
    let proxies = (t.proxy_dim() > 0).then(|| stack(&|e| &e.proxy, t.proxy_dim()));
    Ok(Batch {
        targets,
        contexts,
        proxies,
    })
}

fn select(batch: &Batch, idx: &[usize]) -> Batch {
    Batch {
        targets: batch.targets.select(Axis(0), idx),
        contexts: batch.contexts.select(Axis(0), idx),
        proxies: batch.proxies.as_ref().map(|p| p.select(Axis(0), idx)),
    }
}

fn gradient(est: &ConditionalGaussianEstimator, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    let idx: Vec<usize> = (0..n).collect();
    let parts: Vec<(f64, Vec<f64>, usize)> = idx
        .par_chunks(SHARD)
        .map(|c| est.backprop(&select(batch, c)).map(|(l, g)| (l, g, c.len())))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = vec![0.0; est.num_params()];
    for (l, g, m) in parts {
        let w = m as f64 / n as f64;
        loss += w * l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += w * b;
        }
    }
    Ok((loss, grads))
}

/// Maximum-likelihood training with Adam and early stopping on the
/// validation loss. With a transform, training proxies are redrawn every
/// epoch and validation proxies are drawn once. Returns with the weights of
/// the best validation epoch installed.
pub fn train(
    est: &mut ConditionalGaussianEstimator,
    data: &TrainingDataset,
    transform: Option<&GnpeTransform>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let spec = est.spec();
    let target_dim = transform.map_or(data.thetas.ncols(), |t| t.target_cols().len());
    if spec.param_dim != target_dim || spec.context_dim != data.xs.ncols() {
        return Err(Error::structural("estimator does not match the dataset"));
    }
    if spec.proxy_dim != transform.map_or(0, |t| t.proxy_dim()) {
        return Err(Error::structural("estimator proxy width does not match the transform"));
    }
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(u64::MAX);
    let val = materialize(data, data.val_indices(), transform, &mut val_rng)?;
    let epoch_rng = |epoch: usize| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(epoch as u64);
        r
    };
    let mut train_set = materialize(data, data.train_indices(), transform, &mut epoch_rng(0))?;
    est.set_standardization(
        Standardization::fit_pooled(train_set.contexts.view(), spec.context_channels),
        match &train_set.proxies {
            Some(p) => Standardization::fit(p.view()),
            None => Standardization::identity(0),
        },
        Standardization::fit(train_set.targets.view()),
    )?;

    let mut adam = Adam::new(cfg.adam.clone(), est.num_params());
    let mut params = est.params().to_vec();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_finite = None;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = epoch_rng(epoch);
        if epoch > 1 && transform.is_some() {
            train_set = materialize(data, data.train_indices(), transform, &mut rng)?;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = gradient(est, &select(&train_set, chunk))?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    last_finite,
                    message: "non-finite training loss".into(),
                });
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut params, &grads);
            est.set_params(params.clone())?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = est.batch_loss(&val).map_err(|_| Error::Training {
            epoch,
            last_finite,
            message: "non-finite validation output".into(),
        })?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                last_finite,
                message: "non-finite validation loss".into(),
            });
        }
        last_finite = Some(epoch);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    est.set_params(best.2)?;
    est.mark_trained(true);
    Ok(TrainReport {
        history,
        best_epoch: best.1,
        best_val_loss: best.0,
    })
}
