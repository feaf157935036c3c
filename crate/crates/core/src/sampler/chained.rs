use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{GibbsConditional, SampleSet};
use crate::error::{Error, Result};
use crate::group::{GroupElement, ShiftableData};
use crate::models::ForwardModel;
use crate::nde::{ConditionalEstimator, GnpeTransform};

const BLOCK: usize = 1024;

fn gaussian_draw(mean: ArrayView1<f64>, std: ArrayView1<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .zip(std)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s * z
        })
        .collect()
}

/// Single-pass `p(θ|x) = p(φ | x, λ) p(λ | x)`: draw a pose `λ` from
/// `q_pose`, standardize `x` with it, then draw the remaining parameters from
/// `q_rest`. `transform` names the pose slots and the columns `q_rest`
/// produces. Sample `i` uses stream `i` of `seed`.
pub fn chained_npe_sample(
    model: &dyn ForwardModel,
    q_pose: &dyn ConditionalEstimator,
    q_rest: &dyn GibbsConditional,
    transform: &GnpeTransform,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    let slots = model.pose_slots();
    let k = slots.len();
    if q_pose.param_dim() != k {
        return Err(Error::structural("pose estimator must output one value per pose factor"));
    }
    if q_rest.output_dim() != transform.target_cols().len() {
        return Err(Error::structural("conditional does not match the transform's target columns"));
    }
    let pose_pred = q_pose.predict(ArrayView1::from(x).insert_axis(Axis(0)), None)?;
    let data = ShiftableData::new(x, transform.representation())?;
    let d = model.param_dim();
    let mut theta = Array2::zeros((n, d));
    let mut proxy = Array2::zeros((n, k));
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let mut rngs: Vec<ChaCha8Rng> = (start..end)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let lambdas: Vec<GroupElement> = rngs
            .iter_mut()
            .map(|r| GroupElement::new(gaussian_draw(pose_pred.mean.row(0), pose_pred.std.row(0), r)))
            .collect();
        let contexts: Vec<Vec<f64>> = lambdas
            .par_iter()
            .map(|l| data.shifted(&l.inverse()))
            .collect::<Result<_>>()?;
        let mut ctx = Array2::zeros((end - start, x.len()));
        for (mut row, c) in ctx.rows_mut().into_iter().zip(&contexts) {
            row.assign(&ArrayView1::from(c));
        }
        let pred = q_rest.predict_given_proxy(ctx.view(), &lambdas)?;
        for (i, rng) in rngs.iter_mut().enumerate() {
            let phi = gaussian_draw(pred.mean.row(i), pred.std.row(i), rng);
            let mut row = theta.row_mut(start + i);
            for (&c, v) in transform.target_cols().iter().zip(phi) {
                row[c] = v;
            }
            for (j, (&s, l)) in slots.iter().zip(lambdas[i].shifts()).enumerate() {
                row[s] = *l;
                proxy[[start + i, j]] = *l;
            }
        }
    }
    Ok(SampleSet {
        param_names: model.param_names(),
        proxy_names: slots.iter().map(|&s| format!("pose_{}", model.parameters()[s].name)).collect(),
        theta,
        proxy,
        chain: (0..n).collect(),
        iteration: vec![0; n],
    })
}
