use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{convergence_js, GibbsConditional, SampleSet};
use crate::error::{Error, Result};
use crate::group::{make_proxy, GroupElement, Kernel, ShiftableData};
use crate::models::ForwardModel;
use crate::nde::{ConditionalEstimator, GnpeTransform, ProxyMode};

/// Chains per block of standardized contexts held in memory at once.
const BLOCK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IterationPolicy {
    /// Run exactly this many iterations.
    Fixed { iterations: usize },
    /// Stop at the first iteration whose JS statistic falls below the
    /// threshold.
    ConvergeJs { threshold: f64, max_iterations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnpeRunConfig {
    pub kernel: Kernel,
    pub modes: Vec<ProxyMode>,
    pub policy: IterationPolicy,
    /// Iterations discarded under a fixed policy.
    pub burn_in: usize,
    pub thinning: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for GnpeRunConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::gaussian(0.1),
            modes: vec![ProxyMode::Exact],
            policy: IterationPolicy::ConvergeJs {
                threshold: 0.01,
                max_iterations: 30,
            },
            burn_in: 10,
            thinning: 1,
            chains: 10_000,
            seed: 0,
        }
    }
}

impl GnpeRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.thinning == 0 {
            return Err(Error::config("sampler.thinning", "must be at least 1"));
        }
        if self.chains == 0 {
            return Err(Error::config("sampler.chains", "must be at least 1"));
        }
        match self.policy {
            IterationPolicy::Fixed { iterations } if iterations <= self.burn_in => Err(Error::config(
                "sampler.policy.iterations",
                "must exceed the burn-in count",
            )),
            IterationPolicy::ConvergeJs { threshold, .. } if !(threshold > 0.0) => {
                Err(Error::config("sampler.policy.threshold", "must be positive"))
            }
            IterationPolicy::ConvergeJs { max_iterations: 0, .. } => {
                Err(Error::config("sampler.policy.max_iterations", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Where the initial poses come from.
pub enum InitSource<'a> {
    /// A pose estimator `q_init(g | x)` evaluated on the raw observation.
    Estimator(&'a dyn ConditionalEstimator),
    /// Every chain starts at this pose.
    Fixed(Vec<f64>),
    /// Independent Gaussian draws per pose factor.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

/// N parallel `(θ, ĝ)` chains with their own random streams.
#[derive(Clone, Debug)]
pub struct GibbsChainEnsemble {
    thetas: Array2<f64>,
    proxies: Vec<GroupElement>,
    rngs: Vec<ChaCha8Rng>,
    pose_slots: Vec<usize>,
    history: Vec<Vec<Vec<f64>>>,
    init_mean: Vec<f64>,
    init_std: Vec<f64>,
    resets: usize,
}

impl GibbsChainEnsemble {
    pub fn chains(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn iteration(&self) -> usize {
        self.history.len() - 1
    }

    pub fn thetas(&self) -> &Array2<f64> {
        &self.thetas
    }

    /// Proxies drawn in the most recent iteration (the identity before the first).
    pub fn proxies(&self) -> &[GroupElement] {
        &self.proxies
    }

    /// Pose of every chain after iteration `j`; `j = 0` is the initialization.
    pub fn pose_snapshot(&self, j: usize) -> &[Vec<f64>] {
        &self.history[j]
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    fn poses(&self) -> Vec<Vec<f64>> {
        self.thetas
            .rows()
            .into_iter()
            .map(|r| self.pose_slots.iter().map(|&s| r[s]).collect())
            .collect()
    }

    fn draw_init(mean: &[f64], std: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        mean.iter()
            .zip(std)
            .map(|(m, s)| {
                if *s == 0.0 {
                    *m
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                }
            })
            .collect()
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Start `n` chains. Only the pose entries of the stored `θ` are meaningful
/// until the first iteration; the rest are zero.
pub fn init_chains(
    init: &InitSource<'_>,
    x: &[f64],
    model: &dyn ForwardModel,
    n: usize,
    seed: u64,
) -> Result<GibbsChainEnsemble> {
    if x.len() != model.data_len() {
        return Err(Error::Data(format!(
            "observation has {} values, model expects {}",
            x.len(),
            model.data_len()
        )));
    }
    let k = model.pose_slots().len();
    let (mean, std) = match init {
        InitSource::Estimator(q) => {
            if !q.is_trained() {
                return Err(Error::structural("pose initialization estimator has not been trained"));
            }
            if q.param_dim() != k || q.context_dim() != x.len() {
                return Err(Error::structural("pose estimator does not match the model"));
            }
            let ctx = ArrayView1::from(x).insert_axis(ndarray::Axis(0));
            let pred = q.predict(ctx, None)?;
            (pred.mean.row(0).to_vec(), pred.std.row(0).to_vec())
        }
        InitSource::Fixed(p) => (p.clone(), vec![0.0; p.len()]),
        InitSource::Gaussian { mean, std } => (mean.clone(), std.clone()),
    };
    if mean.len() != k || std.len() != k {
        return Err(Error::structural(format!("initial pose needs {k} components")));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|c| chain_rng(seed, c)).collect();
    let mut thetas = Array2::zeros((n, model.param_dim()));
    for (mut row, rng) in thetas.rows_mut().into_iter().zip(&mut rngs) {
        for (&slot, v) in model.pose_slots().iter().zip(GibbsChainEnsemble::draw_init(&mean, &std, rng)) {
            row[slot] = v;
        }
    }
    let mut ens = GibbsChainEnsemble {
        thetas,
        proxies: vec![GroupElement::identity(k); n],
        rngs,
        pose_slots: model.pose_slots().to_vec(),
        history: Vec::new(),
        init_mean: mean,
        init_std: std,
        resets: 0,
    };
    ens.history.push(ens.poses());
    Ok(ens)
}

/// One Gibbs sweep over every chain: blur the pose into a proxy, standardize
/// the observation with it, and redraw `θ` from `q`.
pub fn gibbs_iteration(
    ens: &mut GibbsChainEnsemble,
    q: &dyn GibbsConditional,
    transform: &GnpeTransform,
    x: &[f64],
) -> Result<()> {
    let d = ens.thetas.ncols();
    if q.output_dim() != d || transform.target_cols().len() != d {
        return Err(Error::structural("the conditional must produce full parameter vectors"));
    }
    let data = ShiftableData::new(x, transform.representation())?;
    let kernel = transform.kernel();
    let n = ens.chains();
    let mut resets = 0;
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let thetas = &ens.thetas;
        let proxies: Vec<GroupElement> = ens.rngs[start..end]
            .par_iter_mut()
            .enumerate()
            .map(|(i, rng)| {
                let theta = thetas.row(start + i);
                make_proxy(&transform.pose_of(theta.as_slice().expect("row-major"))?, kernel, rng)
            })
            .collect::<Result<_>>()?;
        let contexts: Vec<Vec<f64>> = proxies
            .par_iter()
            .map(|g| data.shifted(&g.inverse()))
            .collect::<Result<_>>()?;
        let mut ctx = Array2::zeros((end - start, x.len()));
        for (mut row, c) in ctx.rows_mut().into_iter().zip(&contexts) {
            row.assign(&ArrayView1::from(c));
        }
        drop(contexts);
        let pred = q.predict_given_proxy(ctx.view(), &proxies)?;
        let updates: Vec<(Vec<f64>, bool)> = ens.rngs[start..end]
            .par_iter_mut()
            .enumerate()
            .map(|(i, rng)| {
                let draw: Vec<f64> = pred
                    .mean
                    .row(i)
                    .iter()
                    .zip(pred.std.row(i))
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect();
                let theta = transform.reassemble(&draw, &proxies[i])?;
                if theta.iter().all(|v| v.is_finite()) {
                    Ok((theta, false))
                } else {
                    let mut fresh = vec![0.0; d];
                    let pose = GibbsChainEnsemble::draw_init(&ens.init_mean, &ens.init_std, rng);
                    for (&slot, v) in ens.pose_slots.iter().zip(pose) {
                        fresh[slot] = v;
                    }
                    Ok((fresh, true))
                }
            })
            .collect::<Result<_>>()?;
        for (i, (theta, reset)) in updates.into_iter().enumerate() {
            if reset {
                log::warn!("chain {} produced a non-finite draw; restarted from the initial distribution", start + i);
                resets += 1;
            }
            ens.thetas.row_mut(start + i).assign(&ArrayView1::from(&theta));
        }
        ens.proxies.splice(start..end, proxies);
    }
    ens.resets += resets;
    let poses = ens.poses();
    ens.history.push(poses);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnpeDiagnostics {
    pub iterations: usize,
    /// Entry `j − 1` compares the pose marginals after iterations `j − 1` and `j`.
    pub js_trace: Vec<f64>,
    pub converged: bool,
    pub chains: usize,
    pub kept: usize,
    pub resets: usize,
    pub config: GnpeRunConfig,
}

#[derive(Clone, Debug)]
pub struct GnpeRun {
    pub samples: SampleSet,
    pub diagnostics: GnpeDiagnostics,
}

/// Result of a GNPE run. A fixed iteration budget always completes as
/// `Converged`; the JS policy reports `NotConverged` with the last state.
#[derive(Clone, Debug)]
pub enum GnpeOutcome {
    Converged(GnpeRun),
    NotConverged(GnpeRun),
}

impl GnpeOutcome {
    pub fn is_converged(&self) -> bool {
        matches!(self, GnpeOutcome::Converged(_))
    }

    pub fn run(&self) -> &GnpeRun {
        match self {
            GnpeOutcome::Converged(r) | GnpeOutcome::NotConverged(r) => r,
        }
    }

    pub fn into_run(self) -> GnpeRun {
        match self {
            GnpeOutcome::Converged(r) | GnpeOutcome::NotConverged(r) => r,
        }
    }
}

struct Collector {
    theta: Vec<f64>,
    proxy: Vec<f64>,
    chain: Vec<usize>,
    iteration: Vec<usize>,
}

impl Collector {
    fn take(&mut self, ens: &GibbsChainEnsemble) {
        let it = ens.iteration();
        for c in 0..ens.chains() {
            self.theta.extend(ens.thetas.row(c).iter());
            self.proxy.extend(ens.proxies[c].shifts());
            self.chain.push(c);
            self.iteration.push(it);
        }
    }
}

/// Full GNPE inference for one observation.
pub fn run_gnpe(
    model: &dyn ForwardModel,
    x: &[f64],
    q: &dyn GibbsConditional,
    init: &InitSource<'_>,
    cfg: &GnpeRunConfig,
) -> Result<GnpeOutcome> {
    cfg.validate()?;
    let transform = GnpeTransform::for_model(model, cfg.kernel.clone(), cfg.modes.clone())?;
    let mut ens = init_chains(init, x, model, cfg.chains, cfg.seed)?;
    let mut js_trace = Vec::new();
    let mut kept = Collector {
        theta: Vec::new(),
        proxy: Vec::new(),
        chain: Vec::new(),
        iteration: Vec::new(),
    };
    let converged = match cfg.policy {
        IterationPolicy::Fixed { iterations } => {
            for j in 1..=iterations {
                gibbs_iteration(&mut ens, q, &transform, x)?;
                js_trace.push(convergence_js(ens.pose_snapshot(j - 1), ens.pose_snapshot(j)));
                if j > cfg.burn_in && (j - cfg.burn_in) % cfg.thinning == 0 {
                    kept.take(&ens);
                }
            }
            true
        }
        IterationPolicy::ConvergeJs {
            threshold,
            max_iterations,
        } => {
            let mut converged = false;
            for j in 1..=max_iterations {
                gibbs_iteration(&mut ens, q, &transform, x)?;
                let js = convergence_js(ens.pose_snapshot(j - 1), ens.pose_snapshot(j));
                js_trace.push(js);
                log::debug!("iteration {j}: JS {js:.5}");
                if js < threshold {
                    converged = true;
                    break;
                }
            }
            kept.take(&ens);
            converged
        }
    };
    let k = model.pose_slots().len();
    let rows = kept.chain.len();
    let samples = SampleSet {
        param_names: model.param_names(),
        proxy_names: model
            .pose_slots()
            .iter()
            .map(|&s| format!("proxy_{}", model.parameters()[s].name))
            .collect(),
        theta: Array2::from_shape_vec((rows, model.param_dim()), kept.theta).expect("sample shape"),
        proxy: Array2::from_shape_vec((rows, k), kept.proxy).expect("proxy shape"),
        chain: kept.chain,
        iteration: kept.iteration,
    };
    let run = GnpeRun {
        diagnostics: GnpeDiagnostics {
            iterations: js_trace.len(),
            js_trace,
            converged,
            chains: cfg.chains,
            kept: rows,
            resets: ens.resets(),
            config: cfg.clone(),
        },
        samples,
    };
    Ok(if converged {
        GnpeOutcome::Converged(run)
    } else {
        GnpeOutcome::NotConverged(run)
    })
}
