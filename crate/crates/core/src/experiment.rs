//! Experiment building blocks shared by the command-line tool and the
//! acceptance suite: per-method training and sampling, evaluation against
//! oracle posteriors, and the figure studies.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitConfig, MetricKind, Method};
use crate::error::{Error, Result};
use crate::group::Kernel;
use crate::metrics::{c2st, effective_dimension, mse_of_means, singular_spectrum, MetricRecord};
use crate::models::{gaussian_toy_posterior, sample_interior, ForwardModel, GaussianPosterior, GaussianToy};
use crate::nde::{
    generate_npe_dataset, train, ConditionalEstimator, ConditionalGaussianEstimator, EmbeddingSpec, EstimatorSpec,
    GnpeTransform, ProxyMode, TrainReport, TrainingDataset,
};
use crate::sampler::{
    chained_npe_sample, run_gnpe, GnpeDiagnostics, GnpeRunConfig, InitSource, IterationPolicy, NeuralConditional,
    SampleSet, ToyConditionalOracle,
};

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An observed data vector, with its generating parameters and ground-truth
/// posterior when it was simulated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub theta: Option<Vec<f64>>,
    pub theta_center: Option<Vec<f64>>,
    pub x: Vec<f64>,
    pub oracle: Option<GaussianPosterior>,
}

/// Simulate observation `index` of `seed`. Parameters are drawn at least
/// `margin` posterior widths inside the prior box unless given.
pub fn simulate_observation(
    model: &dyn ForwardModel,
    theta: Option<&[f64]>,
    margin: f64,
    seed: u64,
    index: usize,
) -> Result<Observation> {
    let mut rng = stream_rng(seed, index as u64);
    let theta = match theta {
        Some(t) => t.to_vec(),
        None => sample_interior(model, &model.posterior_scale(), margin, &mut rng),
    };
    let sim = model.simulate(&theta, &mut rng)?;
    let oracle = model.oracle_posterior(&sim);
    Ok(Observation {
        theta: Some(sim.theta),
        theta_center: sim.theta_center,
        x: sim.x,
        oracle,
    })
}

/// The observation described by the `[observation]` section.
pub fn configured_observation(model: &dyn ForwardModel, cfg: &ExperimentConfig) -> Result<Observation> {
    let o = &cfg.observation;
    if let Some(x) = &o.x {
        return Ok(Observation {
            theta: None,
            theta_center: None,
            x: x.clone(),
            oracle: None,
        });
    }
    simulate_observation(model, o.theta.as_deref(), o.margin, cfg.seeds.observation, o.index)
}

/// Estimators of one method, keyed by role.
#[derive(Clone, Debug)]
pub struct Trained {
    pub method: Method,
    pub estimators: BTreeMap<String, ConditionalGaussianEstimator>,
    pub reports: BTreeMap<String, TrainReport>,
}

impl Trained {
    pub fn get(&self, role: &str) -> Result<&ConditionalGaussianEstimator> {
        self.estimators
            .get(role)
            .ok_or_else(|| Error::Structural(format!("{} needs a `{role}` estimator", self.method)))
    }
}

/// Estimator roles a method trains, in training order.
pub fn roles(method: Method, cfg: &ExperimentConfig) -> Vec<&'static str> {
    match method {
        Method::Npe | Method::NpeCnn => vec!["q"],
        Method::Gnpe => match cfg.init {
            InitConfig::Estimator => vec!["q", "q_init"],
            InitConfig::Fixed { .. } => vec!["q"],
        },
        Method::ChainedNpe => vec!["q_pose", "q_rest"],
    }
}

/// Transform used to train and sample GNPE.
pub fn gnpe_transform(model: &dyn ForwardModel, cfg: &ExperimentConfig) -> Result<GnpeTransform> {
    GnpeTransform::for_model(model, cfg.sampler.kernel.clone(), cfg.sampler.modes.clone())
}

/// Transform of the chained baseline's second stage: exact pose alignment,
/// pose passed as a proxy, non-pose parameters as targets.
pub fn chained_transform(model: &dyn ForwardModel) -> Result<GnpeTransform> {
    let k = model.pose_slots().len();
    let rest: Vec<usize> = (0..model.param_dim()).filter(|i| !model.pose_slots().contains(i)).collect();
    Ok(GnpeTransform::for_model(model, Kernel::Delta { factors: k }, vec![ProxyMode::Approximate; k])?
        .with_target_cols(rest))
}

fn estimator_spec(model: &dyn ForwardModel, embedding: EmbeddingSpec, param_dim: usize, proxy_dim: usize) -> EstimatorSpec {
    EstimatorSpec {
        embedding,
        context_dim: model.data_len(),
        context_channels: model.representation().grid.channels,
        param_dim,
        proxy_dim,
    }
}

/// Train every estimator `method` needs on `data`.
pub fn train_method(
    model: &dyn ForwardModel,
    data: &TrainingDataset,
    cfg: &ExperimentConfig,
    method: Method,
) -> Result<Trained> {
    let embedding = cfg.estimator.embedding_for(method, model);
    let seed = cfg.train.seed;
    let mut out = Trained {
        method,
        estimators: BTreeMap::new(),
        reports: BTreeMap::new(),
    };
    let mut fit = |role: &str, data: &TrainingDataset, transform: Option<&GnpeTransform>| -> Result<()> {
        let (param_dim, proxy_dim) = match transform {
            Some(t) => (t.target_cols().len(), t.proxy_dim()),
            None => (data.thetas.ncols(), 0),
        };
        let mut est = ConditionalGaussianEstimator::new(
            estimator_spec(model, embedding.clone(), param_dim, proxy_dim),
            seed,
        )?;
        log::info!("training {method}/{role} ({} weights)", est.num_params());
        let report = train(&mut est, data, transform, &cfg.train)?;
        log::info!(
            "{method}/{role}: best validation loss {:.4} at epoch {}",
            report.best_val_loss,
            report.best_epoch
        );
        out.estimators.insert(role.to_string(), est);
        out.reports.insert(role.to_string(), report);
        Ok(())
    };
    for role in roles(method, cfg) {
        match role {
            "q" if method == Method::Gnpe => fit(role, data, Some(&gnpe_transform(model, cfg)?))?,
            "q" => fit(role, data, None)?,
            "q_init" | "q_pose" => fit(role, &data.select_targets(model.pose_slots())?, None)?,
            "q_rest" => fit(role, data, Some(&chained_transform(model)?))?,
            _ => unreachable!("roles are fixed"),
        }
    }
    Ok(out)
}

/// Posterior samples of one method for one observation.
#[derive(Clone, Debug)]
pub struct Inference {
    pub samples: SampleSet,
    pub diagnostics: Option<GnpeDiagnostics>,
    pub converged: bool,
}

/// `n` independent draws from an estimator of the full posterior.
pub fn sample_npe(
    model: &dyn ForwardModel,
    q: &dyn ConditionalEstimator,
    x: &[f64],
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    let pred = q.predict(ArrayView1::from(x).insert_axis(Axis(0)), None)?;
    let mut rng = stream_rng(seed, 0);
    let mut theta = Array2::zeros((n, model.param_dim()));
    for mut row in theta.rows_mut() {
        row.assign(&ArrayView1::from(&pred.sample_row(0, &mut rng)));
    }
    Ok(SampleSet {
        param_names: model.param_names(),
        proxy_names: Vec::new(),
        theta,
        proxy: Array2::zeros((n, 0)),
        chain: (0..n).collect(),
        iteration: vec![0; n],
    })
}

/// Run the sampling path of `trained.method` on `x`; `cfg.sampler.chains`
/// samples are returned.
pub fn infer_method(model: &dyn ForwardModel, trained: &Trained, x: &[f64], cfg: &ExperimentConfig) -> Result<Inference> {
    let n = cfg.sampler.chains;
    let seed = cfg.sampler.seed;
    match trained.method {
        Method::Npe | Method::NpeCnn => Ok(Inference {
            samples: sample_npe(model, trained.get("q")?, x, n, seed)?,
            diagnostics: None,
            converged: true,
        }),
        Method::Gnpe => {
            let transform = gnpe_transform(model, cfg)?;
            let q = NeuralConditional::new(trained.get("q")?, &transform)?;
            let init = match &cfg.init {
                InitConfig::Estimator => InitSource::Estimator(trained.get("q_init")?),
                InitConfig::Fixed { pose } => InitSource::Fixed(pose.clone()),
            };
            let outcome = run_gnpe(model, x, &q, &init, &cfg.sampler)?;
            let converged = outcome.is_converged();
            if !converged {
                log::warn!("GNPE did not meet the convergence criterion");
            }
            let run = outcome.into_run();
            Ok(Inference {
                samples: run.samples,
                diagnostics: Some(run.diagnostics),
                converged,
            })
        }
        Method::ChainedNpe => {
            let transform = chained_transform(model)?;
            let q_rest = NeuralConditional::new(trained.get("q_rest")?, &transform)?;
            Ok(Inference {
                samples: chained_npe_sample(model, trained.get("q_pose")?, &q_rest, &transform, x, n, seed)?,
                diagnostics: None,
                converged: true,
            })
        }
    }
}

/// Reference draws from an oracle posterior.
pub fn oracle_samples(oracle: &GaussianPosterior, n: usize, seed: u64, stream: u64) -> Vec<Vec<f64>> {
    oracle.sample_n(n, &mut stream_rng(seed, stream))
}

/// The configured metric suite, comparing `samples` with oracle draws.
pub fn evaluate_samples(
    model: &dyn ForwardModel,
    samples: &SampleSet,
    oracle: &GaussianPosterior,
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricRecord>> {
    if samples.is_empty() {
        return Err(Error::structural("no samples to evaluate"));
    }
    let seed = cfg.seeds.evaluation;
    let rows = samples.theta_rows();
    let reference = oracle_samples(oracle, rows.len(), seed, 0);
    cfg.metrics
        .suite
        .iter()
        .map(|m| {
            Ok(match m {
                MetricKind::C2st => MetricRecord {
                    metric: "c2st".into(),
                    value: c2st(&rows, &reference, &cfg.metrics.c2st)?,
                    seed,
                    config: serde_json::to_value(&cfg.metrics.c2st)?,
                },
                MetricKind::Mse => MetricRecord {
                    metric: "mse_of_means".into(),
                    value: mse_of_means(&rows, &reference, &model.prior_stds())?,
                    seed,
                    config: serde_json::json!({ "prior_stds": model.prior_stds() }),
                },
            })
        })
        .collect()
}

/// One cell of the method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig3bRow {
    pub method: Method,
    pub seed: u64,
    pub simulation: usize,
    pub c2st: f64,
    pub converged: bool,
    /// Gibbs iterations, 0 for single-pass methods.
    pub iterations: usize,
}

/// Shared inputs of the method comparison: fixed observations and their
/// oracle reference draws.
#[derive(Clone, Debug)]
pub struct Fig3bSetup {
    pub observations: Vec<Observation>,
    pub references: Vec<Vec<Vec<f64>>>,
}

impl Fig3bSetup {
    pub fn new(model: &dyn ForwardModel, cfg: &ExperimentConfig) -> Result<Self> {
        let observations: Vec<Observation> = (0..cfg.reproduce.simulations)
            .map(|i| simulate_observation(model, None, cfg.observation.margin, cfg.seeds.observation, i))
            .collect::<Result<_>>()?;
        let references = observations
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let oracle = o
                    .oracle
                    .as_ref()
                    .ok_or_else(|| Error::config("model", "fig3b needs a model with an oracle posterior"))?;
                Ok(oracle_samples(oracle, cfg.sampler.chains, cfg.seeds.evaluation, i as u64))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            observations,
            references,
        })
    }
}

/// Config of seed `s` in the comparison: every random stream offset by `s`.
pub fn seed_config(cfg: &ExperimentConfig, s: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.seed = cfg.seeds.training + s;
    c.sampler.seed = cfg.seeds.sampling + s;
    c.metrics.c2st.seed = cfg.seeds.evaluation + s;
    c
}

/// One seed of the comparison: a fresh dataset, every method trained on it
/// and scored on every observation. The trained estimators are returned too.
pub fn fig3b_seed(
    model: &dyn ForwardModel,
    cfg: &ExperimentConfig,
    setup: &Fig3bSetup,
    s: u64,
) -> Result<(Vec<Fig3bRow>, Vec<Trained>)> {
    let data = generate_npe_dataset(
        model,
        cfg.simulation.count,
        cfg.simulation.validation_fraction,
        cfg.seeds.simulation + s,
    )?;
    let c = seed_config(cfg, s);
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &method in &cfg.reproduce.methods {
        let trained = train_method(model, &data, &c, method)?;
        for (i, obs) in setup.observations.iter().enumerate() {
            let inf = infer_method(model, &trained, &obs.x, &c)?;
            let score = c2st(&inf.samples.theta_rows(), &setup.references[i], &c.metrics.c2st)?;
            log::info!("seed {s} {method} simulation {i}: c2st {score:.4}");
            rows.push(Fig3bRow {
                method,
                seed: s,
                simulation: i,
                c2st: score,
                converged: inf.converged,
                iterations: inf.diagnostics.as_ref().map_or(0, |d| d.iterations),
            });
        }
        models.push(trained);
    }
    Ok((rows, models))
}

/// Method comparison at a fixed simulation budget: every method in
/// `reproduce.methods` is trained once per seed (fresh dataset and weights)
/// and scored by c2st on `reproduce.simulations` observations. Seeds run in
/// parallel; rows come back ordered by seed, method and simulation.
pub fn fig3b(cfg: &ExperimentConfig) -> Result<Vec<Fig3bRow>> {
    let model = cfg.model.build()?;
    let model = model.as_ref();
    let setup = Fig3bSetup::new(model, cfg)?;
    let per_seed: Vec<Vec<Fig3bRow>> = (0..cfg.reproduce.seeds as u64)
        .into_par_iter()
        .map(|s| fig3b_seed(model, cfg, &setup, s).map(|(rows, _)| rows))
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Mean c2st of each method over a [`fig3b`] table.
pub fn fig3b_means(rows: &[Fig3bRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.method.to_string()).or_default();
        e.0 += r.c2st;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Singular spectra of raw and pose-standardized simulation batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig3d {
    pub raw: Vec<f64>,
    pub standardized: Vec<f64>,
    pub threshold: f64,
    pub raw_dimension: usize,
    pub standardized_dimension: usize,
}

/// Simulate `reproduce.spectrum_batch` prior draws and compare the spectra of
/// the data before and after standardizing each with a blurred pose proxy.
pub fn fig3d(cfg: &ExperimentConfig) -> Result<Fig3d> {
    let model = cfg.model.build()?;
    let transform = gnpe_transform(model.as_ref(), cfg)?;
    let n = cfg.reproduce.spectrum_batch;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seeds.simulation, i as u64);
            let theta = model.sample_prior(&mut rng);
            let sim = model.simulate(&theta, &mut rng)?;
            let standardized = transform.apply(&sim.theta, &sim.x, &mut rng)?.context;
            Ok((sim.x, standardized))
        })
        .collect::<Result<_>>()?;
    let (raw_rows, std_rows): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let raw = singular_spectrum(&raw_rows)?;
    let standardized = singular_spectrum(&std_rows)?;
    let threshold = cfg.metrics.effective_dimension_threshold;
    Ok(Fig3d {
        raw_dimension: effective_dimension(&raw, threshold),
        standardized_dimension: effective_dimension(&standardized, threshold),
        raw,
        standardized,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub center: f64,
    pub gnpe_density: f64,
    pub analytic_density: f64,
}

/// GNPE samples for the Gaussian toy with the analytic conditional, against
/// the analytic posterior.
#[derive(Clone, Debug)]
pub struct AppB {
    pub x: f64,
    pub samples: Vec<f64>,
    pub posterior: GaussianPosterior,
    pub histogram: Vec<HistogramRow>,
    pub diagnostics: GnpeDiagnostics,
}

/// Gaussian toy at `reproduce.appb_x` with `κ = N(0, 1)`, every chain
/// starting at `τ = 0`, and the analytic `p(τ'|x')` as the conditional.
/// After `sampler.burn_in` iterations one more sweep supplies the
/// `sampler.chains` kept samples.
pub fn appb(cfg: &ExperimentConfig) -> Result<AppB> {
    let x = cfg.reproduce.appb_x;
    let kernel = Kernel::gaussian(1.0);
    let q = ToyConditionalOracle::new(&kernel)?;
    let run_cfg = GnpeRunConfig {
        kernel,
        modes: vec![ProxyMode::Exact],
        policy: IterationPolicy::Fixed {
            iterations: cfg.sampler.burn_in + 1,
        },
        burn_in: cfg.sampler.burn_in,
        thinning: 1,
        chains: cfg.sampler.chains,
        seed: cfg.seeds.sampling,
    };
    let run = run_gnpe(&GaussianToy::new(), &[x], &q, &InitSource::Fixed(vec![0.0]), &run_cfg)?.into_run();
    let samples = run.samples.column("tau").expect("toy parameter");
    let posterior = gaussian_toy_posterior(x);
    let histogram = histogram(&samples, &posterior, cfg.reproduce.histogram_bins);
    Ok(AppB {
        x,
        samples,
        posterior,
        histogram,
        diagnostics: run.diagnostics,
    })
}

/// Density histogram over five posterior widths either side of the mean.
fn histogram(samples: &[f64], posterior: &GaussianPosterior, bins: usize) -> Vec<HistogramRow> {
    let (m, s) = (posterior.mean[0], posterior.std()[0]);
    let (lo, hi) = (m - 5.0 * s, m + 5.0 * s);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in samples {
        if (lo..hi).contains(&v) {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let center = lo + (b as f64 + 0.5) * width;
            HistogramRow {
                center,
                gnpe_density: c as f64 / (n * width),
                analytic_density: posterior.log_density(&[center]).exp(),
            }
        })
        .collect()
}
