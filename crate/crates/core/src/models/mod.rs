//! Forward models: priors, simulators, pose definitions and ground-truth
//! posterior oracles.

mod gaussian_toy;
mod multichannel;
mod oscillator;

pub use gaussian_toy::{
    gaussian_toy_posterior, gaussian_toy_simulate, likelihood_density, GaussianToy,
    TOY_PRIOR_MEAN, TOY_PRIOR_STD,
};
pub use multichannel::{MultichannelModel, MultichannelParams};
pub use oscillator::{oscillator_solution, OscillatorModel, OscillatorParams};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::DataRepresentation;

/// Marginal prior of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl Prior {
    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        match *self {
            Prior::Uniform { low, high } => rng.random_range(low..high),
            Prior::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match *self {
            Prior::Uniform { low, high } => (low..=high).contains(&v),
            Prior::Normal { .. } => v.is_finite(),
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            Prior::Uniform { low, high } => (high - low) / 12f64.sqrt(),
            Prior::Normal { std, .. } => std,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = match *self {
            Prior::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Prior::Normal { mean, std } => mean.is_finite() && std.is_finite() && std > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(field, format!("invalid prior {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub unit: String,
    pub prior: Prior,
}

impl ParameterSpec {
    pub fn new(name: &str, unit: &str, prior: Prior) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            prior,
        }
    }
}

/// A diagonal Gaussian over parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::structural("mean and variance lengths differ"));
        }
        if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("posterior variance must be strictly positive".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(theta)
            .map(|((m, v), t)| -0.5 * ((t - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
            .sum()
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// One simulator output. `theta_center` is the perturbed parameter vector the
/// data were generated from, for models whose ground-truth posterior is
/// centred there.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub theta: Vec<f64>,
    pub theta_center: Option<Vec<f64>>,
    pub x: Vec<f64>,
}

/// Simulator contract shared by all models.
pub trait ForwardModel: Send + Sync {
    fn name(&self) -> &'static str;

    fn parameters(&self) -> &[ParameterSpec];

    /// Indices of the parameters that carry the pose, one per group factor.
    fn pose_slots(&self) -> &[usize];

    /// Representation under which the posterior is (approximately) equivariant.
    fn representation(&self) -> &DataRepresentation;

    /// Representation under which the likelihood is equivariant.
    fn likelihood_representation(&self) -> &DataRepresentation {
        self.representation()
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Simulation>;

    /// Ground-truth posterior for a simulation, where one is available.
    fn oracle_posterior(&self, sim: &Simulation) -> Option<GaussianPosterior>;

    fn param_dim(&self) -> usize {
        self.parameters().len()
    }

    fn data_len(&self) -> usize {
        self.representation().data_len()
    }

    fn param_names(&self) -> Vec<String> {
        self.parameters().iter().map(|p| p.name.clone()).collect()
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.parameters().iter().map(|p| p.prior.sample(rng)).collect()
    }

    fn in_prior_support(&self, theta: &[f64]) -> bool {
        self.parameters()
            .iter()
            .zip(theta)
            .all(|(p, t)| p.prior.contains(*t))
    }

    /// Largest posterior standard deviation of each parameter, used to keep
    /// evaluation draws away from prior boundaries.
    fn posterior_scale(&self) -> Vec<f64> {
        self.prior_stds()
    }

    /// Standard deviations of the prior marginals.
    fn prior_stds(&self) -> Vec<f64> {
        self.parameters().iter().map(|p| p.prior.std()).collect()
    }
}

/// Declarative model selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    GaussianToy,
    Oscillator(#[serde(default)] OscillatorParams),
    OscillatorApprox(#[serde(default = "OscillatorParams::approximate")] OscillatorParams),
    Multichannel(#[serde(default)] MultichannelParams),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Oscillator(OscillatorParams::default())
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn ForwardModel>> {
        Ok(match self {
            ModelSpec::GaussianToy => Box::new(GaussianToy::new()),
            ModelSpec::Oscillator(p) | ModelSpec::OscillatorApprox(p) => {
                Box::new(OscillatorModel::new(p.clone())?)
            }
            ModelSpec::Multichannel(p) => Box::new(MultichannelModel::new(p.clone())?),
        })
    }
}

/// Draw a parameter vector from the prior that lies at least `margin`
/// posterior widths inside every uniform prior box.
pub fn sample_interior(
    model: &dyn ForwardModel,
    widths: &[f64],
    margin: f64,
    rng: &mut dyn RngCore,
) -> Vec<f64> {
    model
        .parameters()
        .iter()
        .zip(widths)
        .map(|(p, w)| match p.prior {
            Prior::Uniform { low, high } => {
                let (lo, hi) = (low + margin * w, high - margin * w);
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    0.5 * (low + high)
                }
            }
            Prior::Normal { .. } => p.prior.sample(rng),
        })
        .collect()
}
