use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{ForwardModel, GaussianPosterior, ParameterSpec, Prior, Simulation};
use crate::error::{Error, Result};
use crate::group::{DataRepresentation, Grid, RepresentationKind};

pub const TOY_PRIOR_MEAN: f64 = -5.0;
pub const TOY_PRIOR_STD: f64 = 1.0;

/// Scalar model `τ ~ N(-5, 1)`, `x | τ ~ N(τ, 1)`.
///
/// The likelihood is invariant under `(τ, x) -> (τ + Δ, x + Δ)`, but the
/// posterior `N((x - 5)/2, 1/2)` is equivariant under `x -> x + 2Δ` because
/// the prior is not translation invariant.
#[derive(Clone, Debug)]
pub struct GaussianToy {
    params: Vec<ParameterSpec>,
    posterior_rep: DataRepresentation,
    likelihood_rep: DataRepresentation,
}

impl GaussianToy {
    pub fn new() -> Self {
        Self {
            params: vec![ParameterSpec::new(
                "tau",
                "",
                Prior::Normal {
                    mean: TOY_PRIOR_MEAN,
                    std: TOY_PRIOR_STD,
                },
            )],
            posterior_rep: DataRepresentation::new(
                RepresentationKind::Affine1d { scale: 2.0 },
                Grid::scalar(),
            ),
            likelihood_rep: DataRepresentation::new(
                RepresentationKind::Affine1d { scale: 1.0 },
                Grid::scalar(),
            ),
        }
    }
}

impl Default for GaussianToy {
    fn default() -> Self {
        Self::new()
    }
}

pub fn gaussian_toy_simulate(tau: f64, rng: &mut dyn RngCore) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    tau + z
}

pub fn gaussian_toy_posterior(x: f64) -> GaussianPosterior {
    GaussianPosterior {
        mean: vec![(x - 5.0) / 2.0],
        variance: vec![0.5],
    }
}

/// `p(x | τ) = N(τ, 1)[x]`.
pub fn likelihood_density(x: f64, tau: f64) -> f64 {
    (-0.5 * (x - tau).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl ForwardModel for GaussianToy {
    fn name(&self) -> &'static str {
        "gaussian-toy"
    }

    fn parameters(&self) -> &[ParameterSpec] {
        &self.params
    }

    fn pose_slots(&self) -> &[usize] {
        &[0]
    }

    fn representation(&self) -> &DataRepresentation {
        &self.posterior_rep
    }

    fn likelihood_representation(&self) -> &DataRepresentation {
        &self.likelihood_rep
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Simulation> {
        let &[tau] = theta else {
            return Err(Error::structural("gaussian toy takes one parameter"));
        };
        Ok(Simulation {
            theta: theta.to_vec(),
            theta_center: None,
            x: vec![gaussian_toy_simulate(tau, rng)],
        })
    }

    fn oracle_posterior(&self, sim: &Simulation) -> Option<GaussianPosterior> {
        sim.x.first().map(|&x| gaussian_toy_posterior(x))
    }
}
