use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ForwardModel, GaussianPosterior, ParameterSpec, Prior, Simulation};
use crate::error::{Error, Result};
use crate::group::{DataRepresentation, Grid, RepresentationKind};

/// Impulse response of a damped harmonic oscillator excited at `tau`,
/// sampled on `grid`.
pub fn oscillator_solution(omega0: f64, beta: f64, tau: f64, grid: &Grid) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!(
            "damping ratio {beta} is not underdamped (0 < beta < 1)"
        )));
    }
    if !(omega0 > 0.0 && omega0.is_finite() && tau.is_finite()) {
        return Err(Error::Domain(format!("invalid omega0={omega0}, tau={tau}")));
    }
    let wd = (1.0 - beta * beta).sqrt() * omega0;
    let decay = beta * omega0;
    Ok(grid
        .times()
        .into_iter()
        .map(|t| {
            if t <= tau {
                0.0
            } else {
                let s = t - tau;
                (-decay * s).exp() * (wd * s).sin() / wd
            }
        })
        .collect())
}

/// Oscillator configuration. The defaults are the damped-oscillator toy:
/// uniform priors `ω0 ∈ [3, 10]`, `β ∈ [0.2, 0.5]`, `τ ∈ [-5, 0]` s, 2000 bins
/// on `[-5, 5]` s and parameter noise `(0.3, 0.03, 0.3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillatorParams {
    pub bins: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub omega0_prior: [f64; 2],
    pub beta_prior: [f64; 2],
    pub tau_prior: [f64; 2],
    /// Standard deviations of the parameter perturbation `δθ`.
    pub noise_std: [f64; 3],
    /// When set, `σ_τ` grows linearly in `τ`: `σ_τ (1 + c (τ + 2.5) / 2.5)`.
    pub tau_noise_ramp: Option<f64>,
}

impl Default for OscillatorParams {
    fn default() -> Self {
        Self {
            bins: 2000,
            t_start: -5.0,
            t_end: 5.0,
            omega0_prior: [3.0, 10.0],
            beta_prior: [0.2, 0.5],
            tau_prior: [-5.0, 0.0],
            noise_std: [0.3, 0.03, 0.3],
            tau_noise_ramp: None,
        }
    }
}

impl OscillatorParams {
    /// The approximately-equivariant variant with `τ`-dependent noise.
    pub fn approximate() -> Self {
        Self {
            tau_noise_ramp: Some(0.5),
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.bins < 8 {
            return Err(Error::config("model.bins", "need at least 8 bins"));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::config("model.t_end", "t_end must exceed t_start"));
        }
        for (field, [lo, hi]) in [
            ("model.omega0_prior", self.omega0_prior),
            ("model.beta_prior", self.beta_prior),
            ("model.tau_prior", self.tau_prior),
        ] {
            Prior::Uniform { low: lo, high: hi }.validate(field)?;
        }
        if !(self.omega0_prior[0] > 0.0) {
            return Err(Error::config("model.omega0_prior", "frequencies must be positive"));
        }
        if !(self.beta_prior[0] > 0.0 && self.beta_prior[1] < 1.0) {
            return Err(Error::config(
                "model.beta_prior",
                "damping prior must lie inside (0, 1)",
            ));
        }
        if self.noise_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("model.noise_std", "noise scales must be positive"));
        }
        Ok(())
    }
}

/// Damped-oscillator forward model `x = f(θ + δθ)` with pose `τ`.
#[derive(Clone, Debug)]
pub struct OscillatorModel {
    params: OscillatorParams,
    specs: Vec<ParameterSpec>,
    rep: DataRepresentation,
}

impl OscillatorModel {
    pub fn new(params: OscillatorParams) -> Result<Self> {
        params.validate()?;
        let specs = vec![
            ParameterSpec::new(
                "omega0",
                "Hz",
                Prior::Uniform {
                    low: params.omega0_prior[0],
                    high: params.omega0_prior[1],
                },
            ),
            ParameterSpec::new(
                "beta",
                "",
                Prior::Uniform {
                    low: params.beta_prior[0],
                    high: params.beta_prior[1],
                },
            ),
            ParameterSpec::new(
                "tau",
                "s",
                Prior::Uniform {
                    low: params.tau_prior[0],
                    high: params.tau_prior[1],
                },
            ),
        ];
        let grid = Grid::time_series(params.bins, params.t_start, params.t_end, 1);
        Ok(Self {
            rep: DataRepresentation::new(RepresentationKind::CyclicTimeShift, grid),
            params,
            specs,
        })
    }

    pub fn params(&self) -> &OscillatorParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        &self.rep.grid
    }

    /// Perturbation scales at pose `tau`.
    pub fn noise_std_at(&self, tau: f64) -> [f64; 3] {
        let mut s = self.params.noise_std;
        if let Some(c) = self.params.tau_noise_ramp {
            let mid = 0.5 * (self.params.tau_prior[0] + self.params.tau_prior[1]);
            let half = 0.5 * (self.params.tau_prior[1] - self.params.tau_prior[0]);
            s[2] *= 1.0 + c * (tau - mid) / half;
        }
        s
    }

    /// Simulate with an explicit perturbation.
    pub fn simulate_with_perturbation(&self, theta: &[f64], delta: &[f64]) -> Result<Simulation> {
        if theta.len() != 3 || delta.len() != 3 {
            return Err(Error::structural("oscillator takes (omega0, beta, tau)"));
        }
        let center: Vec<f64> = theta.iter().zip(delta).map(|(t, d)| t + d).collect();
        let x = oscillator_solution(center[0], center[1], center[2], self.grid())?;
        Ok(Simulation {
            theta: theta.to_vec(),
            theta_center: Some(center),
            x,
        })
    }
}

impl ForwardModel for OscillatorModel {
    fn name(&self) -> &'static str {
        if self.params.tau_noise_ramp.is_some() {
            "oscillator-approx"
        } else {
            "oscillator"
        }
    }

    fn parameters(&self) -> &[ParameterSpec] {
        &self.specs
    }

    fn pose_slots(&self) -> &[usize] {
        &[2]
    }

    fn representation(&self) -> &DataRepresentation {
        &self.rep
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Simulation> {
        if theta.len() != 3 {
            return Err(Error::structural("oscillator takes (omega0, beta, tau)"));
        }
        let sigma = self.noise_std_at(theta[2]);
        let delta: Vec<f64> = sigma
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect();
        self.simulate_with_perturbation(theta, &delta)
    }

    fn posterior_scale(&self) -> Vec<f64> {
        let mut s = self.params.noise_std.to_vec();
        if let Some(c) = self.params.tau_noise_ramp {
            s[2] *= 1.0 + c.abs();
        }
        s
    }

    /// `N(θ_center, diag(σ²))`, neglecting prior boundaries. For the
    /// approximate variant the `τ` width is evaluated at the centre.
    fn oracle_posterior(&self, sim: &Simulation) -> Option<GaussianPosterior> {
        let center = sim.theta_center.as_ref()?;
        let sigma = self.noise_std_at(center[2]);
        GaussianPosterior::new(center.clone(), sigma.iter().map(|s| s * s).collect()).ok()
    }
}
