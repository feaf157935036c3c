//! Two-channel oscillator with a shared excitation time and a per-channel
//! arrival offset.
//!
//! The group is a direct product of an absolute time shift (both channels) and
//! a relative shift (second channel only). Channel 2 is rescaled by
//! `1 + coupling * Δ / delta_scale`, so relative shifts change the signal
//! morphology slightly and are only approximately equivariant.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::oscillator::oscillator_solution;
use super::{ForwardModel, GaussianPosterior, OscillatorParams, ParameterSpec, Prior, Simulation};
use crate::error::{Error, Result};
use crate::group::{DataRepresentation, Grid, RepresentationKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultichannelParams {
    pub oscillator: OscillatorParams,
    /// Prior half-range of the relative offset, in seconds.
    pub delta_scale: f64,
    /// Standard deviation of the relative-offset perturbation.
    pub delta_noise_std: f64,
    pub amplitude_coupling: f64,
}

impl Default for MultichannelParams {
    fn default() -> Self {
        Self {
            oscillator: OscillatorParams::default(),
            delta_scale: 0.01,
            delta_noise_std: 0.002,
            amplitude_coupling: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultichannelModel {
    params: MultichannelParams,
    specs: Vec<ParameterSpec>,
    rep: DataRepresentation,
}

impl MultichannelModel {
    pub fn new(params: MultichannelParams) -> Result<Self> {
        params.oscillator.validate()?;
        if !(params.delta_scale > 0.0 && params.delta_noise_std > 0.0) {
            return Err(Error::config(
                "model.delta_scale",
                "relative offset scales must be positive",
            ));
        }
        let o = &params.oscillator;
        let specs = vec![
            ParameterSpec::new(
                "omega0",
                "Hz",
                Prior::Uniform {
                    low: o.omega0_prior[0],
                    high: o.omega0_prior[1],
                },
            ),
            ParameterSpec::new(
                "beta",
                "",
                Prior::Uniform {
                    low: o.beta_prior[0],
                    high: o.beta_prior[1],
                },
            ),
            ParameterSpec::new(
                "tau",
                "s",
                Prior::Uniform {
                    low: o.tau_prior[0],
                    high: o.tau_prior[1],
                },
            ),
            ParameterSpec::new(
                "delta",
                "s",
                Prior::Uniform {
                    low: -params.delta_scale,
                    high: params.delta_scale,
                },
            ),
        ];
        let grid = Grid::time_series(o.bins, o.t_start, o.t_end, 2);
        let rep = DataRepresentation::new(RepresentationKind::CyclicTimeShift, grid)
            .with_channel_map(vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        Ok(Self { params, specs, rep })
    }

    pub fn amplitude_factor(&self, delta: f64) -> f64 {
        1.0 + self.params.amplitude_coupling * delta / self.params.delta_scale
    }

    pub fn noise_std(&self) -> [f64; 4] {
        let s = self.params.oscillator.noise_std;
        [s[0], s[1], s[2], self.params.delta_noise_std]
    }

    pub fn simulate_with_perturbation(&self, theta: &[f64], perturb: &[f64]) -> Result<Simulation> {
        if theta.len() != 4 || perturb.len() != 4 {
            return Err(Error::structural("multichannel model takes (omega0, beta, tau, delta)"));
        }
        let c: Vec<f64> = theta.iter().zip(perturb).map(|(t, d)| t + d).collect();
        let grid = Grid::time_series(self.rep.grid.bins, self.rep.grid.start, self.rep.grid.start + self.rep.grid.duration, 1);
        let mut x = oscillator_solution(c[0], c[1], c[2], &grid)?;
        let amp = self.amplitude_factor(c[3]);
        x.extend(
            oscillator_solution(c[0], c[1], c[2] + c[3], &grid)?
                .into_iter()
                .map(|v| amp * v),
        );
        Ok(Simulation {
            theta: theta.to_vec(),
            theta_center: Some(c),
            x,
        })
    }
}

impl ForwardModel for MultichannelModel {
    fn name(&self) -> &'static str {
        "multichannel"
    }

    fn parameters(&self) -> &[ParameterSpec] {
        &self.specs
    }

    fn pose_slots(&self) -> &[usize] {
        &[2, 3]
    }

    fn representation(&self) -> &DataRepresentation {
        &self.rep
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Simulation> {
        let perturb: Vec<f64> = self
            .noise_std()
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect();
        self.simulate_with_perturbation(theta, &perturb)
    }

    fn posterior_scale(&self) -> Vec<f64> {
        self.noise_std().to_vec()
    }

    fn oracle_posterior(&self, sim: &Simulation) -> Option<GaussianPosterior> {
        let center = sim.theta_center.as_ref()?;
        GaussianPosterior::new(center.clone(), self.noise_std().iter().map(|s| s * s).collect()).ok()
    }
}
