//! Analytic stand-ins for trained estimators.

use ndarray::{Array2, ArrayView2};

use super::GibbsConditional;
use crate::error::{Error, Result};
use crate::group::{GroupElement, Kernel};
use crate::models::GaussianPosterior;
use crate::nde::{ConditionalEstimator, Prediction, ProxyMode};

/// Per-factor kernel variance; `None` for a delta kernel.
fn kernel_variances(kernel: &Kernel) -> Result<Option<Vec<f64>>> {
    match kernel {
        Kernel::Gaussian { sigma } => Ok(Some(sigma.iter().map(|s| s * s).collect())),
        Kernel::Delta { .. } => Ok(None),
        Kernel::Uniform { .. } => Err(Error::structural(
            "analytic conditionals need a Gaussian or delta kernel",
        )),
    }
}

/// Product of `N(m, v)` with a kernel factor `N(c, k)`.
fn combine(m: f64, v: f64, c: f64, k: f64) -> (f64, f64) {
    let prec = 1.0 / v + 1.0 / k;
    ((m / v + c / k) / prec, 1.0 / prec)
}

/// Exact-mode conditional of the Gaussian toy:
/// `p(τ′ | x′) ∝ N(τ′; (x′−5)/2, 1/2) · κ(−τ′)`.
#[derive(Clone, Debug)]
pub struct ToyConditionalOracle {
    kernel_variance: Option<f64>,
}

impl ToyConditionalOracle {
    pub fn new(kernel: &Kernel) -> Result<Self> {
        if kernel.factors() != 1 {
            return Err(Error::structural("the toy has a single pose factor"));
        }
        Ok(Self {
            kernel_variance: kernel_variances(kernel)?.map(|v| v[0]),
        })
    }

    pub fn conditional(&self, x_prime: f64) -> (f64, f64) {
        let (m, v) = ((x_prime - 5.0) / 2.0, 0.5);
        match self.kernel_variance {
            Some(k) => combine(m, v, 0.0, k),
            None => (0.0, 0.0),
        }
    }
}

impl GibbsConditional for ToyConditionalOracle {
    fn output_dim(&self) -> usize {
        1
    }

    fn predict_given_proxy(&self, contexts: ArrayView2<f64>, _proxies: &[GroupElement]) -> Result<Prediction> {
        let n = contexts.nrows();
        let mut mean = Array2::zeros((n, 1));
        let mut std = Array2::zeros((n, 1));
        for i in 0..n {
            let (m, v) = self.conditional(contexts[[i, 0]]);
            mean[[i, 0]] = m;
            std[[i, 0]] = v.sqrt();
        }
        Ok(Prediction { mean, std })
    }
}

/// Conditional posterior for one fixed observation whose posterior is the
/// diagonal Gaussian `N(center, σ²)`. The proxy identifies where the
/// standardized context came from, so no inversion of the data is needed.
#[derive(Clone, Debug)]
pub struct ObservationOracle {
    posterior: GaussianPosterior,
    pose_slots: Vec<usize>,
    modes: Vec<ProxyMode>,
    kernel_variances: Option<Vec<f64>>,
}

impl ObservationOracle {
    pub fn new(
        posterior: GaussianPosterior,
        pose_slots: Vec<usize>,
        kernel: &Kernel,
        modes: Vec<ProxyMode>,
    ) -> Result<Self> {
        if pose_slots.len() != kernel.factors() || modes.len() != kernel.factors() {
            return Err(Error::structural("pose slots, kernel and modes disagree on factor count"));
        }
        if pose_slots.iter().any(|&s| s >= posterior.dim()) {
            return Err(Error::structural("pose slot out of range"));
        }
        Ok(Self {
            posterior,
            pose_slots,
            modes,
            kernel_variances: kernel_variances(kernel)?,
        })
    }

    /// Mean and variance of the drawn vector (θ′ on exact factors, θ on
    /// approximate ones) given the proxy.
    pub fn conditional(&self, g_hat: &GroupElement) -> (Vec<f64>, Vec<f64>) {
        let mut mean = self.posterior.mean.clone();
        let mut var = self.posterior.variance.clone();
        for (k, &slot) in self.pose_slots.iter().enumerate() {
            let g = g_hat.shifts()[k];
            let (m, v) = (mean[slot], var[slot]);
            let (m, v) = match (self.modes[k], &self.kernel_variances) {
                // θ′ = θ − ĝ, with ε = −θ′ ~ κ
                (ProxyMode::Exact, Some(kv)) => combine(m - g, v, 0.0, kv[k]),
                (ProxyMode::Exact, None) => (0.0, 0.0),
                // θ with ĝ − θ ~ κ
                (ProxyMode::Approximate, Some(kv)) => combine(m, v, g, kv[k]),
                (ProxyMode::Approximate, None) => (g, 0.0),
            };
            mean[slot] = m;
            var[slot] = v;
        }
        (mean, var)
    }
}

impl GibbsConditional for ObservationOracle {
    fn output_dim(&self) -> usize {
        self.posterior.dim()
    }

    fn predict_given_proxy(&self, contexts: ArrayView2<f64>, proxies: &[GroupElement]) -> Result<Prediction> {
        if proxies.len() != contexts.nrows() {
            return Err(Error::structural("one proxy per context row"));
        }
        let d = self.posterior.dim();
        let mut mean = Array2::zeros((proxies.len(), d));
        let mut std = Array2::zeros((proxies.len(), d));
        for (i, g) in proxies.iter().enumerate() {
            let (m, v) = self.conditional(g);
            for j in 0..d {
                mean[[i, j]] = m[j];
                std[[i, j]] = v[j].sqrt();
            }
        }
        Ok(Prediction { mean, std })
    }
}

/// A context-independent diagonal Gaussian, used as an oracle pose
/// estimator for a fixed observation (optionally with a deliberate bias).
#[derive(Clone, Debug)]
pub struct FixedGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub context_dim: usize,
}

impl FixedGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, context_dim: usize) -> Result<Self> {
        if mean.len() != std.len() || std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::structural("fixed Gaussian needs one non-negative std per mean"));
        }
        Ok(Self {
            mean,
            std,
            context_dim,
        })
    }

    /// The pose marginal of a posterior, shifted by `bias`.
    pub fn pose_marginal(
        posterior: &GaussianPosterior,
        pose_slots: &[usize],
        bias: &[f64],
        context_dim: usize,
    ) -> Result<Self> {
        let std = posterior.std();
        Self::new(
            pose_slots
                .iter()
                .zip(bias)
                .map(|(&s, b)| posterior.mean[s] + b)
                .collect(),
            pose_slots.iter().map(|&s| std[s]).collect(),
            context_dim,
        )
    }
}

impl ConditionalEstimator for FixedGaussian {
    fn param_dim(&self) -> usize {
        self.mean.len()
    }

    fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn predict(&self, contexts: ArrayView2<f64>, _proxies: Option<ArrayView2<f64>>) -> Result<Prediction> {
        let n = contexts.nrows();
        let d = self.mean.len();
        Ok(Prediction {
            mean: Array2::from_shape_fn((n, d), |(_, j)| self.mean[j]),
            std: Array2::from_shape_fn((n, d), |(_, j)| self.std[j]),
        })
    }
}
