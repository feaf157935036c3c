use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{act_on_data, act_on_params, make_proxy, DataRepresentation, GroupElement, Kernel};
use crate::models::ForwardModel;

/// How the estimator treats one group factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyMode {
    /// Target pose becomes `ĝ⁻¹θ`; the proxy is not an input.
    Exact,
    /// Target pose is left as is; the proxy is appended after the embedding.
    Approximate,
}

/// One pose-standardized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedExample {
    pub target: Vec<f64>,
    pub context: Vec<f64>,
    /// Proxy shifts of the approximate factors, in factor order.
    pub proxy: Vec<f64>,
}

/// Pose standardization of `(θ, x)` pairs with a blurred pose proxy.
#[derive(Clone, Debug, PartialEq)]
pub struct GnpeTransform {
    rep: DataRepresentation,
    pose_slots: Vec<usize>,
    kernel: Kernel,
    modes: Vec<ProxyMode>,
    target_cols: Vec<usize>,
}

impl GnpeTransform {
    pub fn new(
        rep: DataRepresentation,
        pose_slots: Vec<usize>,
        kernel: Kernel,
        modes: Vec<ProxyMode>,
        param_dim: usize,
    ) -> Result<Self> {
        kernel.validate()?;
        let n = rep.factors();
        if pose_slots.len() != n || kernel.factors() != n || modes.len() != n {
            return Err(Error::structural(format!(
                "representation has {n} factors; got {} pose slots, {} kernel factors, {} modes",
                pose_slots.len(),
                kernel.factors(),
                modes.len()
            )));
        }
        if pose_slots.iter().any(|&s| s >= param_dim) {
            return Err(Error::structural("pose slot out of range"));
        }
        Ok(Self {
            rep,
            pose_slots,
            kernel,
            modes,
            target_cols: (0..param_dim).collect(),
        })
    }

    /// Transform for a model's posterior representation.
    pub fn for_model(model: &dyn ForwardModel, kernel: Kernel, modes: Vec<ProxyMode>) -> Result<Self> {
        Self::new(
            model.representation().clone(),
            model.pose_slots().to_vec(),
            kernel,
            modes,
            model.param_dim(),
        )
    }

    /// Keep only these parameter columns as targets.
    pub fn with_target_cols(mut self, cols: Vec<usize>) -> Self {
        self.target_cols = cols;
        self
    }

    pub fn representation(&self) -> &DataRepresentation {
        &self.rep
    }

    pub fn pose_slots(&self) -> &[usize] {
        &self.pose_slots
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn modes(&self) -> &[ProxyMode] {
        &self.modes
    }

    pub fn target_cols(&self) -> &[usize] {
        &self.target_cols
    }

    pub fn proxy_dim(&self) -> usize {
        self.modes.iter().filter(|m| **m == ProxyMode::Approximate).count()
    }

    pub fn pose_of(&self, theta: &[f64]) -> Result<GroupElement> {
        self.pose_slots
            .iter()
            .map(|&s| {
                theta
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::structural("parameter vector shorter than pose slots"))
            })
            .collect::<Result<Vec<_>>>()
            .map(GroupElement::new)
    }

    pub fn proxy_features(&self, g_hat: &GroupElement) -> Vec<f64> {
        g_hat
            .shifts()
            .iter()
            .zip(&self.modes)
            .filter(|(_, m)| **m == ProxyMode::Approximate)
            .map(|(s, _)| *s)
            .collect()
    }

    /// The part of `ĝ` that acts on exact-mode targets.
    fn exact_part(&self, g_hat: &GroupElement) -> GroupElement {
        GroupElement::new(
            g_hat
                .shifts()
                .iter()
                .zip(&self.modes)
                .map(|(s, m)| if *m == ProxyMode::Exact { *s } else { 0.0 })
                .collect(),
        )
    }

    /// Standardize `(θ, x)` with a given proxy.
    pub fn apply_with_proxy(&self, theta: &[f64], x: &[f64], g_hat: &GroupElement) -> Result<TransformedExample> {
        let inv = g_hat.inverse();
        let context = act_on_data(&inv, x, &self.rep)?;
        let (moved, _) = act_on_params(&self.exact_part(&inv), theta, &self.pose_slots)?;
        Ok(TransformedExample {
            target: self.target_cols.iter().map(|&c| moved[c]).collect(),
            context,
            proxy: self.proxy_features(g_hat),
        })
    }

    /// Standardize `(θ, x)` with a fresh proxy `ĝ = g^θ ε`.
    pub fn apply<R: Rng + ?Sized>(&self, theta: &[f64], x: &[f64], rng: &mut R) -> Result<TransformedExample> {
        let g_hat = make_proxy(&self.pose_of(theta)?, &self.kernel, rng)?;
        self.apply_with_proxy(theta, x, &g_hat)
    }

    /// Map an estimator draw back to the observation frame: `θ = ĝθ′` on the
    /// exact factors, unchanged on the approximate ones.
    pub fn reassemble(&self, theta_prime: &[f64], g_hat: &GroupElement) -> Result<Vec<f64>> {
        Ok(act_on_params(&self.exact_part(g_hat), theta_prime, &self.pose_slots)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GaussianToy, OscillatorModel, OscillatorParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_exact_mode() {
        let toy = GaussianToy::new();
        let t = GnpeTransform::for_model(&toy, Kernel::gaussian(1.0), vec![ProxyMode::Exact]).unwrap();
        let g_hat = GroupElement::new(vec![-1.5]);
        let ex = t.apply_with_proxy(&[-2.0], &[1.0], &g_hat).unwrap();
        assert_eq!(ex.target, vec![-2.0 + 1.5]);
        assert_eq!(ex.context, vec![1.0 - 2.0 * -1.5]);
        assert!(ex.proxy.is_empty());
        assert_eq!(t.reassemble(&ex.target, &g_hat).unwrap(), vec![-2.0]);
    }

    #[test]
    fn oscillator_target_is_minus_epsilon() {
        let m = OscillatorModel::new(OscillatorParams::default()).unwrap();
        let t = GnpeTransform::for_model(&m, Kernel::gaussian(0.1), vec![ProxyMode::Exact]).unwrap();
        let theta = [6.0, 0.3, -2.0];
        let x = m.simulate(&theta, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().x;
        let dt = m.grid().dt();
        let eps = 7.0 * dt;
        let g_hat = GroupElement::new(vec![-2.0 + eps]);
        let ex = t.apply_with_proxy(&theta, &x, &g_hat).unwrap();
        assert_eq!(&ex.target[..2], &theta[..2]);
        assert!((ex.target[2] + eps).abs() < 1e-12);
        let back = act_on_data(&g_hat, &ex.context, m.representation()).unwrap();
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn delta_kernel_aligns_perfectly() {
        let m = OscillatorModel::new(OscillatorParams::default()).unwrap();
        let t = GnpeTransform::for_model(&m, Kernel::delta(), vec![ProxyMode::Exact]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = m.simulate_with_perturbation(&[9.0, 0.45, -3.0], &[0.0; 3]).unwrap();
        let b = m.simulate_with_perturbation(&[9.0, 0.45, -1.0], &[0.0; 3]).unwrap();
        let ea = t.apply(&a.theta, &a.x, &mut rng).unwrap();
        let eb = t.apply(&b.theta, &b.x, &mut rng).unwrap();
        assert_eq!(ea.target[2], 0.0);
        assert_eq!(eb.target[2], 0.0);
        let err = ea.context.iter().zip(&eb.context).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn approximate_mode_keeps_target_and_appends_proxy() {
        let m = OscillatorModel::new(OscillatorParams::approximate()).unwrap();
        let t = GnpeTransform::for_model(&m, Kernel::gaussian(0.1), vec![ProxyMode::Approximate]).unwrap();
        assert_eq!(t.proxy_dim(), 1);
        let theta = [6.0, 0.3, -2.0];
        let g_hat = GroupElement::new(vec![-2.05]);
        let ex = t.apply_with_proxy(&theta, &[0.0; 2000], &g_hat).unwrap();
        assert_eq!(ex.target, theta.to_vec());
        assert_eq!(ex.proxy, vec![-2.05]);
        assert_eq!(t.reassemble(&ex.target, &g_hat).unwrap(), theta.to_vec());
    }

    #[test]
    fn mismatched_modes_rejected() {
        let toy = GaussianToy::new();
        assert!(GnpeTransform::for_model(&toy, Kernel::gaussian(1.0), vec![]).is_err());
        assert!(GnpeTransform::for_model(&toy, Kernel::Gaussian { sigma: vec![1.0, 1.0] }, vec![ProxyMode::Exact]).is_err());
    }
}
