//! GNPE Gibbs sampling over `(θ, ĝ)`, chain initialization, convergence
//! diagnostics, and the single-pass chained-NPE baseline.

mod chained;
mod gibbs;
mod js;
mod oracle;

pub use chained::chained_npe_sample;
pub use gibbs::{
    gibbs_iteration, init_chains, run_gnpe, GibbsChainEnsemble, GnpeDiagnostics, GnpeOutcome, GnpeRun,
    GnpeRunConfig, InitSource, IterationPolicy,
};
pub use js::{convergence_js, js_divergence_1d};
pub use oracle::{FixedGaussian, ObservationOracle, ToyConditionalOracle};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::nde::{ConditionalEstimator, GnpeTransform, Prediction};

/// The `θ`-update of a Gibbs step: a diagonal Gaussian over the estimator's
/// targets given pose-standardized contexts and their proxies.
pub trait GibbsConditional: Send + Sync {
    fn output_dim(&self) -> usize;

    fn predict_given_proxy(&self, contexts: ArrayView2<f64>, proxies: &[GroupElement]) -> Result<Prediction>;
}

/// A trained estimator seen through a transform: only the approximate-mode
/// proxy factors reach the network.
pub struct NeuralConditional<'a> {
    pub estimator: &'a dyn ConditionalEstimator,
    pub transform: &'a GnpeTransform,
}

impl<'a> NeuralConditional<'a> {
    pub fn new(estimator: &'a dyn ConditionalEstimator, transform: &'a GnpeTransform) -> Result<Self> {
        if !estimator.is_trained() {
            return Err(Error::structural("estimator has not been trained"));
        }
        if estimator.proxy_dim() != transform.proxy_dim() || estimator.param_dim() != transform.target_cols().len() {
            return Err(Error::structural("estimator does not match the transform"));
        }
        Ok(Self { estimator, transform })
    }
}

impl GibbsConditional for NeuralConditional<'_> {
    fn output_dim(&self) -> usize {
        self.estimator.param_dim()
    }

    fn predict_given_proxy(&self, contexts: ArrayView2<f64>, proxies: &[GroupElement]) -> Result<Prediction> {
        let k = self.transform.proxy_dim();
        if k == 0 {
            return self.estimator.predict(contexts, None);
        }
        let mut feats = Array2::zeros((proxies.len(), k));
        for (mut row, g) in feats.rows_mut().into_iter().zip(proxies) {
            for (v, f) in row.iter_mut().zip(self.transform.proxy_features(g)) {
                *v = f;
            }
        }
        self.estimator.predict(contexts, Some(feats.view()))
    }
}

/// Posterior samples with their proxies and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub param_names: Vec<String>,
    pub proxy_names: Vec<String>,
    pub theta: Array2<f64>,
    pub proxy: Array2<f64>,
    pub chain: Vec<usize>,
    pub iteration: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.param_names.iter().position(|n| n == name)?;
        Some(self.theta.column(j).to_vec())
    }

    pub fn theta_rows(&self) -> Vec<Vec<f64>> {
        self.theta.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// One row per sample: parameters, proxies, chain id, iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = self
            .param_names
            .iter()
            .chain(&self.proxy_names)
            .map(String::as_str)
            .chain(["chain", "iteration"])
            .collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for i in 0..self.len() {
            for v in self.theta.row(i).iter().chain(self.proxy.row(i).iter()) {
                s.push_str(&format!("{v},"));
            }
            s.push_str(&format!("{},{}\n", self.chain[i], self.iteration[i]));
        }
        s
    }

    /// Parse the output of [`SampleSet::to_csv`]. Columns before the
    /// `param_dim`-th are parameters, then proxies up to `chain`.
    pub fn from_csv(text: &str, param_dim: usize) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("sample CSV: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split(',').collect();
        let w = header.len();
        if w < param_dim + 2 || header[w - 2..] != ["chain", "iteration"] {
            return Err(bad("unexpected header"));
        }
        let k = w - 2 - param_dim;
        let (mut theta, mut proxy, mut chain, mut iteration) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != w {
                return Err(bad(&format!("row {} has {} fields", i + 1, fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("row {}: `{s}` is not a number", i + 1)));
            for f in &fields[..param_dim] {
                theta.push(num(f)?);
            }
            for f in &fields[param_dim..param_dim + k] {
                proxy.push(num(f)?);
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("row {}: `{s}` is not an index", i + 1)));
            chain.push(int(fields[w - 2])?);
            iteration.push(int(fields[w - 1])?);
        }
        let n = chain.len();
        Ok(Self {
            param_names: header[..param_dim].iter().map(|s| s.to_string()).collect(),
            proxy_names: header[param_dim..param_dim + k].iter().map(|s| s.to_string()).collect(),
            theta: Array2::from_shape_vec((n, param_dim), theta).expect("row count checked"),
            proxy: Array2::from_shape_vec((n, k), proxy).expect("row count checked"),
            chain,
            iteration,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let s = SampleSet {
            param_names: vec!["a".into(), "b".into()],
            proxy_names: vec!["proxy_b".into()],
            theta: Array2::from_shape_vec((2, 2), vec![1.5, -0.1, 1e-17, 3.0]).unwrap(),
            proxy: Array2::from_shape_vec((2, 1), vec![0.25, f64::MAX]).unwrap(),
            chain: vec![0, 1],
            iteration: vec![4, 4],
        };
        assert_eq!(SampleSet::from_csv(&s.to_csv(), 2).unwrap(), s);
        assert!(SampleSet::from_csv("a,chain,iteration\nx,0,0\n", 1).is_err());
        assert!(SampleSet::from_csv("a,b\n", 1).is_err());
    }
}
