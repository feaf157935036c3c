//! Conditional density estimation with a diagonal Gaussian head.
//!
//! [`ConditionalGaussianEstimator`] maps a context (a data vector, optionally
//! with proxy values appended after the embedding network) to the mean and
//! log-standard-deviation of a diagonal Gaussian over parameters. Everything
//! the network sees is standardized with maps fit on the training split; the
//! loss includes the log-Jacobian of the target map, so it is the negative log
//! density in physical units.

mod checkpoint;
mod dataset;
mod gnpe;
mod standardize;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{
    generate_npe_dataset, validation_count, DatasetHeader, TrainingDataset, DATASET_MAGIC, DATASET_VERSION,
    DEFAULT_VALIDATION_FRACTION,
};
pub use gnpe::{GnpeTransform, ProxyMode, TransformedExample};
pub use standardize::Standardization;
pub use train::{train, EpochRecord, TrainConfig, TrainReport};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network};

pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 5.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Per-row Gaussian predictions in parameter units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl Prediction {
    pub fn sample_row(&self, row: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean
            .row(row)
            .iter()
            .zip(self.std.row(row))
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }
}

/// Anything that predicts a diagonal Gaussian over parameters from a batch of
/// contexts: trained estimators and analytic oracles alike.
pub trait ConditionalEstimator: Send + Sync {
    fn param_dim(&self) -> usize;
    fn context_dim(&self) -> usize;
    fn proxy_dim(&self) -> usize {
        0
    }
    fn is_trained(&self) -> bool {
        true
    }
    fn predict(&self, contexts: ArrayView2<f64>, proxies: Option<ArrayView2<f64>>) -> Result<Prediction>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingSpec {
    /// Standardized context fed straight to the head.
    Identity,
    /// Dense layers with ReLU activations.
    Mlp { hidden: Vec<usize> },
    /// Circular convolutions, each followed by ReLU and average pooling, then
    /// dense layers.
    Conv {
        channels: Vec<usize>,
        kernels: Vec<usize>,
        pool_kernel: usize,
        pool_stride: usize,
        hidden: Vec<usize>,
    },
}

impl EmbeddingSpec {
    pub fn default_mlp() -> Self {
        EmbeddingSpec::Mlp {
            hidden: vec![128, 32, 16],
        }
    }

    pub fn default_conv() -> Self {
        EmbeddingSpec::Conv {
            channels: vec![6, 12, 12],
            kernels: vec![5, 5, 5],
            pool_kernel: 7,
            pool_stride: 7,
            hidden: vec![32, 16],
        }
    }

    pub fn build(&self, context_dim: usize, context_channels: usize) -> Result<Network> {
        match self {
            EmbeddingSpec::Identity => Network::new(context_dim, vec![]),
            EmbeddingSpec::Mlp { hidden } => Network::mlp(context_dim, hidden, true),
            EmbeddingSpec::Conv {
                channels,
                kernels,
                pool_kernel,
                pool_stride,
                hidden,
            } => {
                if channels.len() != kernels.len() || context_channels == 0 {
                    return Err(Error::structural("conv spec needs one kernel size per layer"));
                }
                if context_dim % context_channels != 0 {
                    return Err(Error::structural("context length is not a multiple of channels"));
                }
                let mut length = context_dim / context_channels;
                let mut in_ch = context_channels;
                let mut layers = Vec::new();
                for (&out_ch, &k) in channels.iter().zip(kernels) {
                    if *pool_kernel > length {
                        return Err(Error::structural("pooling kernel exceeds feature length"));
                    }
                    layers.push(Layer::Conv1d {
                        in_channels: in_ch,
                        out_channels: out_ch,
                        kernel: k,
                        length,
                    });
                    layers.push(Layer::Relu {
                        width: out_ch * length,
                    });
                    layers.push(Layer::AvgPool1d {
                        channels: out_ch,
                        length,
                        kernel: *pool_kernel,
                        stride: *pool_stride,
                    });
                    length = (length - pool_kernel) / pool_stride + 1;
                    in_ch = out_ch;
                }
                let mut width = in_ch * length;
                for &h in hidden {
                    layers.push(Layer::Dense {
                        inputs: width,
                        outputs: h,
                    });
                    layers.push(Layer::Relu { width: h });
                    width = h;
                }
                Network::new(context_dim, layers)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub embedding: EmbeddingSpec,
    pub context_dim: usize,
    pub context_channels: usize,
    pub param_dim: usize,
    /// Number of proxy values concatenated to the embedded features.
    pub proxy_dim: usize,
}

/// A minibatch in physical units.
#[derive(Clone, Debug)]
pub struct Batch {
    pub targets: Array2<f64>,
    pub contexts: Array2<f64>,
    pub proxies: Option<Array2<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trainable `q(θ | context)` with a diagonal Gaussian head.
#[derive(Clone, Debug)]
pub struct ConditionalGaussianEstimator {
    spec: EstimatorSpec,
    embedding: Network,
    head: Network,
    params: Vec<f64>,
    context_std: Standardization,
    proxy_std: Standardization,
    target_std: Standardization,
    trained: bool,
}

struct Pass {
    emb: crate::nn::Trace,
    head: crate::nn::Trace,
}

impl ConditionalGaussianEstimator {
    pub fn new(spec: EstimatorSpec, seed: u64) -> Result<Self> {
        if spec.param_dim == 0 || spec.context_dim == 0 {
            return Err(Error::structural("estimator needs non-empty contexts and parameters"));
        }
        let embedding = spec.embedding.build(spec.context_dim, spec.context_channels)?;
        let head = Network::mlp(
            embedding.output_width() + spec.proxy_dim,
            &[2 * spec.param_dim],
            false,
        )?;
        let mut params = embedding.init_params(seed);
        params.extend(head.init_params(seed.wrapping_add(1)));
        Ok(Self {
            context_std: Standardization::identity(spec.context_dim),
            proxy_std: Standardization::identity(spec.proxy_dim),
            target_std: Standardization::identity(spec.param_dim),
            spec,
            embedding,
            head,
            params,
            trained: false,
        })
    }

    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::structural(format!(
                "expected {} weights, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn standardization(&self) -> (&Standardization, &Standardization, &Standardization) {
        (&self.context_std, &self.proxy_std, &self.target_std)
    }

    pub fn set_standardization(
        &mut self,
        context: Standardization,
        proxy: Standardization,
        target: Standardization,
    ) -> Result<()> {
        if context.dim() != self.spec.context_dim
            || proxy.dim() != self.spec.proxy_dim
            || target.dim() != self.spec.param_dim
        {
            return Err(Error::structural("standardization dimensions do not match the estimator"));
        }
        self.context_std = context;
        self.proxy_std = proxy;
        self.target_std = target;
        Ok(())
    }

    pub(crate) fn mark_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    fn check_inputs(&self, contexts: &ArrayView2<f64>, proxies: &Option<ArrayView2<f64>>) -> Result<()> {
        if contexts.ncols() != self.spec.context_dim {
            return Err(Error::structural(format!(
                "context width {} does not match estimator ({})",
                contexts.ncols(),
                self.spec.context_dim
            )));
        }
        match proxies {
            Some(p) if p.ncols() != self.spec.proxy_dim || p.nrows() != contexts.nrows() => {
                Err(Error::structural("proxy batch does not match the estimator"))
            }
            None if self.spec.proxy_dim > 0 => {
                Err(Error::structural("estimator is conditioned on proxies but none were given"))
            }
            _ => Ok(()),
        }
    }

    fn run(&self, contexts: ArrayView2<f64>, proxies: Option<ArrayView2<f64>>) -> Pass {
        let n_emb = self.embedding.param_count();
        let (pe, ph) = self.params.split_at(n_emb);
        let emb = self.embedding.forward(pe, self.context_std.apply(contexts));
        let features = match proxies {
            Some(p) if self.spec.proxy_dim > 0 => {
                let ps = self.proxy_std.apply(p);
                concatenate![Axis(1), emb.output().view(), ps.view()]
            }
            _ => emb.output().clone(),
        };
        let head = self.head.forward(ph, features);
        Pass { emb, head }
    }

    /// Standardized-space mean and clamped log-std for each context row.
    pub fn forward(
        &self,
        contexts: ArrayView2<f64>,
        proxies: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_inputs(&contexts, &proxies)?;
        let pass = self.run(contexts, proxies);
        let out = pass.head.output();
        let d = self.spec.param_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let log_std = out.slice(s![.., d..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Training {
                epoch: 0,
                last_finite: None,
                message: "non-finite network output".into(),
            });
        }
        Ok((mean, log_std))
    }

    /// Negative log density of `target` under `q(· | context)` in parameter units.
    pub fn nll_loss(&self, target: &[f64], context: &[f64], proxy: Option<&[f64]>) -> Result<f64> {
        let batch = Batch {
            targets: row(target),
            contexts: row(context),
            proxies: proxy.map(row),
        };
        self.batch_loss(&batch)
    }

    /// Mean negative log density over a batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let (mean, log_std) = self.forward(batch.contexts.view(), batch.proxies.as_ref().map(|p| p.view()))?;
        let t = self.target_std.apply(batch.targets.view());
        let mut total = 0.0;
        for ((m, ls), t) in mean.iter().zip(log_std.iter()).zip(t.iter()) {
            total += HALF_LN_2PI + ls + 0.5 * ((t - m) * (-ls).exp()).powi(2);
        }
        Ok(total / batch.len() as f64 + self.target_std.log_det())
    }

    /// Mean batch loss and its exact gradient with respect to every weight.
    pub fn backprop(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::structural("empty batch"));
        }
        let proxies = batch.proxies.as_ref().map(|p| p.view());
        self.check_inputs(&batch.contexts.view(), &proxies)?;
        let pass = self.run(batch.contexts.view(), proxies);
        let out = pass.head.output();
        let d = self.spec.param_dim;
        let b = batch.len() as f64;
        let t = self.target_std.apply(batch.targets.view());
        let mut grad_out = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for i in 0..batch.len() {
            for j in 0..d {
                let m = out[[i, j]];
                let raw = out[[i, d + j]];
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let r = (t[[i, j]] - m) * (-ls).exp();
                loss += HALF_LN_2PI + ls + 0.5 * r * r;
                grad_out[[i, j]] = -r * (-ls).exp() / b;
                if raw > LOG_STD_MIN && raw < LOG_STD_MAX {
                    grad_out[[i, d + j]] = (1.0 - r * r) / b;
                }
            }
        }
        let loss = loss / b + self.target_std.log_det();
        let mut grads = vec![0.0; self.params.len()];
        let n_emb = self.embedding.param_count();
        let (pe, ph) = self.params.split_at(n_emb);
        let (ge, gh) = grads.split_at_mut(n_emb);
        let dfeat = self
            .head
            .backward(ph, &pass.head, grad_out, gh, n_emb > 0)
            .filter(|_| n_emb > 0);
        if let Some(dfeat) = dfeat {
            let f = self.embedding.output_width();
            let demb = dfeat.slice(s![.., ..f]).to_owned();
            self.embedding.backward(pe, &pass.emb, demb, ge, false);
        }
        Ok((loss, grads))
    }

    /// `n` draws from `q(θ | context)` in parameter units.
    pub fn sample(
        &self,
        context: &[f64],
        proxy: Option<&[f64]>,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<f64>>> {
        let pred = self.predict(row(context).view(), proxy.map(row).as_ref().map(|p| p.view()))?;
        Ok((0..n).map(|_| pred.sample_row(0, rng)).collect())
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl ConditionalEstimator for ConditionalGaussianEstimator {
    fn param_dim(&self) -> usize {
        self.spec.param_dim
    }

    fn context_dim(&self) -> usize {
        self.spec.context_dim
    }

    fn proxy_dim(&self) -> usize {
        self.spec.proxy_dim
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn predict(&self, contexts: ArrayView2<f64>, proxies: Option<ArrayView2<f64>>) -> Result<Prediction> {
        let (mut mean, mut std) = self.forward(contexts, proxies)?;
        for j in 0..self.spec.param_dim {
            let (shift, scale) = (self.target_std.shift[j], self.target_std.scale[j]);
            mean.column_mut(j).mapv_inplace(|m| m * scale + shift);
            std.column_mut(j).mapv_inplace(|ls| ls.exp() * scale);
        }
        Ok(Prediction { mean, std })
    }
}
