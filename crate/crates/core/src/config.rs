//! Declarative experiment configuration.
//!
//! Configs are TOML documents. Every field has a default, unknown keys are
//! rejected, and [`ExperimentConfig::validate`] reports problems by field
//! path. The resolved config (defaults filled in, seeds propagated) is what
//! gets hashed and echoed into output artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::Kernel;
use crate::metrics::C2stConfig;
use crate::models::{ForwardModel, ModelSpec};
use crate::nde::{EmbeddingSpec, TrainConfig, DEFAULT_VALIDATION_FRACTION};
use crate::sampler::GnpeRunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Npe,
    NpeCnn,
    Gnpe,
    ChainedNpe,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Npe => "npe",
            Method::NpeCnn => "npe-cnn",
            Method::Gnpe => "gnpe",
            Method::ChainedNpe => "chained-npe",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Training simulations.
    pub count: usize,
    pub validation_fraction: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Embedding for `npe`, `gnpe` and `chained-npe`. Unset means identity
    /// for scalar data and the default MLP otherwise.
    pub embedding: Option<EmbeddingSpec>,
    /// Embedding for `npe-cnn`.
    pub cnn_embedding: EmbeddingSpec,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            embedding: None,
            cnn_embedding: EmbeddingSpec::default_conv(),
        }
    }
}

impl EstimatorConfig {
    pub fn embedding_for(&self, method: Method, model: &dyn ForwardModel) -> EmbeddingSpec {
        match method {
            Method::NpeCnn => self.cnn_embedding.clone(),
            _ => self.embedding.clone().unwrap_or_else(|| {
                if model.data_len() == 1 {
                    EmbeddingSpec::Identity
                } else {
                    EmbeddingSpec::default_mlp()
                }
            }),
        }
    }
}

/// Initial poses of the GNPE chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitConfig {
    /// A separately trained pose estimator.
    Estimator,
    /// Every chain starts at this pose.
    Fixed { pose: Vec<f64> },
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig::Estimator
    }
}

/// The observation used by `infer` and `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// True parameters; drawn from the prior interior when unset.
    pub theta: Option<Vec<f64>>,
    /// Raw data, bypassing simulation. No oracle posterior is available then.
    pub x: Option<Vec<f64>>,
    /// Distance from the prior boundary, in posterior widths, for drawn
    /// parameters.
    pub margin: f64,
    /// Index among the interior draws of the observation seed.
    pub index: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            theta: None,
            x: None,
            margin: 3.0,
            index: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    C2st,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub suite: Vec<MetricKind>,
    pub c2st: C2stConfig,
    pub effective_dimension_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            suite: vec![MetricKind::C2st, MetricKind::Mse],
            c2st: C2stConfig::default(),
            effective_dimension_threshold: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    /// Methods compared in `fig3b`.
    pub methods: Vec<Method>,
    /// Training seeds per method.
    pub seeds: usize,
    /// Observations per seed.
    pub simulations: usize,
    /// Simulations in each `fig3d` batch.
    pub spectrum_batch: usize,
    /// Histogram bins for `appb`.
    pub histogram_bins: usize,
    /// Observation for `appb`.
    pub appb_x: f64,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Npe, Method::NpeCnn, Method::Gnpe],
            seeds: 10,
            simulations: 5,
            spectrum_batch: 512,
            histogram_bins: 60,
            appb_x: 3.0,
        }
    }
}

/// Seeds for each source of randomness. `--seed` sets all of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub simulation: u64,
    pub training: u64,
    pub observation: u64,
    pub sampling: u64,
    pub evaluation: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            simulation: seed,
            training: seed,
            observation: seed,
            sampling: seed,
            evaluation: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub out: PathBuf,
    pub model: ModelSpec,
    pub simulation: SimulationConfig,
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    /// Kernel, proxy modes and iteration policy for GNPE. `chains` is the
    /// sample count for every method.
    pub sampler: GnpeRunConfig,
    pub init: InitConfig,
    pub observation: ObservationConfig,
    pub metrics: MetricsConfig,
    pub reproduce: ReproduceConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Gnpe,
            out: PathBuf::from("out"),
            model: ModelSpec::default(),
            simulation: SimulationConfig::default(),
            estimator: EstimatorConfig::default(),
            train: TrainConfig::default(),
            sampler: GnpeRunConfig::default(),
            init: InitConfig::default(),
            observation: ObservationConfig::default(),
            metrics: MetricsConfig::default(),
            reproduce: ReproduceConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

impl ExperimentConfig {
    /// Parse TOML. Unknown keys and malformed values are config errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::Config {
                field,
                message: e.to_string().trim().to_string(),
            }
        })?;
        Ok(cfg)
    }

    /// Read a config file. A missing or unreadable file is an I/O error.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Copy the seeds into the nested sections that consume them, and reject
    /// nested seeds that disagree.
    pub fn resolve(mut self) -> Result<Self> {
        for (field, nested, seed) in [
            ("train.seed", &mut self.train.seed, self.seeds.training),
            ("sampler.seed", &mut self.sampler.seed, self.seeds.sampling),
            ("metrics.c2st.seed", &mut self.metrics.c2st.seed, self.seeds.evaluation),
        ] {
            if *nested != 0 && *nested != seed {
                return Err(Error::config(field, "set the seed in the [seeds] table instead"));
            }
            *nested = seed;
        }
        self.validate()?;
        Ok(self)
    }

    /// Field-level validation of every section.
    pub fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        check(self.simulation.count >= 2, "simulation.count", "need at least 2 simulations")?;
        check(
            self.simulation.validation_fraction > 0.0 && self.simulation.validation_fraction < 1.0,
            "simulation.validation_fraction",
            "must lie in (0, 1)",
        )?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.metrics.c2st.validate()?;
        let k = model.pose_slots().len();
        check(
            self.sampler.kernel.factors() == k,
            "sampler.kernel",
            &format!("the model has {k} pose factor(s)"),
        )?;
        check(
            self.sampler.modes.len() == k,
            "sampler.modes",
            &format!("need one mode per pose factor ({k})"),
        )?;
        if let InitConfig::Fixed { pose } = &self.init {
            check(pose.len() == k, "init.pose", &format!("need {k} value(s)"))?;
        }
        if let Some(theta) = &self.observation.theta {
            check(
                theta.len() == model.param_dim(),
                "observation.theta",
                &format!("need {} values", model.param_dim()),
            )?;
            check(theta.iter().all(|v| v.is_finite()), "observation.theta", "values must be finite")?;
        }
        if let Some(x) = &self.observation.x {
            check(
                x.len() == model.data_len(),
                "observation.x",
                &format!("need {} values", model.data_len()),
            )?;
            check(self.observation.theta.is_none(), "observation.x", "give either theta or x, not both")?;
        }
        check(self.observation.margin >= 0.0, "observation.margin", "must be non-negative")?;
        check(
            self.metrics.effective_dimension_threshold > 0.0 && self.metrics.effective_dimension_threshold < 1.0,
            "metrics.effective_dimension_threshold",
            "must lie in (0, 1)",
        )?;
        check(
            self.sampler.chains >= 2,
            "sampler.chains",
            "need at least 2 samples",
        )?;
        let r = &self.reproduce;
        check(r.seeds >= 1, "reproduce.seeds", "must be at least 1")?;
        check(r.simulations >= 1, "reproduce.simulations", "must be at least 1")?;
        check(r.spectrum_batch >= 2, "reproduce.spectrum_batch", "must be at least 2")?;
        check(r.histogram_bins >= 1, "reproduce.histogram_bins", "must be at least 1")?;
        check(!r.methods.is_empty(), "reproduce.methods", "list at least one method")?;
        if self.method == Method::NpeCnn {
            self.estimator
                .cnn_embedding
                .build(model.data_len(), model.representation().grid.channels)
                .map_err(|e| Error::config("estimator.cnn_embedding", e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// The delta kernel matching the model's pose factors, used by chained NPE.
    pub fn delta_kernel(&self, model: &dyn ForwardModel) -> Kernel {
        Kernel::Delta {
            factors: model.pose_slots().len(),
        }
    }
}
