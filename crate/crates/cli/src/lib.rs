//! The `gnpe` command-line tool.
//!
//! Every command reads an [`ExperimentConfig`], applies the `--seed` and
//! `--out` overrides, and writes its artifacts into the output directory
//! together with a `<command>.manifest.json` that records the resolved
//! config, its hash, and SHA-256 digests of all inputs and outputs.
//!
//! Exit codes: 0 success, 1 internal error, 2 I/O or missing input,
//! 3 invalid config, 4 training failure, 5 sampler did not converge.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use gnpe::config::{ExperimentConfig, Seeds};
use gnpe::experiment::{
    appb, configured_observation, evaluate_samples, fig3b, fig3b_means, fig3d, infer_method, roles, train_method,
    Observation, Trained,
};
use gnpe::models::ForwardModel;
use gnpe::nde::{generate_npe_dataset, Checkpoint, TrainingDataset};
use gnpe::sampler::SampleSet;
use gnpe::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_CONVERGENCE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "gnpe", version, about = "Simulation-based inference with GNPE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use this seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory, overriding `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training dataset.
    Simulate,
    /// Train the configured method on the dataset.
    Train,
    /// Sample the posterior of the configured observation.
    Infer,
    /// Score inferred samples against the oracle posterior.
    Evaluate,
    /// Produce the data behind a figure.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig3b,
    Fig3d,
    Appb,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    /// Inference finished without meeting the convergence criterion. Its
    /// outputs were written.
    NotConverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Error(e.into())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Error(e) => e.fmt(f),
            Failure::NotConverged => f.write_str("GNPE did not converge; partial samples were written"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::NotConverged => EXIT_CONVERGENCE,
            Failure::Error(e) => match e {
                Error::Io(_) | Error::Format(_) | Error::Json(_) => EXIT_IO,
                Error::Config { .. } | Error::Domain(_) | Error::Data(_) => EXIT_CONFIG,
                Error::Training { .. } => EXIT_TRAINING,
                Error::Structural(_) => EXIT_INTERNAL,
            },
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Load the config and apply command-line overrides.
pub fn resolve_config(cli: &Cli) -> gnpe::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = Seeds::all(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.resolve()
}

/// Run one invocation.
pub fn run(cli: &Cli) -> CmdResult {
    let cfg = resolve_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config {
                field: "--workers".into(),
                message: "must be at least 1".into(),
            }
            .into());
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Structural(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut ctx = Context::new(&cfg)?;
        match &cli.command {
            Command::Simulate => simulate(&mut ctx),
            Command::Train => train_cmd(&mut ctx),
            Command::Infer => infer(&mut ctx),
            Command::Evaluate => evaluate(&mut ctx),
            Command::Reproduce { figure } => reproduce(&mut ctx, *figure),
        }
    })
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: String,
    config_hash: String,
    config: &'a ExperimentConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
    details: serde_json::Value,
}

/// Output directory bookkeeping for one command.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: Box<dyn ForwardModel>,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> CmdResult<Self> {
        fs::create_dir_all(&cfg.out)?;
        Ok(Self {
            cfg,
            model: cfg.model.build()?,
            dir: cfg.out.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read_input(&mut self, name: &str) -> CmdResult<Vec<u8>> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("missing input {}: {e}", path.display())))
        })?;
        self.inputs.insert(name.to_string(), sha256(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CmdResult {
        fs::write(self.path(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256(bytes));
        log::info!("wrote {}", self.path(name).display());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Artifact header shared by every JSON output.
    fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.cfg.hash(),
            "config": self.cfg,
            "inputs": self.inputs,
        })
    }

    fn finish(&mut self, command: &str, details: serde_json::Value) -> CmdResult {
        let config = self.cfg.to_toml();
        self.write("config.toml", config.as_bytes())?;
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: self.cfg.hash(),
            config: self.cfg,
            inputs: &self.inputs,
            outputs: &self.outputs,
            details,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path(&format!("{command}.manifest.json")), text)?;
        Ok(())
    }

    fn load_dataset(&mut self) -> CmdResult<TrainingDataset> {
        let bytes = self.read_input("dataset.bin")?;
        let data = TrainingDataset::read_from(bytes.as_slice())?;
        if data.model != self.model.name() {
            return Err(Error::Config {
                field: "model".into(),
                message: format!("dataset was simulated with `{}`", data.model),
            }
            .into());
        }
        Ok(data)
    }

    fn load_trained(&mut self) -> CmdResult<Trained> {
        let method = self.cfg.method;
        let mut trained = Trained {
            method,
            estimators: BTreeMap::new(),
            reports: BTreeMap::new(),
        };
        for role in roles(method, self.cfg) {
            let name = checkpoint_name(method.as_str(), role);
            let bytes = self.read_input(&name)?;
            let ckpt = Checkpoint::from_reader(bytes.as_slice())?;
            trained.estimators.insert(role.to_string(), ckpt.estimator);
        }
        Ok(trained)
    }

    fn load_observation(&mut self) -> CmdResult<Observation> {
        let bytes = self.read_input("observation.json")?;
        let v: serde_json::Value = serde_json::from_slice(&bytes)?;
        Ok(serde_json::from_value(v["observation"].clone())?)
    }
}

fn checkpoint_name(method: &str, role: &str) -> String {
    format!("{method}.{role}.ckpt")
}

fn simulate(ctx: &mut Context<'_>) -> CmdResult {
    let cfg = ctx.cfg;
    let data = generate_npe_dataset(
        ctx.model.as_ref(),
        cfg.simulation.count,
        cfg.simulation.validation_fraction,
        cfg.seeds.simulation,
    )?;
    let mut bytes = Vec::new();
    data.write_to(&mut bytes)?;
    ctx.write("dataset.bin", &bytes)?;
    ctx.write("dataset_preview.csv", data.to_csv(20, 16).as_bytes())?;
    let details = serde_json::json!({
        "model": data.model,
        "records": data.len(),
        "validation": data.n_val,
        "seed": cfg.seeds.simulation,
        "content_hash": data.content_hash(),
    });
    ctx.finish("simulate", details)
}

fn train_cmd(ctx: &mut Context<'_>) -> CmdResult {
    let cfg = ctx.cfg;
    let data = ctx.load_dataset()?;
    let trained = train_method(ctx.model.as_ref(), &data, cfg, cfg.method)?;
    let mut details = serde_json::Map::new();
    for (role, est) in &trained.estimators {
        let report = &trained.reports[role];
        let echo = serde_json::json!({
            "method": cfg.method,
            "role": role,
            "config_hash": cfg.hash(),
            "config": cfg,
            "dataset_hash": ctx.inputs["dataset.bin"],
            "best_epoch": report.best_epoch,
        });
        let name = checkpoint_name(cfg.method.as_str(), role);
        let bytes = Checkpoint {
            estimator: est.clone(),
            config: echo,
        }
        .to_bytes()?;
        ctx.write(&name, &bytes)?;
        ctx.write(&format!("{}.{role}.loss.csv", cfg.method), report.to_csv().as_bytes())?;
        details.insert(
            role.clone(),
            serde_json::json!({ "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss }),
        );
    }
    ctx.finish("train", details.into())
}

fn infer(ctx: &mut Context<'_>) -> CmdResult {
    let cfg = ctx.cfg;
    let trained = ctx.load_trained()?;
    let obs = configured_observation(ctx.model.as_ref(), cfg)?;
    let mut obs_doc = ctx.provenance();
    obs_doc["observation"] = serde_json::to_value(&obs)?;
    ctx.write_json("observation.json", &obs_doc)?;
    let inf = infer_method(ctx.model.as_ref(), &trained, &obs.x, cfg)?;
    let method = cfg.method.as_str();
    let csv = inf.samples.to_csv();
    ctx.write(&format!("{method}.samples.csv"), csv.as_bytes())?;
    let mut doc = ctx.provenance();
    doc["method"] = serde_json::to_value(cfg.method)?;
    doc["converged"] = inf.converged.into();
    doc["samples"] = inf.samples.len().into();
    doc["samples_sha256"] = sha256(csv.as_bytes()).into();
    doc["seeds"] = serde_json::to_value(&cfg.seeds)?;
    doc["diagnostics"] = serde_json::to_value(&inf.diagnostics)?;
    ctx.write_json(&format!("{method}.diagnostics.json"), &doc)?;
    ctx.finish("infer", serde_json::json!({ "converged": inf.converged }))?;
    if inf.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn evaluate(ctx: &mut Context<'_>) -> CmdResult {
    let cfg = ctx.cfg;
    let obs = ctx.load_observation()?;
    let oracle = obs.oracle.ok_or_else(|| {
        Error::Format("observation.json carries no oracle posterior; evaluation needs a simulated observation".into())
    })?;
    let name = format!("{}.samples.csv", cfg.method);
    let bytes = ctx.read_input(&name)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{name} is not UTF-8")))?;
    let samples = SampleSet::from_csv(&text, ctx.model.param_dim())?;
    let records = evaluate_samples(ctx.model.as_ref(), &samples, &oracle, cfg)?;
    let mut doc = ctx.provenance();
    doc["method"] = serde_json::to_value(cfg.method)?;
    doc["metrics"] = serde_json::to_value(&records)?;
    ctx.write_json(&format!("{}.metrics.json", cfg.method), &doc)?;
    let summary: BTreeMap<_, _> = records.iter().map(|r| (r.metric.clone(), r.value)).collect();
    ctx.finish("evaluate", serde_json::to_value(summary)?)
}

fn reproduce(ctx: &mut Context<'_>, figure: Figure) -> CmdResult {
    let cfg = ctx.cfg;
    match figure {
        Figure::Fig3b => {
            let rows = fig3b(cfg)?;
            let mut csv = String::from("method,seed,simulation,c2st,converged,iterations\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.method, r.seed, r.simulation, r.c2st, r.converged, r.iterations
                ));
            }
            ctx.write("fig3b.csv", csv.as_bytes())?;
            let means = fig3b_means(&rows);
            let mut doc = ctx.provenance();
            doc["mean_c2st"] = serde_json::to_value(&means)?;
            ctx.write_json("fig3b.json", &doc)?;
            ctx.finish("reproduce-fig3b", serde_json::to_value(&means)?)
        }
        Figure::Fig3d => {
            let f = fig3d(cfg)?;
            let mut csv = String::from("index,raw,standardized\n");
            for (i, (a, b)) in f.raw.iter().zip(&f.standardized).enumerate() {
                csv.push_str(&format!("{i},{a},{b}\n"));
            }
            ctx.write("fig3d.csv", csv.as_bytes())?;
            let details = serde_json::json!({
                "threshold": f.threshold,
                "raw_dimension": f.raw_dimension,
                "standardized_dimension": f.standardized_dimension,
            });
            let mut doc = ctx.provenance();
            doc["effective_dimension"] = details.clone();
            ctx.write_json("fig3d.json", &doc)?;
            ctx.finish("reproduce-fig3d", details)
        }
        Figure::Appb => {
            let out = appb(cfg)?;
            let mut csv = String::from("center,gnpe_density,analytic_density\n");
            for r in &out.histogram {
                csv.push_str(&format!("{},{},{}\n", r.center, r.gnpe_density, r.analytic_density));
            }
            ctx.write("appb.csv", csv.as_bytes())?;
            let n = out.samples.len() as f64;
            let mean = out.samples.iter().sum::<f64>() / n;
            let var = out.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let details = serde_json::json!({
                "x": out.x,
                "sample_mean": mean,
                "sample_variance": var,
                "posterior": out.posterior,
            });
            let mut doc = ctx.provenance();
            doc["summary"] = details.clone();
            doc["diagnostics"] = serde_json::to_value(&out.diagnostics)?;
            ctx.write_json("appb.json", &doc)?;
            ctx.finish("reproduce-appb", details)
        }
    }
}
