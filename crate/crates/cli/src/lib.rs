//! Command-line pipeline: dataset generation, training, evaluation and demos.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use icm_core::dataset::{read_dataset, Dataset, Manifest};
use icm_core::network::{load_checkpoint, Network, NetworkConfig};

pub mod commands;
pub mod error;

pub use error::{CliError, CliResult};
use error::io_err;

const PRECEDENCE: &str = "Settings precedence: command-line flags > --config JSON file > built-in defaults.\n\
The --config file holds the settings object of the chosen subcommand; unknown keys are rejected.\n\
Exit codes: 0 success, 1 usage or missing artifact, 2 numerical failure, 3 too many failed solves.";

#[derive(Debug, Parser)]
#[command(name = "icm", version, about = "In-context constitutive modeling pipeline", after_help = PRECEDENCE)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON settings file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (datagen only).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replace the network by the true energy gradient.
    #[arg(long, global = true)]
    pub oracle: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample materials, mesh plates, solve load programs and write a dataset.
    Datagen(commands::datagen::DatagenArgs),
    /// Train the in-context network on a dataset.
    Train(commands::train::TrainArgs),
    /// Error reports on test sets, optional context-scaling curve and ENN baseline.
    Eval(commands::eval::EvalArgs),
    /// Stresses and a uniaxial P-λ curve for one material from its context.
    Infer(commands::infer::InferArgs),
    /// Solve a held-out geometry with the inferred constitutive response.
    FemDemo(commands::fem::FemDemoArgs),
    /// Simulate nonlinear diffusion, tokenize it and check the residual identity.
    DiffusionDemo(commands::diffusion::DiffusionDemoArgs),
    /// Binary token dump of one material's full context.
    DumpTokens(commands::dumps::DumpTokensArgs),
    /// Field embeddings of every field in a dataset.
    DumpEmbeddings(commands::dumps::DumpEmbeddingsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Datagen(_) => "datagen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::FemDemo(_) => "fem-demo",
            Command::DiffusionDemo(_) => "diffusion-demo",
            Command::DumpTokens(_) => "dump-tokens",
            Command::DumpEmbeddings(_) => "dump-embeddings",
        }
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    version: &'a str,
    started_unix_s: f64,
    elapsed_s: f64,
    status: String,
}

/// Run one command. Timestamps and timings go to `<out>/<command>.meta.json`.
pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    std::fs::create_dir_all(&g.out).map_err(io_err(&g.out))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let mut timings = Vec::new();
    let result = match &cli.command {
        Command::Datagen(a) => commands::datagen::run(g, a),
        Command::Train(a) => commands::train::run(g, a),
        Command::Eval(a) => commands::eval::run(g, a, &mut timings),
        Command::Infer(a) => commands::infer::run(g, a),
        Command::FemDemo(a) => commands::fem::run(g, a, &mut timings),
        Command::DiffusionDemo(a) => commands::diffusion::run(g, a),
        Command::DumpTokens(a) => commands::dumps::run_tokens(g, a),
        Command::DumpEmbeddings(a) => commands::dumps::run_embeddings(g, a),
    };
    let sidecar = Sidecar {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix_s: started,
        elapsed_s: clock.elapsed().as_secs_f64(),
        status: match &result {
            Ok(()) => "ok".into(),
            Err(e) => e.to_string(),
        },
    };
    let mut meta = serde_json::to_value(&sidecar).map_err(icm_core::IcmError::from)?;
    for (k, v) in timings {
        meta[k] = serde_json::json!(v);
    }
    write_json(&g.out.join(format!("{}.meta.json", cli.command.name())), &meta)?;
    result
}

/// Settings from `--config` or the defaults.
pub(crate) fn load_settings<T: DeserializeOwned + Default>(g: &GlobalArgs) -> CliResult<T> {
    match &g.config {
        None => Ok(T::default()),
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingArtifact(p.clone()));
            }
            let bytes = std::fs::read(p).map_err(io_err(p))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(icm_core::IcmError::from)?;
    write_bytes(path, &bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub(crate) fn require(path: Option<&PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = path.ok_or_else(|| CliError::Usage(format!("{what} is required")))?;
    if !p.exists() {
        return Err(CliError::MissingArtifact(p.clone()));
    }
    Ok(p.clone())
}

/// A dataset given as its manifest or its directory.
pub(crate) fn open_dataset(path: &Path) -> CliResult<(Manifest, Dataset)> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    if !manifest.exists() {
        return Err(CliError::MissingArtifact(manifest));
    }
    Ok(read_dataset(&manifest)?)
}

pub(crate) fn open_network(path: &Path) -> CliResult<Network> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let (config, params) = load_checkpoint::<NetworkConfig>(path)?;
    Ok(Network::from_parts(config, params)?)
}

/// Material index by id, or by position when `key` is a number.
pub(crate) fn material_index(ds: &Dataset, key: Option<&str>) -> CliResult<usize> {
    let Some(key) = key else { return Ok(0) };
    if let Some(i) = ds.materials.iter().position(|m| m.id == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < ds.materials.len() => Ok(i),
        _ => Err(CliError::Usage(format!("no material `{key}` in dataset"))),
    }
}
