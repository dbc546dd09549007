use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use icm_core::network::{save_checkpoint, NetworkConfig};
use icm_core::tokenizer::SamplingBounds;
use icm_core::training::{train, write_loss_csv, OptimizerConfig, OptimizerKind, ScheduleConfig, TrainConfig};

use crate::error::io_err;
use crate::{load_settings, open_dataset, require, write_bytes, write_json, CliError, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training dataset (manifest or directory).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Network preset: toy, small or default.
    #[arg(long)]
    pub network: Option<String>,
    /// adamw or muon.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Peak learning rate.
    #[arg(long)]
    pub peak_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSpec {
    Preset(String),
    Config(NetworkConfig),
}

impl NetworkSpec {
    pub fn resolve(&self) -> CliResult<NetworkConfig> {
        match self {
            NetworkSpec::Config(c) => Ok(c.clone()),
            NetworkSpec::Preset(p) => match p.as_str() {
                "toy" => Ok(NetworkConfig::toy()),
                "small" => Ok(NetworkConfig::small()),
                "default" => Ok(NetworkConfig::default()),
                _ => Err(CliError::Usage(format!("unknown network preset `{p}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub dataset: Option<PathBuf>,
    pub network: NetworkSpec,
    /// Defaults to warmup and cosine decay over `steps`.
    pub schedule: Option<ScheduleConfig>,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub sampling: SamplingBounds,
    pub accumulate: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            dataset: None,
            network: NetworkSpec::Preset("toy".into()),
            schedule: None,
            steps: 5000,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            sampling: SamplingBounds::default(),
            accumulate: 1,
        }
    }
}

pub fn run(g: &GlobalArgs, a: &TrainArgs) -> CliResult<()> {
    if g.oracle {
        return Err(CliError::Usage("--oracle has nothing to train".into()));
    }
    let mut s: TrainSettings = load_settings(g)?;
    if a.dataset.is_some() {
        s.dataset = a.dataset.clone();
    }
    if let Some(n) = a.steps {
        s.steps = n;
    }
    if let Some(n) = &a.network {
        s.network = NetworkSpec::Preset(n.clone());
    }
    if let Some(o) = &a.optimizer {
        s.optimizer.kind = match o.as_str() {
            "adamw" => OptimizerKind::Adamw,
            "muon" => OptimizerKind::Muon,
            _ => return Err(CliError::Usage(format!("unknown optimizer `{o}`"))),
        };
    }
    let mut network = s.network.resolve()?;
    if let Some(seed) = g.seed {
        s.seed = seed;
        network.seed = seed;
    }
    let mut schedule = s.schedule.clone().unwrap_or_else(|| ScheduleConfig::new(s.steps));
    if let Some(lr) = a.peak_lr {
        schedule.peak_lr = lr;
    }
    let config = TrainConfig {
        network,
        schedule,
        steps: s.steps,
        seed: s.seed,
        optimizer: s.optimizer.clone(),
        sampling: s.sampling.clone(),
        accumulate: s.accumulate,
    };

    let path = require(s.dataset.as_ref(), "--dataset")?;
    let (_, ds) = open_dataset(&path)?;
    let tokens = ds.tokenize()?;
    let tds = ds.token_dataset(&tokens);
    let ckpt = g.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;
    let outcome = train(&tds, &config, Some(&ckpt))?;
    save_checkpoint(&g.out.join("model.bin"), &outcome.network.config, &outcome.network.params)?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &outcome.curve)?;
    write_bytes(&g.out.join("loss.csv"), &csv)?;
    write_json(&g.out.join("train_config.json"), &config)?;
    if outcome.skipped > 0 {
        log::warn!("{} steps skipped", outcome.skipped);
    }
    Ok(())
}
