use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use icm_core::dataset::{generate, write_dataset, DatagenConfig, MaterialGroup};
use icm_core::discretization::{GeometrySpec, Hole};
use icm_core::materials::SubsetRule;
use icm_core::solver::{LoadProgram, LoadingMode};

use crate::error::io_err;
use crate::{load_settings, write_json, CliError, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct DatagenArgs {
    /// Material group `RULE:COUNT[@FIRST]`, e.g. `polynomial-a:5@1000`. Repeatable; replaces the configured groups.
    #[arg(long = "group")]
    pub groups: Vec<String>,
    /// Prefix of material ids.
    #[arg(long)]
    pub prefix: Option<String>,
    /// Load steps of every program.
    #[arg(long)]
    pub load_steps: Option<usize>,
    /// Failed-solve fraction above which the command exits with code 3.
    #[arg(long)]
    pub failure_limit: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSettings {
    pub dataset: DatagenConfig,
    pub failure_limit: f64,
}

/// The toy training set: 20 normalized polynomial materials, one holed plate, uniaxial in 5 steps.
pub fn toy_config() -> DatagenConfig {
    DatagenConfig {
        seed: 0,
        materials: vec![MaterialGroup { rule: SubsetRule::PolynomialA, count: 20, normalize: true, first_index: 0 }],
        geometries: vec![GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h: 0.07 }],
        programs: vec![LoadProgram { mode: LoadingMode::Uniaxial, u1: 0.3, u2: 0.0, steps: 5 }],
        prefix: "m".into(),
    }
}

impl Default for DatagenSettings {
    fn default() -> Self {
        DatagenSettings { dataset: toy_config(), failure_limit: 0.2 }
    }
}

pub fn parse_group(s: &str) -> CliResult<MaterialGroup> {
    let bad = || CliError::Usage(format!("material group `{s}` is not RULE:COUNT[@FIRST]"));
    let (rule, rest) = s.split_once(':').ok_or_else(bad)?;
    let (count, first) = match rest.split_once('@') {
        Some((c, f)) => (c, f.parse::<u64>().map_err(|_| bad())?),
        None => (rest, 0),
    };
    Ok(MaterialGroup {
        rule: SubsetRule::from_name(rule)?,
        count: count.parse().map_err(|_| bad())?,
        normalize: true,
        first_index: first,
    })
}

#[derive(Serialize)]
struct Summary {
    manifest: String,
    manifest_sha256: String,
    materials: usize,
    fields: usize,
    attempted: usize,
    failed: usize,
}

pub fn run(g: &GlobalArgs, a: &DatagenArgs) -> CliResult<()> {
    let mut s: DatagenSettings = load_settings(g)?;
    if let Some(seed) = g.seed {
        s.dataset.seed = seed;
    }
    if !a.groups.is_empty() {
        s.dataset.materials = a.groups.iter().map(|x| parse_group(x)).collect::<CliResult<_>>()?;
    }
    if let Some(p) = &a.prefix {
        s.dataset.prefix = p.clone();
    }
    if let Some(n) = a.load_steps {
        for p in &mut s.dataset.programs {
            p.steps = n;
        }
    }
    if let Some(l) = a.failure_limit {
        s.failure_limit = l;
    }
    let ds = generate(&s.dataset, g.threads.unwrap_or(1).max(1))?;
    for f in &ds.failures {
        log::warn!("solve failed: {} geometry {} {}: {}", f.material, f.geometry, f.mode.name(), f.reason);
    }
    let manifest = write_dataset(&g.out, &s.dataset, &ds)?;
    let bytes = std::fs::read(&manifest).map_err(io_err(&manifest))?;
    let summary = Summary {
        manifest: "manifest.json".into(),
        manifest_sha256: hex::encode(Sha256::digest(&bytes)),
        materials: ds.materials.len(),
        fields: ds.materials.iter().map(|m| m.fields.len()).sum(),
        attempted: ds.attempted,
        failed: ds.failures.len(),
    };
    write_json(&g.out.join("datagen_summary.json"), &summary)?;
    log::info!("{} fields of {} materials, {} of {} solves failed", summary.fields, summary.materials, summary.failed, summary.attempted);
    if ds.failure_fraction() > s.failure_limit {
        return Err(CliError::DatasetFailures { failed: ds.failures.len(), attempted: ds.attempted, limit: s.failure_limit });
    }
    Ok(())
}
