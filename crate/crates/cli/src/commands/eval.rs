use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use icm_core::dataset::Dataset;
use icm_core::enn::{enn_stress_error, enn_train, EnnConfig};
use icm_core::inference::{
    context_scaling_curve, evaluate_material, merge_curves, spearman, ContextModel, CurvePoint, ErrorReport,
    MaterialEvaluation, OracleModel,
};
use icm_core::network::Network;
use icm_core::tokenizer::DeformationToken;

use super::material_tokens;
use crate::{load_settings, open_dataset, open_network, require, write_bytes, write_json, CliError, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test set `NAME=PATH`. Repeatable; replaces the configured sets.
    #[arg(long = "set")]
    pub sets: Vec<String>,
    /// Set on which to measure the context-scaling curve.
    #[arg(long)]
    pub curve_set: Option<String>,
    /// Comma-separated context sizes in tokens.
    #[arg(long, value_delimiter = ',')]
    pub curve_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub resamplings: Option<usize>,
    /// Set on which to train and evaluate per-material ENN baselines.
    #[arg(long)]
    pub enn_set: Option<String>,
    /// ENN size: tiny, small, medium or large.
    #[arg(long)]
    pub enn_size: Option<String>,
    #[arg(long)]
    pub enn_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub name: String,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSettings {
    pub set: String,
    pub sizes: Vec<usize>,
    pub resamplings: usize,
    pub seed: u64,
}

impl Default for CurveSettings {
    fn default() -> Self {
        CurveSettings { set: String::new(), sizes: vec![10, 20, 40, 80, 160, 320], resamplings: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnnSettings {
    pub set: String,
    pub size: String,
    pub steps: usize,
}

impl Default for EnnSettings {
    fn default() -> Self {
        EnnSettings { set: String::new(), size: "tiny".into(), steps: 2000 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub sets: Vec<EvalSet>,
    pub curve: Option<CurveSettings>,
    pub enn: Option<EnnSettings>,
}

/// The network, or the true gradient of each material.
pub(crate) enum Predictor {
    Network(Network),
    Oracle,
}

impl Predictor {
    pub(crate) fn open(g: &GlobalArgs, checkpoint: Option<&PathBuf>) -> CliResult<Predictor> {
        if g.oracle {
            Ok(Predictor::Oracle)
        } else {
            Ok(Predictor::Network(open_network(&require(checkpoint, "--checkpoint")?)?))
        }
    }

    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Predictor::Network(_) => "network",
            Predictor::Oracle => "oracle",
        }
    }

    /// Run `f` with the context model for material `i` of `ds`.
    pub(crate) fn with_model<T>(&self, ds: &Dataset, i: usize, f: impl FnOnce(&dyn ContextModel) -> T) -> T {
        match self {
            Predictor::Network(n) => f(n),
            Predictor::Oracle => f(&OracleModel { material: ds.materials[i].material.clone(), factor: 1.0 }),
        }
    }
}

#[derive(Serialize)]
struct SetReport {
    name: String,
    report: ErrorReport,
}

#[derive(Serialize)]
struct CurveReport {
    set: String,
    spearman: f64,
    iqr_smallest: f64,
    iqr_largest: f64,
    points: Vec<CurvePoint>,
}

#[derive(Serialize)]
struct EnnEntry {
    material: String,
    enn_s_err: f64,
    icm_s_err: Option<f64>,
}

#[derive(Serialize)]
struct EvalOutput {
    predictor: &'static str,
    sets: Vec<SetReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    curve: Option<CurveReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    enn: Option<Vec<EnnEntry>>,
}

fn refs(tokens: &[Vec<DeformationToken>]) -> Vec<&[DeformationToken]> {
    tokens.iter().map(|t| t.as_slice()).collect()
}

pub fn parse_set(s: &str) -> CliResult<EvalSet> {
    let (name, path) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("test set `{s}` is not NAME=PATH")))?;
    Ok(EvalSet { name: name.into(), dataset: path.into() })
}

/// Error report of every material in `ds`.
pub(crate) fn evaluate_dataset(p: &Predictor, ds: &Dataset) -> CliResult<ErrorReport> {
    let mut results = Vec::new();
    for (i, m) in ds.materials.iter().enumerate() {
        let tokens = material_tokens(ds, i)?;
        let views = ds.views(i)?;
        let r: icm_core::Result<MaterialEvaluation> =
            p.with_model(ds, i, |model| evaluate_material(model, &m.id, &views, &refs(&tokens), &m.material));
        results.push((m.id.clone(), r));
    }
    Ok(ErrorReport::from_results(results))
}

/// Context-scaling curve pooled over the materials of `ds`.
pub(crate) fn dataset_curve(p: &Predictor, ds: &Dataset, c: &CurveSettings) -> CliResult<Vec<CurvePoint>> {
    let mut curves = Vec::new();
    for (i, m) in ds.materials.iter().enumerate() {
        let tokens = material_tokens(ds, i)?;
        let views = ds.views(i)?;
        let seed = c.seed.wrapping_add(i as u64);
        let curve = p.with_model(ds, i, |model| {
            context_scaling_curve(model, &views, &refs(&tokens), &m.material, &c.sizes, c.resamplings, seed)
        })?;
        curves.push(curve);
    }
    Ok(merge_curves(&curves))
}

pub fn run(g: &GlobalArgs, a: &EvalArgs, timings: &mut Vec<(String, f64)>) -> CliResult<()> {
    let mut s: EvalSettings = load_settings(g)?;
    if a.checkpoint.is_some() {
        s.checkpoint = a.checkpoint.clone();
    }
    if !a.sets.is_empty() {
        s.sets = a.sets.iter().map(|x| parse_set(x)).collect::<CliResult<_>>()?;
    }
    if a.curve_set.is_some() || a.curve_sizes.is_some() || a.resamplings.is_some() {
        let c = s.curve.get_or_insert_with(CurveSettings::default);
        if let Some(x) = &a.curve_set {
            c.set = x.clone();
        }
        if let Some(x) = &a.curve_sizes {
            c.sizes = x.clone();
        }
        if let Some(x) = a.resamplings {
            c.resamplings = x;
        }
    }
    if a.enn_set.is_some() || a.enn_size.is_some() || a.enn_steps.is_some() {
        let e = s.enn.get_or_insert_with(EnnSettings::default);
        if let Some(x) = &a.enn_set {
            e.set = x.clone();
        }
        if let Some(x) = &a.enn_size {
            e.size = x.clone();
        }
        if let Some(x) = a.enn_steps {
            e.steps = x;
        }
    }
    if let (Some(seed), Some(c)) = (g.seed, s.curve.as_mut()) {
        c.seed = seed;
    }
    if s.sets.is_empty() {
        return Err(CliError::Usage("at least one --set NAME=PATH is required".into()));
    }
    let predictor = Predictor::open(g, s.checkpoint.as_ref())?;

    let mut datasets = Vec::new();
    for set in &s.sets {
        datasets.push(open_dataset(&set.dataset)?.1);
    }
    let find = |name: &str| -> CliResult<usize> {
        if name.is_empty() {
            return Ok(0);
        }
        s.sets.iter().position(|x| x.name == name).ok_or_else(|| CliError::Usage(format!("no test set `{name}`")))
    };

    let mut sets = Vec::new();
    let mut csv = String::from("set,material,s_err,p_err,alpha,cov\n");
    for (set, ds) in s.sets.iter().zip(&datasets) {
        let t = Instant::now();
        let report = evaluate_dataset(&predictor, ds)?;
        timings.push((format!("icm_eval_{}_s", set.name), t.elapsed().as_secs_f64()));
        for e in &report.per_material {
            let _ = writeln!(csv, "{},{},{:e},{:e},{:e},{:e}", set.name, e.material, e.s_err, e.p_err, e.alpha, e.cov);
        }
        log::info!("{}: geometric-mean S_err {:.4e}, {} failures", set.name, report.geo_mean_s_err, report.failures.len());
        sets.push(SetReport { name: set.name.clone(), report });
    }
    write_bytes(&g.out.join("errors.csv"), csv.as_bytes())?;
    write_json(
        &g.out.join("errors_plot.json"),
        &serde_json::json!({"kind": "bar", "data": "errors.csv", "group": "set", "y": "s_err", "aggregate": "geometric-mean", "log_y": true}),
    )?;

    let mut curve = None;
    if let Some(c) = &s.curve {
        let k = find(&c.set)?;
        if c.sizes.len() < 2 {
            return Err(CliError::Usage("the context-scaling curve needs at least two sizes".into()));
        }
        let points = dataset_curve(&predictor, &datasets[k], c)?;
        let mut out = String::from("tokens,geo_mean,q25,q75\n");
        for p in &points {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", p.tokens, p.geo_mean, p.q25, p.q75);
        }
        write_bytes(&g.out.join("curve.csv"), out.as_bytes())?;
        write_json(
            &g.out.join("curve_plot.json"),
            &serde_json::json!({"kind": "line", "data": "curve.csv", "x": "tokens", "y": "geo_mean", "band": ["q25", "q75"], "log_x": true, "log_y": true}),
        )?;
        let x: Vec<f64> = points.iter().map(|p| p.tokens as f64).collect();
        let y: Vec<f64> = points.iter().map(|p| p.geo_mean).collect();
        curve = Some(CurveReport {
            set: s.sets[k].name.clone(),
            spearman: spearman(&x, &y),
            iqr_smallest: points[0].iqr(),
            iqr_largest: points[points.len() - 1].iqr(),
            points,
        });
    }

    let mut enn = None;
    if let Some(e) = &s.enn {
        let k = find(&e.set)?;
        let ds = &datasets[k];
        let config = EnnConfig::from_name(&e.size)?;
        let mut entries = Vec::new();
        let mut train_time = 0.0;
        for (i, m) in ds.materials.iter().enumerate() {
            let views = ds.views(i)?;
            let t = Instant::now();
            let outcome = enn_train(&views, &config, e.steps)?;
            train_time += t.elapsed().as_secs_f64();
            let icm = sets[k].report.per_material.iter().find(|x| x.material == m.id).map(|x| x.s_err);
            entries.push(EnnEntry {
                material: m.id.clone(),
                enn_s_err: enn_stress_error(&outcome.model, &views, &m.material)?,
                icm_s_err: icm,
            });
        }
        timings.push(("enn_train_s".into(), train_time));
        enn = Some(entries);
    }

    write_json(&g.out.join("eval.json"), &EvalOutput { predictor: predictor.kind(), sets, curve, enn })
}
