use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use icm_core::enn::uniaxial_states;
use icm_core::inference::{element_stresses, post_scale, stress_error};
use icm_core::materials::{first_pk_from_gradient, invariants_from_f, GradientProvider, Scaled};
use icm_core::tokenizer::{full_context, Provenance};

use super::eval::Predictor;
use super::material_tokens;
use crate::{load_settings, material_index, open_dataset, require, write_bytes, write_json, CliError, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Material id or index.
    #[arg(long)]
    pub material: Option<String>,
    /// Use only the first N fields of the material as context.
    #[arg(long)]
    pub context_fields: Option<usize>,
    /// Largest stretch of the uniaxial query.
    #[arg(long)]
    pub max_stretch: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSettings {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub material: Option<String>,
    pub context_fields: Option<usize>,
    pub max_stretch: f64,
    pub curve_points: usize,
}

impl Default for InferSettings {
    fn default() -> Self {
        InferSettings { checkpoint: None, dataset: None, material: None, context_fields: None, max_stretch: 1.3, curve_points: 11 }
    }
}

#[derive(Serialize)]
struct FieldResult {
    field: String,
    s_err: f64,
    p_err: f64,
}

#[derive(Serialize)]
struct InferOutput {
    predictor: &'static str,
    material: String,
    context_fields: usize,
    context_tokens: usize,
    alpha: f64,
    cov: f64,
    s_err: f64,
    p_err: f64,
    fields: Vec<FieldResult>,
    curve_error: f64,
}

pub fn run(g: &GlobalArgs, a: &InferArgs) -> CliResult<()> {
    let mut s: InferSettings = load_settings(g)?;
    if a.checkpoint.is_some() {
        s.checkpoint = a.checkpoint.clone();
    }
    if a.dataset.is_some() {
        s.dataset = a.dataset.clone();
    }
    if a.material.is_some() {
        s.material = a.material.clone();
    }
    if a.context_fields.is_some() {
        s.context_fields = a.context_fields;
    }
    if let Some(x) = a.max_stretch {
        s.max_stretch = x;
    }
    if s.curve_points < 2 || !(s.max_stretch > 1.0) {
        return Err(CliError::Usage("the uniaxial query needs ≥ 2 points and max_stretch > 1".into()));
    }
    let predictor = Predictor::open(g, s.checkpoint.as_ref())?;
    let (_, ds) = open_dataset(&require(s.dataset.as_ref(), "--dataset")?)?;
    let i = material_index(&ds, s.material.as_deref())?;
    let m = &ds.materials[i];
    let tokens = material_tokens(&ds, i)?;
    let views = ds.views(i)?;
    let k = s.context_fields.unwrap_or(tokens.len()).clamp(1, tokens.len());
    let refs: Vec<_> = tokens[..k].iter().map(|t| t.as_slice()).collect();
    let ctx = full_context(&refs, Provenance { material: m.id.clone(), fields: m.fields[..k].iter().map(|f| f.id.clone()).collect(), seed: None });

    predictor.with_model(&ds, i, |model| -> CliResult<()> {
        let provider = model.provider(&ctx)?;
        // α comes from the context fields only
        let scaling = post_scale(&provider, &views[..k])?;
        let scaled = Scaled { inner: &provider, factor: 1.0 / scaling.alpha };
        let mut fields = Vec::new();
        for (v, f) in views.iter().zip(&m.fields) {
            let (sp, pp) = element_stresses(v, &scaled.gradients(&v.invariants)?)?;
            let (st, pt) = element_stresses(v, &m.material.gradients(&v.invariants)?)?;
            let mut csv = String::from("element,s11_pred,s12_pred,s22_pred,s11_true,s12_true,s22_true\n");
            for (e, (x, y)) in sp.iter().zip(&st).enumerate() {
                let _ = writeln!(csv, "{e},{:e},{:e},{:e},{:e},{:e},{:e}", x[0], x[1], x[3], y[0], y[1], y[3]);
            }
            write_bytes(&g.out.join(format!("stress_{}.csv", f.id)), csv.as_bytes())?;
            fields.push(FieldResult { field: f.id.clone(), s_err: stress_error(&sp, &st)?, p_err: stress_error(&pp, &pt)? });
        }
        let s_err = fields.iter().map(|f| f.s_err).sum::<f64>() / fields.len() as f64;
        let p_err = fields.iter().map(|f| f.p_err).sum::<f64>() / fields.len() as f64;

        let n = s.curve_points;
        let stretches: Vec<f64> = (0..n).map(|j| 1.0 + (s.max_stretch - 1.0) * j as f64 / (n - 1) as f64).collect();
        let states = uniaxial_states(&m.material, &stretches)?;
        let mut csv = String::from("lambda,lambda2,p11_pred,p11_true\n");
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for f in &states {
            let inv = invariants_from_f(f)?;
            let pred = first_pk_from_gradient(f, scaled.gradients(&[inv])?[0])?.value[(0, 0)];
            let truth = first_pk_from_gradient(f, m.material.gradients(&[inv])?[0])?.value[(0, 0)];
            num = num.max((pred - truth).abs());
            den = den.max(truth.abs());
            let _ = writeln!(csv, "{:e},{:e},{:e},{:e}", f.0[(0, 0)], f.0[(1, 1)], pred, truth);
        }
        write_bytes(&g.out.join("pl_curve.csv"), csv.as_bytes())?;
        write_json(
            &g.out.join("pl_curve_plot.json"),
            &serde_json::json!({"kind": "line", "data": "pl_curve.csv", "x": "lambda", "y": ["p11_pred", "p11_true"]}),
        )?;
        write_json(
            &g.out.join("infer.json"),
            &InferOutput {
                predictor: predictor.kind(),
                material: m.id.clone(),
                context_fields: k,
                context_tokens: ctx.tokens.len(),
                alpha: scaling.alpha,
                cov: scaling.coefficient_of_variation,
                s_err,
                p_err,
                fields,
                curve_error: if den > 0.0 { num / den } else { 0.0 },
            },
        )
    })
}
