use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};

use icm_core::discretization::{generate_plate_mesh, GeometrySpec, Hole, StrainField};
use icm_core::inference::{element_stresses, post_scale, FieldView};
use icm_core::materials::{GradientProvider, Scaled};
use icm_core::solver::{run_load_program_with, LoadProgram, LoadingMode, SolverOptions};
use icm_core::tokenizer::{full_context, Provenance};

use super::eval::Predictor;
use super::material_tokens;
use crate::{load_settings, material_index, open_dataset, require, write_bytes, write_json, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct FemDemoArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset holding the material's context fields.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Material id or index.
    #[arg(long)]
    pub material: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FemDemoSettings {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub material: Option<String>,
    pub geometry: GeometrySpec,
    pub program: LoadProgram,
    pub solver: SolverOptions,
}

impl Default for FemDemoSettings {
    fn default() -> Self {
        FemDemoSettings {
            checkpoint: None,
            dataset: None,
            material: None,
            geometry: GeometrySpec { side: 1.0, holes: vec![Hole::ellipse(0.5, 0.5, 0.25, 0.15, 0.5)], h: 0.07 },
            program: LoadProgram { mode: LoadingMode::Uniaxial, u1: 0.3, u2: 0.0, steps: 5 },
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Serialize)]
struct StepError {
    step: usize,
    displacement_error: f64,
}

#[derive(Serialize)]
struct FemOutput {
    predictor: &'static str,
    material: String,
    alpha: f64,
    nodes: usize,
    elements: usize,
    steps: Vec<StepError>,
    /// Final-step `max_n ‖u_icm − u_true‖ / max_n ‖u_true‖`.
    displacement_error: f64,
}

/// `max_n ‖Δu^n‖ / max_n ‖u^n‖`.
pub fn displacement_error(pred: &StrainField, truth: &StrainField) -> f64 {
    let norm = |u: &[f64; 2]| u[0].hypot(u[1]);
    let num = pred.displacements.iter().zip(&truth.displacements).map(|(a, b)| norm(&[a[0] - b[0], a[1] - b[1]])).fold(0.0, f64::max);
    let den = truth.displacements.iter().map(norm).fold(0.0, f64::max);
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

pub fn run(g: &GlobalArgs, a: &FemDemoArgs, timings: &mut Vec<(String, f64)>) -> CliResult<()> {
    let mut s: FemDemoSettings = load_settings(g)?;
    if a.checkpoint.is_some() {
        s.checkpoint = a.checkpoint.clone();
    }
    if a.dataset.is_some() {
        s.dataset = a.dataset.clone();
    }
    if a.material.is_some() {
        s.material = a.material.clone();
    }
    let predictor = Predictor::open(g, s.checkpoint.as_ref())?;
    let (_, ds) = open_dataset(&require(s.dataset.as_ref(), "--dataset")?)?;
    let i = material_index(&ds, s.material.as_deref())?;
    let m = &ds.materials[i];
    let tokens = material_tokens(&ds, i)?;
    let views = ds.views(i)?;
    let refs: Vec<_> = tokens.iter().map(|t| t.as_slice()).collect();
    let ctx = full_context(&refs, Provenance { material: m.id.clone(), ..Default::default() });
    let mesh = generate_plate_mesh(&s.geometry)?;

    let t = Instant::now();
    let truth = run_load_program_with(&mesh, "demo", &m.material, &s.program, &s.solver)?.fields;
    timings.push(("truth_solve_s".into(), t.elapsed().as_secs_f64()));

    predictor.with_model(&ds, i, |model| -> CliResult<()> {
        let provider = model.provider(&ctx)?;
        let alpha = post_scale(&provider, &views)?.alpha;
        let scaled = Scaled { inner: &provider, factor: 1.0 / alpha };
        let t = Instant::now();
        let icm = run_load_program_with(&mesh, "demo", &scaled, &s.program, &s.solver)?.fields;
        timings.push(("icm_solve_s".into(), t.elapsed().as_secs_f64()));

        let steps: Vec<StepError> =
            icm.iter().zip(&truth).enumerate().map(|(k, (p, q))| StepError { step: k + 1, displacement_error: displacement_error(p, q) }).collect();
        let (p, q) = (icm.last().unwrap(), truth.last().unwrap());
        let mut csv = String::from("node,x,y,ux_icm,uy_icm,ux_true,uy_true\n");
        for (n, x) in mesh.nodes.iter().enumerate() {
            let (u, v) = (p.displacements[n], q.displacements[n]);
            let _ = writeln!(csv, "{n},{:e},{:e},{:e},{:e},{:e},{:e}", x[0], x[1], u[0], u[1], v[0], v[1]);
        }
        write_bytes(&g.out.join("displacement.csv"), csv.as_bytes())?;

        let (vp, vq) = (FieldView::new(&mesh, p)?, FieldView::new(&mesh, q)?);
        let (_, pp) = element_stresses(&vp, &scaled.gradients(&vp.invariants)?)?;
        let (_, pq) = element_stresses(&vq, &m.material.gradients(&vq.invariants)?)?;
        let mut csv = String::from("element,p11_icm,p12_icm,p21_icm,p22_icm,p11_true,p12_true,p21_true,p22_true\n");
        for (e, (x, y)) in pp.iter().zip(&pq).enumerate() {
            let _ = writeln!(csv, "{e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}", x[0], x[1], x[2], x[3], y[0], y[1], y[2], y[3]);
        }
        write_bytes(&g.out.join("stress.csv"), csv.as_bytes())?;

        let out = FemOutput {
            predictor: predictor.kind(),
            material: m.id.clone(),
            alpha,
            nodes: mesh.node_count(),
            elements: mesh.element_count(),
            displacement_error: steps.last().map(|x| x.displacement_error).unwrap_or(0.0),
            steps,
        };
        log::info!("displacement error {:.4e}", out.displacement_error);
        write_json(&g.out.join("fem_demo.json"), &out)
    })
}
