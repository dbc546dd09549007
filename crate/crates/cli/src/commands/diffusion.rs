use clap::Args;
use serde::{Deserialize, Serialize};

use icm_core::diffusion::{
    affine_residual, boundary_reactions, domain_boundary_nodes, max_relative_residual, simulate, tokenize_diffusion,
    total_content, write_diffusion_dump, write_series, DiffusionOptions, DiffusivityModel,
};
use icm_core::discretization::{generate_plate_mesh, GeometrySpec, Hole};

use crate::{load_settings, write_bytes, write_json, CliError, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct DiffusionDemoArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub geometry: GeometrySpec,
    pub diffusivity: DiffusivityModel,
    /// Boundary value and peak of the initial Gaussian bump.
    pub background: f64,
    pub peak: f64,
    pub bump_center: [f64; 2],
    pub bump_width: f64,
    pub dt: f64,
    pub steps: usize,
    pub solver: DiffusionOptions,
    /// Factor applied to D for the wrong-model residual.
    pub wrong_scale: f64,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        DiffusionSettings {
            geometry: GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h: 0.08 },
            diffusivity: DiffusivityModel { d11: vec![0.05, 0.1, 0.05], d12: vec![0.01, 0.02], d22: vec![0.03, 0.05] },
            background: 0.2,
            peak: 1.0,
            bump_center: [0.25, 0.3],
            bump_width: 0.1,
            dt: 0.02,
            steps: 10,
            solver: DiffusionOptions::default(),
            wrong_scale: 1.3,
        }
    }
}

#[derive(Serialize)]
struct DiffusionReport {
    nodes: usize,
    interior_nodes: usize,
    steps: usize,
    tokens: usize,
    /// Worst token residual for the true D, relative to the step's largest token magnitude.
    max_relative_residual: f64,
    /// Same measure for D scaled by `wrong_scale`.
    wrong_model_residual: f64,
    /// Largest gap between the generic affine evaluator and the token's own residual, relative.
    generic_deviation: f64,
    /// Largest relative gap between content change and boundary flux over the steps.
    mass_balance_error: f64,
}

pub fn run(g: &GlobalArgs, a: &DiffusionDemoArgs) -> CliResult<()> {
    if g.oracle {
        return Err(CliError::Usage("--oracle does not apply to the diffusion demo".into()));
    }
    let mut s: DiffusionSettings = load_settings(g)?;
    if let Some(n) = a.steps {
        s.steps = n;
    }
    if let Some(dt) = a.dt {
        s.dt = dt;
    }
    if s.steps == 0 || !(s.dt > 0.0) {
        return Err(CliError::Usage("diffusion demo needs steps ≥ 1 and dt > 0".into()));
    }
    let mesh = generate_plate_mesh(&s.geometry)?;
    let on = domain_boundary_nodes(&mesh);
    let c0: Vec<f64> = mesh
        .nodes
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let r2 = (p[0] - s.bump_center[0]).powi(2) + (p[1] - s.bump_center[1]).powi(2);
            if on[k] {
                s.background
            } else {
                s.background + s.peak * (-r2 / (2.0 * s.bump_width * s.bump_width)).exp()
            }
        })
        .collect();
    let series = simulate(&mesh, &s.diffusivity, c0, s.dt, s.steps, &s.solver)?;
    let tokens = tokenize_diffusion(&mesh, &series)?;

    let mut generic_deviation = 0.0f64;
    for t in &tokens {
        let (r, scale) = t.residual(&s.diffusivity)?;
        let generic = affine_residual(&t.affine(&s.diffusivity)?)?[0];
        if scale > 0.0 {
            generic_deviation = generic_deviation.max((generic - r).abs() / scale);
        }
    }
    let mut mass_balance_error = 0.0f64;
    for m in 1..series.values.len() {
        let change = total_content(&mesh, &series.values[m]) - total_content(&mesh, &series.values[m - 1]);
        let dt = series.dt[m - 1];
        let flux: f64 =
            boundary_reactions(&mesh, &s.diffusivity, &series.values[m - 1], &series.values[m], dt)?.iter().map(|(_, r)| r * dt).sum();
        if change != 0.0 {
            mass_balance_error = mass_balance_error.max((change - flux).abs() / change.abs());
        }
    }
    let report = DiffusionReport {
        nodes: mesh.node_count(),
        interior_nodes: on.iter().filter(|b| !**b).count(),
        steps: s.steps,
        tokens: tokens.len(),
        max_relative_residual: max_relative_residual(&tokens, &s.diffusivity)?,
        wrong_model_residual: max_relative_residual(&tokens, &s.diffusivity.scaled(s.wrong_scale))?,
        generic_deviation,
        mass_balance_error,
    };

    let mut buf = Vec::new();
    write_series(&mut buf, &series)?;
    write_bytes(&g.out.join("series.difs"), &buf)?;
    let mut buf = Vec::new();
    write_diffusion_dump(&mut buf, &tokens)?;
    write_bytes(&g.out.join("tokens.dift"), &buf)?;
    log::info!("token residual {:.3e}, wrong model {:.3e}", report.max_relative_residual, report.wrong_model_residual);
    write_json(&g.out.join("diffusion_report.json"), &report)
}
