//! Post-scaling from boundary resultants, stress recovery and error metrics.

use nalgebra::Matrix2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::discretization::{assemble_forces, boundary_resultant, deformation_gradients, element_invariants, Mesh, StrainField};
use crate::error::{IcmError, Result};
use crate::materials::{
    first_pk_from_gradient, stress_from_gradient, DeformationGradient2D, GradientProvider, Invariants2D, MaterialModel,
    Scaled, StressTensor2D,
};
use crate::network::{ContextInput, Network, PreparedContext};
use crate::rng::stream_rng;
use crate::tokenizer::{Context, DeformationToken, Provenance};

/// `g_θ(𝒞)` as a gradient provider for raw invariants.
pub struct NetworkPredictor<'a> {
    pub net: &'a Network,
    prep: PreparedContext,
    center: [f64; 2],
    scale: f64,
}

impl<'a> NetworkPredictor<'a> {
    pub fn new(net: &'a Network, ctx: &Context) -> Result<Self> {
        let prep = net.prepare(&ContextInput::from_context(ctx))?;
        Ok(NetworkPredictor { net, prep, center: ctx.invariant_center, scale: ctx.invariant_scale })
    }

    pub fn prepared(&self) -> &PreparedContext {
        &self.prep
    }
}

impl GradientProvider for NetworkPredictor<'_> {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
        let q: Vec<[f64; 2]> = invariants
            .iter()
            .map(|i| [(i.i1 - self.center[0]) / self.scale, (i.i3 - self.center[1]) / self.scale])
            .collect();
        self.net.predict(&self.prep, &q)
    }
}

/// Anything that turns a context into a gradient predictor.
pub trait ContextModel {
    fn provider<'s>(&'s self, ctx: &Context) -> Result<Box<dyn GradientProvider + 's>>;
}

impl ContextModel for Network {
    fn provider<'s>(&'s self, ctx: &Context) -> Result<Box<dyn GradientProvider + 's>> {
        Ok(Box::new(NetworkPredictor::new(self, ctx)?))
    }
}

/// Ground-truth predictor `factor · ∇ψ_true`, ignoring the context.
pub struct OracleModel {
    pub material: MaterialModel,
    pub factor: f64,
}

impl ContextModel for OracleModel {
    fn provider<'s>(&'s self, _ctx: &Context) -> Result<Box<dyn GradientProvider + 's>> {
        Ok(Box::new(Scaled { inner: &self.material, factor: self.factor }))
    }
}

impl GradientProvider for Box<dyn GradientProvider + '_> {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
        (**self).gradients(invariants)
    }

    fn hessians(&self, invariants: &[Invariants2D]) -> Result<Vec<[[f64; 2]; 2]>> {
        (**self).hessians(invariants)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaAveraging {
    #[default]
    Arithmetic,
    /// Geometric mean of |α_{j,k}| carrying the sign of the arithmetic mean.
    Geometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub alpha: f64,
    pub per_bc: Vec<(usize, usize, f64)>,
    pub coefficient_of_variation: f64,
}

/// Mesh, field and the field's per-element kinematics.
pub struct FieldView<'a> {
    pub mesh: &'a Mesh,
    pub field: &'a StrainField,
    pub fs: Vec<Matrix2<f64>>,
    pub invariants: Vec<Invariants2D>,
}

impl<'a> FieldView<'a> {
    pub fn new(mesh: &'a Mesh, field: &'a StrainField) -> Result<Self> {
        field.check(mesh)?;
        let fs = deformation_gradients(mesh, &field.displacements);
        let invariants = element_invariants(&fs)?;
        Ok(FieldView { mesh, field, fs, invariants })
    }
}

/// `α_{j,k} = (Σ_{n∈ℬ_{j,k}} f̂^n)·d / f` from per-element predicted gradients.
pub fn post_scale_from_gradients(
    views: &[FieldView],
    predicted: &[Vec<[f64; 2]>],
    averaging: AlphaAveraging,
) -> Result<ScalingReport> {
    let max_f = views
        .iter()
        .flat_map(|v| v.field.bcs.iter().map(|b| b.force.abs()))
        .fold(0.0, f64::max);
    let mut per_bc = Vec::new();
    for (j, (v, g)) in views.iter().zip(predicted).enumerate() {
        if v.field.bcs.is_empty() {
            continue;
        }
        let forces = assemble_forces(v.mesh, &v.fs, g);
        for (k, bc) in v.field.bcs.iter().enumerate() {
            if !(bc.force.abs() > 1e-12 * max_f) || !bc.force.is_finite() {
                return Err(IcmError::ZeroTrueForce(format!("field {j} bc {k} ({})", bc.set)));
            }
            let r = boundary_resultant(v.mesh, &forces, &bc.set)?;
            let fhat = r[0] * bc.direction[0] + r[1] * bc.direction[1];
            per_bc.push((j, k, fhat / bc.force));
        }
    }
    if per_bc.is_empty() {
        return Err(IcmError::ZeroTrueForce("no boundary conditions".into()));
    }
    let n = per_bc.len() as f64;
    let mean = per_bc.iter().map(|x| x.2).sum::<f64>() / n;
    let std = (per_bc.iter().map(|x| (x.2 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let alpha = match averaging {
        AlphaAveraging::Arithmetic => mean,
        AlphaAveraging::Geometric => mean.signum() * (per_bc.iter().map(|x| x.2.abs().ln()).sum::<f64>() / n).exp(),
    };
    if !(alpha.abs() >= 1e-12) {
        return Err(IcmError::ZeroAlpha(alpha));
    }
    Ok(ScalingReport { alpha, per_bc, coefficient_of_variation: std / mean.abs() })
}

pub fn post_scale<P: GradientProvider + ?Sized>(provider: &P, views: &[FieldView]) -> Result<ScalingReport> {
    let predicted = views.iter().map(|v| provider.gradients(&v.invariants)).collect::<Result<Vec<_>>>()?;
    post_scale_from_gradients(views, &predicted, AlphaAveraging::Arithmetic)
}

/// Second-PK stress at `F` from `α⁻¹ g`.
pub fn predict_stress<P: GradientProvider + ?Sized>(
    provider: &P,
    alpha: f64,
    f: &DeformationGradient2D,
) -> Result<StressTensor2D> {
    let inv = crate::materials::invariants_from_f(f)?;
    let g = provider.gradients(&[inv])?[0];
    stress_from_gradient(f, [g[0] / alpha, g[1] / alpha])
}

/// Mean over elements of `sqrt(Σ_ij ((S^p_ij - S^t_ij) / range_ij)²)`, ranges from the truth.
pub fn stress_error(predicted: &[[f64; 4]], truth: &[[f64; 4]]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(IcmError::ShapeMismatch(format!("{} predicted vs {} true tensors", predicted.len(), truth.len())));
    }
    let mut inv_range = [0.0; 4];
    let mut any = false;
    for c in 0..4 {
        let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t[c]), b.max(t[c])));
        if hi - lo < 1e-14 {
            log::warn!("{} in component {c}; skipped", IcmError::DegenerateRange);
        } else {
            inv_range[c] = 1.0 / (hi - lo);
            any = true;
        }
    }
    if !any {
        return Err(IcmError::DegenerateRange);
    }
    let total: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (0..4).map(|c| ((p[c] - t[c]) * inv_range[c]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / truth.len() as f64)
}

/// `(S, P)` components per element for per-element gradients.
pub fn element_stresses(view: &FieldView, g: &[[f64; 2]]) -> Result<(Vec<[f64; 4]>, Vec<[f64; 4]>)> {
    let mut s = Vec::with_capacity(g.len());
    let mut p = Vec::with_capacity(g.len());
    for (f, gv) in view.fs.iter().zip(g) {
        let f = DeformationGradient2D(*f);
        s.push(stress_from_gradient(&f, *gv)?.components());
        p.push(first_pk_from_gradient(&f, *gv)?.components());
    }
    Ok((s, p))
}

/// Geometric mean of the finite values; 0 if any of them is 0.
pub fn geometric_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || finite.iter().any(|v| *v < 0.0) {
        return f64::NAN;
    }
    (finite.iter().map(|v| v.ln()).sum::<f64>() / finite.len() as f64).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialEvaluation {
    pub material: String,
    pub s_err: f64,
    pub p_err: f64,
    pub alpha: f64,
    pub cov: f64,
    /// `(field, bc, α_jk)` behind `alpha`.
    pub per_bc: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub per_material: Vec<MaterialEvaluation>,
    pub geo_mean_s_err: f64,
    pub geo_mean_p_err: f64,
    /// Materials whose evaluation failed, with the reason.
    pub failures: Vec<(String, String)>,
}

impl ErrorReport {
    pub fn from_results(results: Vec<(String, Result<MaterialEvaluation>)>) -> ErrorReport {
        let mut per_material = Vec::new();
        let mut failures = Vec::new();
        for (id, r) in results {
            match r {
                Ok(e) if e.s_err.is_finite() && e.p_err.is_finite() => per_material.push(e),
                Ok(e) => failures.push((id, format!("non-finite error S {} P {}", e.s_err, e.p_err))),
                Err(e) => failures.push((id, e.to_string())),
            }
        }
        let s: Vec<f64> = per_material.iter().map(|e| e.s_err).collect();
        let p: Vec<f64> = per_material.iter().map(|e| e.p_err).collect();
        ErrorReport { geo_mean_s_err: geometric_mean(&s), geo_mean_p_err: geometric_mean(&p), per_material, failures }
    }

    pub fn finite_fraction(&self) -> f64 {
        let n = self.per_material.len() + self.failures.len();
        if n == 0 {
            0.0
        } else {
            self.per_material.len() as f64 / n as f64
        }
    }
}

/// Errors of `provider` against `truth` on `views`, after post-scaling with those views' bcs.
pub fn evaluate_provider<P: GradientProvider + ?Sized>(
    provider: &P,
    views: &[FieldView],
    truth: &MaterialModel,
) -> Result<(ScalingReport, f64, f64)> {
    let predicted = views.iter().map(|v| provider.gradients(&v.invariants)).collect::<Result<Vec<_>>>()?;
    let report = post_scale_from_gradients(views, &predicted, AlphaAveraging::Arithmetic)?;
    let mut s_sum = 0.0;
    let mut p_sum = 0.0;
    for (v, g) in views.iter().zip(&predicted) {
        let scaled: Vec<[f64; 2]> = g.iter().map(|x| [x[0] / report.alpha, x[1] / report.alpha]).collect();
        let (sp, pp) = element_stresses(v, &scaled)?;
        let gt = truth.gradients(&v.invariants)?;
        let (st, pt) = element_stresses(v, &gt)?;
        s_sum += stress_error(&sp, &st)?;
        p_sum += stress_error(&pp, &pt)?;
    }
    let n = views.len() as f64;
    Ok((report, s_sum / n, p_sum / n))
}

/// Full-context evaluation of one material: every token of every field forms the context.
pub fn evaluate_material<M: ContextModel + ?Sized>(
    model: &M,
    id: &str,
    views: &[FieldView],
    tokens: &[&[DeformationToken]],
    truth: &MaterialModel,
) -> Result<MaterialEvaluation> {
    let ctx = crate::tokenizer::full_context(tokens, Provenance { material: id.to_string(), ..Default::default() });
    let provider = model.provider(&ctx)?;
    let (report, s_err, p_err) = evaluate_provider(&provider, views, truth)?;
    Ok(MaterialEvaluation {
        material: id.to_string(),
        s_err,
        p_err,
        alpha: report.alpha,
        cov: report.coefficient_of_variation,
        per_bc: report.per_bc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tokens: usize,
    pub geo_mean: f64,
    pub q25: f64,
    pub q75: f64,
    pub values: Vec<f64>,
}

impl CurvePoint {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Test-time context scaling: for each resampling, tokens of all fields are shuffled once and
/// contexts are nested prefixes of that order. P_err is measured on all fields.
pub fn context_scaling_curve<M: ContextModel + ?Sized>(
    model: &M,
    views: &[FieldView],
    tokens: &[&[DeformationToken]],
    truth: &MaterialModel,
    sizes: &[usize],
    resamplings: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if views.len() < 2 {
        return Err(IcmError::InvalidConfig("context scaling needs at least two fields".into()));
    }
    let mut pool: Vec<DeformationToken> = Vec::new();
    for (k, f) in tokens.iter().enumerate() {
        pool.extend(f.iter().cloned().map(|mut t| {
            t.field = k;
            t
        }));
    }
    let mut values = vec![Vec::with_capacity(resamplings); sizes.len()];
    for r in 0..resamplings {
        let mut rng = stream_rng(seed, r as u64);
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        for (si, &n) in sizes.iter().enumerate() {
            let n = n.min(order.len());
            let ctx = Context::new(order[..n].to_vec(), Provenance::default());
            let provider = model.provider(&ctx)?;
            let (_, _, p_err) = evaluate_provider(&provider, views, truth)?;
            values[si].push(p_err);
        }
    }
    Ok(sizes
        .iter()
        .zip(values)
        .map(|(&n, mut v)| {
            let geo = geometric_mean(&v);
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            CurvePoint { tokens: n.min(pool.len()), geo_mean: geo, q25: quantile(&v, 0.25), q75: quantile(&v, 0.75), values: v }
        })
        .collect())
}

/// Pool per-material curves point by point (same sizes in the same order).
pub fn merge_curves(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let Some(first) = curves.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| {
            let mut v: Vec<f64> = curves.iter().flat_map(|c| c[i].values.iter().copied()).collect();
            let geo = geometric_mean(&v);
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let tokens = curves.iter().map(|c| c[i].tokens).min().unwrap_or(0);
            CurvePoint { tokens, geo_mean: geo, q25: quantile(&v, 0.25), q75: quantile(&v, 0.75), values: v }
        })
        .collect()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
