//! Per-material equilibrium-trained energy MLP `ψ_θ(I1, I3)` used as the
//! non-transferable baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discretization::{assemble_forces, boundary_resultant, element_coefficients};
use crate::error::{IcmError, Result};
use crate::inference::{element_stresses, stress_error, FieldView};
use crate::materials::{first_pk_from_gradient, DeformationGradient2D, GradientProvider, Invariants2D, MaterialModel};
use crate::network::linalg::{matmul, matmul_a_bt_acc, matmul_at_b_acc};
use crate::network::{read_checkpoint, write_checkpoint, ParameterSet};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnnConfig {
    /// Hidden-to-hidden layers after the input layer.
    pub layers: usize,
    pub hidden: usize,
    pub boundary_weight: f64,
    pub initial_lr: f64,
    pub lr_gamma: f64,
    pub lr_step: usize,
    pub seed: u64,
}

impl EnnConfig {
    fn preset(layers: usize, hidden: usize) -> Self {
        EnnConfig { layers, hidden, boundary_weight: 0.1, initial_lr: 1e-3, lr_gamma: 0.95, lr_step: 100, seed: 0 }
    }
    pub fn tiny() -> Self {
        Self::preset(2, 32)
    }
    pub fn small() -> Self {
        Self::preset(2, 256)
    }
    pub fn medium() -> Self {
        Self::preset(8, 768)
    }
    pub fn large() -> Self {
        Self::preset(8, 1024)
    }
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "medium" => Ok(Self::medium()),
            "large" => Ok(Self::large()),
            _ => Err(IcmError::InvalidConfig(format!("unknown ENN size {name}"))),
        }
    }
}

/// StepLR: `lr0 · γ^⌊step / size⌋`.
pub fn step_lr(cfg: &EnnConfig, step: usize) -> f64 {
    cfg.initial_lr * cfg.lr_gamma.powi((step / cfg.lr_step) as i32)
}

pub fn huber(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d < 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

fn huber_grad(x: f64, y: f64) -> f64 {
    let d = x - y;
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

pub fn huber_vec(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| huber(*a, *b)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_in × fan_out`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnnModel {
    pub config: EnnConfig,
    pub layers: Vec<Layer>,
    pub input_mean: [f64; 2],
    pub input_std: [f64; 2],
    pub force_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct EnnHeader {
    model_kind: String,
    config: EnnConfig,
    input_mean: [f64; 2],
    input_std: [f64; 2],
    force_scale: f64,
}

struct Trace {
    n: usize,
    /// Activations `a_l` per layer, `a_0 = x̂`.
    a: Vec<Vec<f64>>,
    /// Tangents `t_{l,k}`.
    t: Vec<[Vec<f64>; 2]>,
    /// Pre-tangents `u_{l,k} = W_l t_{l-1,k}`.
    u: Vec<[Vec<f64>; 2]>,
}

impl EnnModel {
    pub fn new(config: EnnConfig, input_mean: [f64; 2], input_std: [f64; 2], force_scale: f64) -> Result<Self> {
        if !(force_scale > 0.0) {
            return Err(IcmError::ZeroForceScale(force_scale));
        }
        let mut rng = stream_rng(config.seed, 0x656e6e);
        let mut dims = vec![2];
        dims.extend(std::iter::repeat(config.hidden).take(config.layers + 1));
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let w_vals = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
                let b_vals = (0..w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer { fan_in: w[0], fan_out: w[1], w: w_vals, b: b_vals }
            })
            .collect();
        Ok(EnnModel { config, layers, input_mean, input_std, force_scale })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn write(&self, w: &mut impl std::io::Write) -> Result<()> {
        let header = EnnHeader {
            model_kind: "enn".into(),
            config: self.config.clone(),
            input_mean: self.input_mean,
            input_std: self.input_std,
            force_scale: self.force_scale,
        };
        let mut ps = ParameterSet::default();
        for (i, l) in self.layers.iter().enumerate() {
            ps.push(format!("layer.{i}.w"), vec![l.fan_in, l.fan_out], l.w.clone());
            ps.push(format!("layer.{i}.b"), vec![l.fan_out], l.b.clone());
        }
        write_checkpoint(w, &header, &ps)
    }

    pub fn read(r: &mut impl std::io::Read) -> Result<Self> {
        let (h, ps): (EnnHeader, ParameterSet) = read_checkpoint(r)?;
        if h.model_kind != "enn" {
            return Err(IcmError::Format(format!("checkpoint holds model kind {}", h.model_kind)));
        }
        let mut model = EnnModel::new(h.config, h.input_mean, h.input_std, h.force_scale)?;
        for (i, l) in model.layers.iter_mut().enumerate() {
            for (name, dst) in [(format!("layer.{i}.w"), &mut l.w), (format!("layer.{i}.b"), &mut l.b)] {
                let t = ps.get(&name).ok_or_else(|| IcmError::Format(format!("missing tensor {name}")))?;
                if t.data.len() != dst.len() {
                    return Err(IcmError::ShapeMismatch(name));
                }
                dst.copy_from_slice(&t.data);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn normalize(&self, inv: Invariants2D) -> [f64; 2] {
        [(inv.i1 - self.input_mean[0]) / self.input_std[0], (inv.i3 - self.input_mean[1]) / self.input_std[1]]
    }

    pub fn denormalize(&self, x: [f64; 2]) -> Invariants2D {
        Invariants2D::new(x[0] * self.input_std[0] + self.input_mean[0], x[1] * self.input_std[1] + self.input_mean[1])
    }

    fn trace(&self, inputs: &[Invariants2D]) -> (Vec<f64>, Trace) {
        let n = inputs.len();
        let x: Vec<f64> = inputs.iter().flat_map(|i| self.normalize(*i)).collect();
        let mut a = vec![x];
        let mut e0 = vec![0.0; 2 * n];
        let mut e1 = vec![0.0; 2 * n];
        for r in 0..n {
            e0[2 * r] = 1.0;
            e1[2 * r + 1] = 1.0;
        }
        let mut t = vec![[e0, e1]];
        let mut u = vec![[Vec::new(), Vec::new()]];
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (i, o) = (l.fan_in, l.fan_out);
            let mut z = vec![0.0; n * o];
            matmul(&a[li], &l.w, n, i, o, &mut z);
            for row in z.chunks_exact_mut(o) {
                for (v, b) in row.iter_mut().zip(&l.b) {
                    *v += b;
                }
            }
            let mut uk = [vec![0.0; n * o], vec![0.0; n * o]];
            for k in 0..2 {
                matmul(&t[li][k], &l.w, n, i, o, &mut uk[k]);
            }
            if li == last {
                a.push(z);
                t.push([uk[0].clone(), uk[1].clone()]);
            } else {
                let act: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
                let tk = [0, 1].map(|k| uk[k].iter().zip(&act).map(|(u, a)| u * (1.0 - a * a)).collect::<Vec<f64>>());
                a.push(act);
                t.push(tk);
            }
            u.push(uk);
        }
        let psi = a[last + 1].clone();
        (psi, Trace { n, a, t, u })
    }

    /// `ψ` and `(∂ψ/∂I1, ∂ψ/∂I3)` in raw invariant units.
    pub fn forward(&self, inputs: &[Invariants2D]) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        let (psi, tr) = self.trace(inputs);
        let last = tr.t.len() - 1;
        let g: Vec<[f64; 2]> =
            (0..tr.n).map(|r| [tr.t[last][0][r] / self.input_std[0], tr.t[last][1][r] / self.input_std[1]]).collect();
        if psi.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(IcmError::NonFiniteActivation("enn".into()));
        }
        Ok((psi, g))
    }

    /// Parameter gradients of `Σ_r ḡ_r · ∇ψ(I_r)`, as layers of (dW, db).
    fn backward(&self, tr: &Trace, gbar: &[[f64; 2]]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let n = tr.n;
        let nl = self.layers.len();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
            self.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
        // output layer (linear, 1 unit): g_k = W t_{L,k} + 0
        let mut tbar: [Vec<f64>; 2] = [0, 1].map(|k| gbar.iter().map(|g| g[k] / self.input_std[k]).collect::<Vec<f64>>());
        let mut abar = vec![0.0; n];
        for li in (0..nl).rev() {
            let l = &self.layers[li];
            let (i, o) = (l.fan_in, l.fan_out);
            let (zbar, ubar): (Vec<f64>, [Vec<f64>; 2]) = if li == nl - 1 {
                (abar.clone(), [tbar[0].clone(), tbar[1].clone()])
            } else {
                let act = &tr.a[li + 1];
                let mut sbar = vec![0.0; n * o];
                let ub = [0, 1].map(|k| {
                    let mut v = vec![0.0; n * o];
                    for j in 0..n * o {
                        let s = 1.0 - act[j] * act[j];
                        v[j] = tbar[k][j] * s;
                        sbar[j] += tbar[k][j] * tr.u[li + 1][k][j];
                    }
                    v
                });
                let zb = (0..n * o)
                    .map(|j| {
                        let a = act[j];
                        (abar[j] - 2.0 * a * sbar[j]) * (1.0 - a * a)
                    })
                    .collect();
                (zb, ub)
            };
            let (dw, db) = &mut grads[li];
            matmul_at_b_acc(&tr.a[li], &zbar, n, i, o, dw);
            for row in zbar.chunks_exact(o) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            for k in 0..2 {
                matmul_at_b_acc(&tr.t[li][k], &ubar[k], n, i, o, dw);
            }
            if li > 0 {
                let mut na = vec![0.0; n * i];
                matmul_a_bt_acc(&zbar, &l.w, n, i, o, &mut na);
                abar = na;
                tbar = [0, 1].map(|k| {
                    let mut v = vec![0.0; n * i];
                    matmul_a_bt_acc(&ubar[k], &l.w, n, i, o, &mut v);
                    v
                });
            }
        }
        grads
    }
}

impl GradientProvider for EnnModel {
    fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
        Ok(self.forward(invariants)?.1)
    }
}

/// Mean/std of `(I1, I3)` over all elements and `s_f` = mean |f| over all bcs.
pub fn training_statistics(views: &[FieldView]) -> Result<([f64; 2], [f64; 2], f64)> {
    let all: Vec<Invariants2D> = views.iter().flat_map(|v| v.invariants.iter().copied()).collect();
    let n = all.len() as f64;
    let mean = [all.iter().map(|i| i.i1).sum::<f64>() / n, all.iter().map(|i| i.i3).sum::<f64>() / n];
    let var = [
        all.iter().map(|i| (i.i1 - mean[0]).powi(2)).sum::<f64>() / n,
        all.iter().map(|i| (i.i3 - mean[1]).powi(2)).sum::<f64>() / n,
    ];
    let std = var.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
    let forces: Vec<f64> = views.iter().flat_map(|v| v.field.bcs.iter().map(|b| b.force.abs())).collect();
    let sf = if forces.is_empty() { 0.0 } else { forces.iter().sum::<f64>() / forces.len() as f64 };
    if !(sf > 0.0) {
        return Err(IcmError::ZeroForceScale(sf));
    }
    Ok((mean, std, sf))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnnLoss {
    pub interior: f64,
    pub boundary: f64,
    pub total: f64,
}

/// `L_in + w_b L_b` and its cotangent with respect to per-element gradients of each view.
pub fn enn_loss_from_gradients(
    views: &[FieldView],
    grads: &[Vec<[f64; 2]>],
    force_scale: f64,
    boundary_weight: f64,
) -> Result<(EnnLoss, Vec<Vec<[f64; 2]>>)> {
    if !(force_scale > 0.0) {
        return Err(IcmError::ZeroForceScale(force_scale));
    }
    let mut l_in = 0.0;
    let mut l_b = 0.0;
    let mut n_free = 0usize;
    let mut n_b = 0usize;
    let mut nodal_bars = Vec::with_capacity(views.len());
    let mut free_sets = Vec::with_capacity(views.len());
    for (v, g) in views.iter().zip(grads) {
        let forces = assemble_forces(v.mesh, &v.fs, g);
        let free = v.field.free_nodes(v.mesh)?;
        n_free += free.len();
        n_b += v.field.bcs.len();
        let mut bar = vec![[0.0; 2]; v.mesh.node_count()];
        for &n in &free {
            let f = [forces[n][0] / force_scale, forces[n][1] / force_scale];
            l_in += huber_vec(&f, &[0.0, 0.0]);
            bar[n] = [huber_grad(f[0], 0.0), huber_grad(f[1], 0.0)];
        }
        free_sets.push(bar);
        let mut bcs = Vec::new();
        for bc in &v.field.bcs {
            let r = boundary_resultant(v.mesh, &forces, &bc.set)?;
            let nb = v.mesh.boundary_set(&bc.set)?.len() as f64;
            let pred = (r[0] * bc.direction[0] + r[1] * bc.direction[1]) / (force_scale * nb);
            let meas = bc.force / (force_scale * nb);
            l_b += huber(pred, meas);
            bcs.push((bc.set.clone(), bc.direction, huber_grad(pred, meas) / (force_scale * nb)));
        }
        nodal_bars.push(bcs);
    }
    let n_free = n_free.max(1) as f64;
    let n_b_f = n_b.max(1) as f64;
    let interior = l_in / n_free;
    let boundary = if n_b == 0 { 0.0 } else { l_b / n_b_f };
    let total = interior + boundary_weight * boundary;
    let mut cot = Vec::with_capacity(views.len());
    for ((v, mut bar), bcs) in views.iter().zip(free_sets).zip(nodal_bars) {
        for b in bar.iter_mut() {
            b[0] /= force_scale * n_free;
            b[1] /= force_scale * n_free;
        }
        for (set, d, w) in bcs {
            for &n in v.mesh.boundary_set(&set)? {
                bar[n][0] += boundary_weight / n_b_f * w * d[0];
                bar[n][1] += boundary_weight / n_b_f * w * d[1];
            }
        }
        let mut ge = vec![[0.0; 2]; v.mesh.element_count()];
        for e in 0..v.mesh.element_count() {
            let a = element_coefficients(v.mesh, &v.fs[e], e);
            for (k, &n) in v.mesh.triangles[e].iter().enumerate() {
                let m = a[k];
                ge[e][0] += m[(0, 0)] * bar[n][0] + m[(1, 0)] * bar[n][1];
                ge[e][1] += m[(0, 1)] * bar[n][0] + m[(1, 1)] * bar[n][1];
            }
        }
        cot.push(ge);
    }
    Ok((EnnLoss { interior, boundary, total }, cot))
}

pub fn enn_loss<P: GradientProvider + ?Sized>(
    provider: &P,
    views: &[FieldView],
    force_scale: f64,
    boundary_weight: f64,
) -> Result<EnnLoss> {
    let grads = views.iter().map(|v| provider.gradients(&v.invariants)).collect::<Result<Vec<_>>>()?;
    Ok(enn_loss_from_gradients(views, &grads, force_scale, boundary_weight)?.0)
}

/// Loss and parameter gradients of the model on `views`.
fn loss_and_grads(model: &EnnModel, views: &[FieldView]) -> Result<(EnnLoss, Vec<(Vec<f64>, Vec<f64>)>)> {
    let all: Vec<Invariants2D> = views.iter().flat_map(|v| v.invariants.iter().copied()).collect();
    let (_, tr) = model.trace(&all);
    let last = tr.t.len() - 1;
    let mut grads = Vec::with_capacity(views.len());
    let mut off = 0;
    for v in views {
        let n = v.invariants.len();
        grads.push(
            (off..off + n)
                .map(|r| [tr.t[last][0][r] / model.input_std[0], tr.t[last][1][r] / model.input_std[1]])
                .collect::<Vec<_>>(),
        );
        off += n;
    }
    let (loss, cot) = enn_loss_from_gradients(views, &grads, model.force_scale, model.config.boundary_weight)?;
    if !loss.total.is_finite() {
        return Err(IcmError::NonFiniteActivation("enn loss".into()));
    }
    let gbar: Vec<[f64; 2]> = cot.into_iter().flatten().collect();
    Ok((loss, model.backward(&tr, &gbar)))
}

pub struct EnnOutcome {
    pub model: EnnModel,
    pub curve: Vec<EnnLoss>,
}

/// Adam (β = 0.9, 0.999, ε = 1e-8) with StepLR on all fields of one material.
pub fn enn_train(views: &[FieldView], config: &EnnConfig, steps: usize) -> Result<EnnOutcome> {
    let (mean, std, sf) = training_statistics(views)?;
    let mut model = EnnModel::new(config.clone(), mean, std, sf)?;
    let mut m: Vec<(Vec<f64>, Vec<f64>)> = model.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, g) = loss_and_grads(&model, views)?;
        curve.push(loss);
        let lr = step_lr(config, step);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let (mw, mb) = &mut m[li];
            let (vw, vb) = &mut v[li];
            for (p, gv, mv, vv) in [(&mut layer.w, &g[li].0, mw, vw), (&mut layer.b, &g[li].1, mb, vb)] {
                for j in 0..p.len() {
                    mv[j] = b1 * mv[j] + (1.0 - b1) * gv[j];
                    vv[j] = b2 * vv[j] + (1.0 - b2) * gv[j] * gv[j];
                    p[j] -= lr * (mv[j] / c1) / ((vv[j] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(EnnOutcome { model, curve })
}

/// Homogeneous uniaxial-stress states of `truth`: `F = diag(λ, λ2)` with `P22 = 0`.
pub fn uniaxial_states<P: GradientProvider + ?Sized>(truth: &P, stretches: &[f64]) -> Result<Vec<DeformationGradient2D>> {
    let p22 = |l: f64, l2: f64| -> Result<f64> {
        let f = DeformationGradient2D::new(l, 0.0, 0.0, l2);
        let inv = crate::materials::invariants_from_f(&f)?;
        let g = truth.gradients(&[inv])?[0];
        Ok(first_pk_from_gradient(&f, g)?.value[(1, 1)])
    };
    stretches
        .iter()
        .map(|&l| {
            // P22 increases with λ2; bracket and bisect.
            let (mut lo, mut hi) = (0.3, 1.5);
            if p22(l, lo)? > 0.0 || p22(l, hi)? < 0.0 {
                return Err(IcmError::NonConvergence { iterations: 0, residual: f64::NAN });
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if p22(l, mid)? > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(DeformationGradient2D::new(l, 0.0, 0.0, 0.5 * (lo + hi)))
        })
        .collect()
}

/// `max |P11_pred - P11_true| / max |P11_true|` over the given states.
pub fn uniaxial_curve_error<P: GradientProvider + ?Sized, Q: GradientProvider + ?Sized>(
    pred: &P,
    truth: &Q,
    states: &[DeformationGradient2D],
) -> Result<f64> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for f in states {
        let inv = crate::materials::invariants_from_f(f)?;
        let pp = first_pk_from_gradient(f, pred.gradients(&[inv])?[0])?.value[(0, 0)];
        let pt = first_pk_from_gradient(f, truth.gradients(&[inv])?[0])?.value[(0, 0)];
        num = num.max((pp - pt).abs());
        den = den.max(pt.abs());
    }
    Ok(num / den)
}

/// Field-averaged S error of the raw (not post-scaled) ENN stresses.
pub fn enn_stress_error<P: GradientProvider + ?Sized>(model: &P, views: &[FieldView], truth: &MaterialModel) -> Result<f64> {
    let mut sum = 0.0;
    for v in views {
        let (sp, _) = element_stresses(v, &model.gradients(&v.invariants)?)?;
        let (st, _) = element_stresses(v, &truth.gradients(&v.invariants)?)?;
        sum += stress_error(&sp, &st)?;
    }
    Ok(sum / views.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{generate_plate_mesh, GeometrySpec, Hole, Mesh, StrainField};
    use crate::materials::{normalize_polynomial_coefficients, sample_material_seeded, SubsetRule};
    use crate::solver::{run_load_program, LoadProgram, LoadingMode};

    fn setup() -> (Mesh, Vec<StrainField>, MaterialModel) {
        let mesh = generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h: 0.1 })
            .unwrap();
        let m = normalize_polynomial_coefficients(&sample_material_seeded(SubsetRule::PolynomialA, 8, 0).unwrap(), 0)
            .unwrap();
        let f = run_load_program(&mesh, "g", &m, &LoadProgram::new(LoadingMode::Uniaxial, 0.2, 0.0, 2).unwrap()).unwrap();
        (mesh, f, m)
    }

    #[test]
    fn huber_and_schedule() {
        assert_eq!(huber(0.0, 0.0), 0.0);
        assert_eq!(huber(0.5, 0.0), 0.125);
        assert_eq!(huber(2.0, 0.0), 1.5);
        let c = EnnConfig::tiny();
        assert_eq!(step_lr(&c, 250), 1e-3 * 0.95 * 0.95);
        assert_eq!(step_lr(&c, 99), 1e-3);
        assert_eq!(EnnConfig::small().layers, 2);
        let s = EnnModel::new(EnnConfig::small(), [0.0; 2], [1.0; 2], 1.0).unwrap();
        assert_eq!(s.parameter_count(), 132_609);
    }

    #[test]
    fn input_gradient_matches_fd_and_constant_network() {
        let model = EnnModel::new(EnnConfig::tiny(), [2.05, 1.02], [0.1, 0.05], 1.0).unwrap();
        let pts = [Invariants2D::new(2.1, 1.05), Invariants2D::new(1.95, 0.9)];
        let (_, g) = model.forward(&pts).unwrap();
        let h = 1e-6;
        for (p, gv) in pts.iter().zip(&g) {
            for k in 0..2 {
                let mut a = p.as_array();
                a[k] += h;
                let mut b = p.as_array();
                b[k] -= h;
                let fp = model.forward(&[Invariants2D::new(a[0], a[1])]).unwrap().0[0];
                let fm = model.forward(&[Invariants2D::new(b[0], b[1])]).unwrap().0[0];
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - gv[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} {}", gv[k]);
            }
        }
        let mut c = model.clone();
        let last = c.layers.last_mut().unwrap();
        last.w.iter_mut().for_each(|w| *w = 0.0);
        last.b[0] = 0.7;
        let (psi, g) = c.forward(&pts).unwrap();
        assert!(psi.iter().all(|&v| v == 0.7));
        assert!(g.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
        let x = model.normalize(pts[0]);
        let mut buf = Vec::new();
        model.write(&mut buf).unwrap();
        assert_eq!(EnnModel::read(&mut buf.as_slice()).unwrap(), model);
        let header: serde_json::Value = read_checkpoint::<serde_json::Value>(&mut buf.as_slice()).unwrap().0;
        assert_eq!(header["model_kind"], "enn");
        let back = model.denormalize(x);
        assert!((back.i1 - pts[0].i1).abs() < 1e-12 && (back.i3 - pts[0].i3).abs() < 1e-12);
    }

    #[test]
    fn parameter_gradient_matches_fd() {
        let (mesh, fields, _) = setup();
        let views: Vec<FieldView> = fields.iter().map(|f| FieldView::new(&mesh, f).unwrap()).collect();
        let (mean, std, sf) = training_statistics(&views).unwrap();
        let model = EnnModel::new(EnnConfig { hidden: 6, ..EnnConfig::tiny() }, mean, std, sf * 0.05).unwrap();
        let (_, g) = loss_and_grads(&model, &views).unwrap();
        let h = 1e-6;
        for li in 0..model.layers.len() {
            for j in (0..model.layers[li].w.len()).step_by(5) {
                let mut a = model.clone();
                a.layers[li].w[j] += h;
                let mut b = model.clone();
                b.layers[li].w[j] -= h;
                let fd = (loss_and_grads(&a, &views).unwrap().0.total - loss_and_grads(&b, &views).unwrap().0.total) / (2.0 * h);
                let an = g[li].0[j];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-6), "layer {li} w{j}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn oracle_loss_and_weights() {
        let (mesh, fields, m) = setup();
        let views: Vec<FieldView> = fields.iter().map(|f| FieldView::new(&mesh, f).unwrap()).collect();
        let (_, _, sf) = training_statistics(&views).unwrap();
        let l = enn_loss(&m, &views, sf, 0.1).unwrap();
        assert!(l.interior < 1e-16 && l.boundary < 1e-16, "{l:?}");
        let wrong = crate::materials::Scaled { inner: &m, factor: 1.5 };
        let a = enn_loss(&wrong, &views, sf, 0.1).unwrap();
        let b = enn_loss(&wrong, &views, 2.0 * sf, 0.1).unwrap();
        assert!(a.total != b.total);
        let c = enn_loss(&wrong, &views, sf, 0.0).unwrap();
        assert_eq!(c.total, c.interior);
        assert!(matches!(enn_loss(&m, &views, 0.0, 0.1), Err(IcmError::ZeroForceScale(_))));
    }

    #[test]
    fn uniaxial_states_are_traction_free_laterally() {
        let (_, _, m) = setup();
        let states = uniaxial_states(&m, &[1.0, 1.1, 1.2]).unwrap();
        for f in &states {
            let p = crate::materials::first_pk_stress(&m, f).unwrap().value;
            assert!(p[(1, 1)].abs() < 1e-9);
        }
        assert!((states[0].0[(1, 1)] - 1.0).abs() < 1e-9);
        assert_eq!(uniaxial_curve_error(&m, &m, &states).unwrap(), 0.0);
    }
}
