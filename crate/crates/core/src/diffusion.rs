//! Backward-Euler nonlinear diffusion on triangle meshes and its tokenization
//! into affine constraints `Σ_e A^{n,e,m} : D(c^{e,m}) = b^{n,m}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::discretization::Mesh;
use crate::error::{IcmError, Result};
use crate::solver::{rcm_order, Banded};
use crate::tokenizer::{read_f64, read_u32, DeformationToken};

/// `D_ij(c) = Σ_k a_ij[k] c^k` for the three independent components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusivityModel {
    pub d11: Vec<f64>,
    pub d12: Vec<f64>,
    pub d22: Vec<f64>,
}

fn poly(a: &[f64], c: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut dv = 0.0;
    for &k in a.iter().rev() {
        dv = dv * c + v;
        v = v * c + k;
    }
    (v, dv)
}

impl DiffusivityModel {
    pub fn isotropic(d: f64) -> Self {
        DiffusivityModel { d11: vec![d], d12: vec![0.0], d22: vec![d] }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let f = |a: &[f64]| a.iter().map(|v| v * s).collect();
        DiffusivityModel { d11: f(&self.d11), d12: f(&self.d12), d22: f(&self.d22) }
    }

    /// `D(c)`, failing when it is not positive definite.
    pub fn eval(&self, c: f64) -> Result<[[f64; 2]; 2]> {
        let (a, b, d) = (poly(&self.d11, c).0, poly(&self.d12, c).0, poly(&self.d22, c).0);
        if !(a > 0.0 && a * d - b * b > 0.0) {
            return Err(IcmError::DomainViolation(format!("diffusivity not positive definite at c = {c}")));
        }
        Ok([[a, b], [b, d]])
    }
}

/// Nodes on edges used by exactly one triangle (outer edges and hole rims).
pub fn domain_boundary_nodes(mesh: &Mesh) -> Vec<bool> {
    let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edges.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut on = vec![false; mesh.node_count()];
    for ((a, b), n) in edges {
        if n == 1 {
            on[a] = true;
            on[b] = true;
        }
    }
    on
}

/// Consistent mass of a linear triangle applied to nodal values.
fn element_mass_apply(w: f64, v: [f64; 3]) -> [f64; 3] {
    let s = v[0] + v[1] + v[2];
    [w / 12.0 * (v[0] + s), w / 12.0 * (v[1] + s), w / 12.0 * (v[2] + s)]
}

fn element_values(mesh: &Mesh, c: &[f64], e: usize) -> [f64; 3] {
    let t = mesh.triangles[e];
    [c[t[0]], c[t[1]], c[t[2]]]
}

fn element_gradient(mesh: &Mesh, c: &[f64], e: usize) -> [f64; 2] {
    let t = mesh.triangles[e];
    let g = &mesh.grads[e];
    // differences against the first vertex keep constant fields exactly gradient-free
    let mut out = [0.0; 2];
    for k in 1..3 {
        let dc = c[t[k]] - c[t[0]];
        out[0] += g[k][0] * dc;
        out[1] += g[k][1] * dc;
    }
    out
}

/// Nodal transient part `M(c − c_prev)/Δt` and flux part `Σ_e w^e ∇𝖭^n · D(c^e) ∇c^e`.
fn residual_parts(mesh: &Mesh, model: &DiffusivityModel, c_prev: &[f64], c: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = mesh.node_count();
    let mut mass = vec![0.0; n];
    let mut flux = vec![0.0; n];
    for e in 0..mesh.element_count() {
        let t = mesh.triangles[e];
        let cv = element_values(mesh, c, e);
        let pv = element_values(mesh, c_prev, e);
        let m = element_mass_apply(mesh.areas[e], [cv[0] - pv[0], cv[1] - pv[1], cv[2] - pv[2]]);
        let d = model.eval((cv[0] + cv[1] + cv[2]) / 3.0)?;
        let gc = element_gradient(mesh, c, e);
        let q = [d[0][0] * gc[0] + d[0][1] * gc[1], d[1][0] * gc[0] + d[1][1] * gc[1]];
        for k in 0..3 {
            let g = mesh.grads[e][k];
            mass[t[k]] += m[k] / dt;
            flux[t[k]] += mesh.areas[e] * (g[0] * q[0] + g[1] * q[1]);
        }
    }
    Ok((mass, flux))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionStepReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionOptions {
    pub rel_tol: f64,
    pub max_iterations: usize,
}

impl Default for DiffusionOptions {
    fn default() -> Self {
        DiffusionOptions { rel_tol: 1e-10, max_iterations: 200 }
    }
}

struct InteriorSystem {
    /// Position of each node among the unknowns, `None` on the boundary.
    pos: Vec<Option<usize>>,
    unknowns: Vec<usize>,
    bandwidth: usize,
}

impl InteriorSystem {
    fn new(mesh: &Mesh, boundary: &[bool]) -> Self {
        let mut pos = vec![None; mesh.node_count()];
        let mut unknowns = Vec::new();
        for k in rcm_order(mesh) {
            if !boundary[k] {
                pos[k] = Some(unknowns.len());
                unknowns.push(k);
            }
        }
        let mut bandwidth = 0;
        for t in &mesh.triangles {
            for &a in t {
                for &b in t {
                    if let (Some(i), Some(j)) = (pos[a], pos[b]) {
                        bandwidth = bandwidth.max(i.abs_diff(j));
                    }
                }
            }
        }
        InteriorSystem { pos, unknowns, bandwidth }
    }
}

fn interior_norm(v: &[f64], sys: &InteriorSystem) -> f64 {
    sys.unknowns.iter().map(|&k| v[k] * v[k]).sum::<f64>().sqrt()
}

/// One backward-Euler step with Dirichlet data on the entire boundary.
///
/// `boundary_values` carries the prescribed concentrations at boundary nodes
/// (other entries are ignored). Picard iterations with the symmetric operator
/// `M/Δt + K(c_k)` are run until the interior residual drops below `rel_tol`
/// relative to its transient and flux parts.
pub fn diffusion_step(
    mesh: &Mesh,
    model: &DiffusivityModel,
    c_prev: &[f64],
    boundary_values: &[f64],
    dt: f64,
    opts: &DiffusionOptions,
) -> Result<(Vec<f64>, DiffusionStepReport)> {
    if !(dt > 0.0) {
        return Err(IcmError::InvalidConfig(format!("time step {dt} must be positive")));
    }
    let n = mesh.node_count();
    if c_prev.len() != n || boundary_values.len() != n {
        return Err(IcmError::ShapeMismatch(format!("concentration vectors must have {n} entries")));
    }
    let boundary = domain_boundary_nodes(mesh);
    let sys = InteriorSystem::new(mesh, &boundary);
    let mut c: Vec<f64> = (0..n).map(|k| if boundary[k] { boundary_values[k] } else { c_prev[k] }).collect();
    let cmax = c_prev.iter().chain(&c).fold(0.0f64, |a, b| a.max(b.abs()));
    let floor = 1e-14 * mesh.areas.iter().sum::<f64>() / dt * cmax;
    let mut last = f64::INFINITY;
    for it in 0..=opts.max_iterations {
        let (mass, flux) = residual_parts(mesh, model, c_prev, &c, dt)?;
        let r: Vec<f64> = mass.iter().zip(&flux).map(|(a, b)| a + b).collect();
        let scale = interior_norm(&mass, &sys) + interior_norm(&flux, &sys);
        let rn = interior_norm(&r, &sys);
        let rel = if scale > 0.0 { rn / scale } else { 0.0 };
        if !rel.is_finite() {
            return Err(IcmError::NonFinite("diffusion residual".into()));
        }
        last = rel;
        // a few extra sweeps past the tolerance give per-node residuals near round-off
        if rel <= opts.rel_tol * 1e-3 || rn <= floor {
            return Ok((c, DiffusionStepReport { iterations: it, relative_residual: rel }));
        }
        if it == opts.max_iterations {
            break;
        }
        let mut a = Banded::new(sys.unknowns.len(), sys.bandwidth);
        for e in 0..mesh.element_count() {
            let t = mesh.triangles[e];
            let cv = element_values(mesh, &c, e);
            let d = model.eval((cv[0] + cv[1] + cv[2]) / 3.0)?;
            let w = mesh.areas[e];
            for i in 0..3 {
                let Some(pi) = sys.pos[t[i]] else { continue };
                for j in 0..=i {
                    let Some(pj) = sys.pos[t[j]] else { continue };
                    let (gi, gj) = (mesh.grads[e][i], mesh.grads[e][j]);
                    let k = w * (gi[0] * (d[0][0] * gj[0] + d[0][1] * gj[1]) + gi[1] * (d[1][0] * gj[0] + d[1][1] * gj[1]));
                    let m = w / 12.0 * if i == j { 2.0 } else { 1.0 } / dt;
                    a.add(pi, pj, k + m);
                }
            }
        }
        let rhs: Vec<f64> = sys.unknowns.iter().map(|&k| -r[k]).collect();
        let delta = a.solve(&rhs).ok_or(IcmError::NonConvergence { iterations: it, residual: rel })?;
        for (&k, d) in sys.unknowns.iter().zip(&delta) {
            c[k] += d;
        }
    }
    if last <= opts.rel_tol {
        return Ok((c, DiffusionStepReport { iterations: opts.max_iterations, relative_residual: last }));
    }
    Err(IcmError::NonConvergence { iterations: opts.max_iterations, residual: last })
}

/// Nodal concentrations at times `t^0, t^1, …` with `dt[m-1] = t^m − t^{m-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSeries {
    pub dt: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// March `steps` backward-Euler steps holding the boundary at its initial values.
pub fn simulate(
    mesh: &Mesh,
    model: &DiffusivityModel,
    c0: Vec<f64>,
    dt: f64,
    steps: usize,
    opts: &DiffusionOptions,
) -> Result<ConcentrationSeries> {
    let mut values = vec![c0];
    for _ in 0..steps {
        let prev = values.last().unwrap();
        let (next, _) = diffusion_step(mesh, model, prev, prev, dt, opts)?;
        values.push(next);
    }
    Ok(ConcentrationSeries { dt: vec![dt; steps], values })
}

/// Boundary reactions `(M(c − c_prev)/Δt + K(c)c)_n` at boundary nodes. Their
/// sum times `Δt` equals the change of total content `∫c`.
pub fn boundary_reactions(mesh: &Mesh, model: &DiffusivityModel, c_prev: &[f64], c: &[f64], dt: f64) -> Result<Vec<(usize, f64)>> {
    let boundary = domain_boundary_nodes(mesh);
    let (mass, flux) = residual_parts(mesh, model, c_prev, c, dt)?;
    Ok((0..mesh.node_count()).filter(|&k| boundary[k]).map(|k| (k, mass[k] + flux[k])).collect())
}

/// `∫_Ω c` for the P1 interpolant.
pub fn total_content(mesh: &Mesh, c: &[f64]) -> f64 {
    (0..mesh.element_count()).map(|e| mesh.areas[e] * element_values(mesh, c, e).iter().sum::<f64>() / 3.0).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSubtoken {
    pub element: usize,
    /// `A_ij = w^e ∂𝖭^n/∂x_i ∂c^m/∂x_j`, row-major.
    pub a: [f64; 4],
    /// Centroid concentration `c^{e,m}`.
    pub c: f64,
    /// Element share `b^{n,e,m}` of the transient term.
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionToken {
    pub node: usize,
    pub step: usize,
    pub subtokens: Vec<DiffusionSubtoken>,
    pub b: f64,
}

impl DiffusionToken {
    /// `Σ_e A : D(c^e) − b` and the magnitude `Σ_e |A : D| + |b|`.
    pub fn residual(&self, model: &DiffusivityModel) -> Result<(f64, f64)> {
        let mut r = -self.b;
        let mut s = self.b.abs();
        for st in &self.subtokens {
            let d = model.eval(st.c)?;
            let v = st.a[0] * d[0][0] + st.a[1] * d[0][1] + st.a[2] * d[1][0] + st.a[3] * d[1][1];
            r += v;
            s += v.abs();
        }
        Ok((r, s))
    }

    pub fn affine(&self, model: &DiffusivityModel) -> Result<AffineConstraint> {
        let terms = self
            .subtokens
            .iter()
            .map(|st| {
                let d = model.eval(st.c)?;
                Ok((st.a.to_vec(), vec![d[0][0], d[0][1], d[1][0], d[1][1]]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AffineConstraint { rows: 1, cols: 4, terms, rhs: vec![self.b] })
    }
}

/// Tokens for every domain-interior node and every step `m ≥ 1`.
pub fn tokenize_diffusion(mesh: &Mesh, series: &ConcentrationSeries) -> Result<Vec<DiffusionToken>> {
    if series.values.len() < 2 || series.dt.len() + 1 != series.values.len() {
        return Err(IcmError::ShapeMismatch("diffusion series needs ≥ 2 levels and one time step per level".into()));
    }
    let boundary = domain_boundary_nodes(mesh);
    let mut out = Vec::new();
    for m in 1..series.values.len() {
        let (c, cp, dt) = (&series.values[m], &series.values[m - 1], series.dt[m - 1]);
        let grads: Vec<[f64; 2]> = (0..mesh.element_count()).map(|e| element_gradient(mesh, c, e)).collect();
        for n in (0..mesh.node_count()).filter(|&k| !boundary[k]) {
            let mut subtokens = Vec::with_capacity(mesh.adjacency[n].len());
            for &e in &mesh.adjacency[n] {
                let k = mesh.local_index(n, e)?;
                let cv = element_values(mesh, c, e);
                let pv = element_values(mesh, cp, e);
                let mass = element_mass_apply(mesh.areas[e], [cv[0] - pv[0], cv[1] - pv[1], cv[2] - pv[2]]);
                let (gn, gc, w) = (mesh.grads[e][k], grads[e], mesh.areas[e]);
                subtokens.push(DiffusionSubtoken {
                    element: e,
                    a: [w * gn[0] * gc[0], w * gn[0] * gc[1], w * gn[1] * gc[0], w * gn[1] * gc[1]],
                    c: (cv[0] + cv[1] + cv[2]) / 3.0,
                    b: -mass[k] / dt,
                });
            }
            let b = subtokens.iter().map(|s| s.b).sum();
            out.push(DiffusionToken { node: n, step: m, subtokens, b });
        }
    }
    Ok(out)
}

/// Worst `|Σ_e A : D − b|` over all tokens, each divided by the largest
/// token magnitude of its time step.
pub fn max_relative_residual(tokens: &[DiffusionToken], model: &DiffusivityModel) -> Result<f64> {
    let mut per_step: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for t in tokens {
        let (r, s) = t.residual(model)?;
        let e = per_step.entry(t.step).or_default();
        e.0 = e.0.max(r.abs());
        e.1 = e.1.max(s);
    }
    Ok(per_step.values().map(|(r, s)| if *s > 0.0 { r / s } else { 0.0 }).fold(0.0, f64::max))
}

/// `Σ_e A^e f^e = b` with `A^e` of shape `rows × cols` (row-major) and `f^e` of length `cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineConstraint {
    pub rows: usize,
    pub cols: usize,
    pub terms: Vec<(Vec<f64>, Vec<f64>)>,
    pub rhs: Vec<f64>,
}

/// `Σ_e A^e f^e − b`.
pub fn affine_residual(c: &AffineConstraint) -> Result<Vec<f64>> {
    let mut r: Vec<f64> = c.rhs.iter().map(|v| -v).collect();
    if r.len() != c.rows {
        return Err(IcmError::ShapeMismatch("right-hand side length differs from row count".into()));
    }
    for (a, f) in &c.terms {
        if a.len() != c.rows * c.cols || f.len() != c.cols {
            return Err(IcmError::ShapeMismatch("affine term shape".into()));
        }
        for i in 0..c.rows {
            r[i] += (0..c.cols).map(|j| a[i * c.cols + j] * f[j]).sum::<f64>();
        }
    }
    Ok(r)
}

/// Hyperelastic token as an affine constraint with `f^e = ∇ψ(I^e)` and `b = 0`.
pub fn deformation_affine(token: &DeformationToken, element_gradients: &[[f64; 2]]) -> AffineConstraint {
    let terms = token.subtokens.iter().map(|s| (s.a.to_vec(), element_gradients[s.element].to_vec())).collect();
    AffineConstraint { rows: 2, cols: 2, terms, rhs: vec![0.0, 0.0] }
}

const DIFT_MAGIC: &[u8; 4] = b"DIFT";
const SERIES_MAGIC: &[u8; 4] = b"DIFS";
pub const DIFFUSION_FORMAT_VERSION: u32 = 1;

/// Header `DIFT`, version, count; per token node, step and subtoken count,
/// then `A` (4), `c^{e,m}` and `b^{n,e,m}` per subtoken.
pub fn write_diffusion_dump(w: &mut impl Write, tokens: &[DiffusionToken]) -> Result<()> {
    w.write_all(DIFT_MAGIC)?;
    w.write_all(&DIFFUSION_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tokens.len() as u32).to_le_bytes())?;
    for t in tokens {
        for v in [t.node, t.step, t.subtokens.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for s in &t.subtokens {
            for v in s.a.iter().chain(&[s.c, s.b]) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Element ids are not stored, so they read back as `usize::MAX`.
pub fn read_diffusion_dump(r: &mut impl Read) -> Result<Vec<DiffusionToken>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DIFT_MAGIC {
        return Err(IcmError::Format("not a DIFT token dump".into()));
    }
    let version = read_u32(r)?;
    if version != DIFFUSION_FORMAT_VERSION {
        return Err(IcmError::Format(format!("unsupported diffusion dump version {version}")));
    }
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let node = read_u32(r)? as usize;
        let step = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let mut subtokens = Vec::with_capacity(k);
        for _ in 0..k {
            let mut v = [0.0; 6];
            for x in v.iter_mut() {
                *x = read_f64(r)?;
            }
            subtokens.push(DiffusionSubtoken { element: usize::MAX, a: [v[0], v[1], v[2], v[3]], c: v[4], b: v[5] });
        }
        let b = subtokens.iter().map(|s| s.b).sum();
        out.push(DiffusionToken { node, step, subtokens, b });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SeriesHeader {
    version: u32,
    nodes: usize,
    levels: usize,
    dt: Vec<f64>,
}

/// `DIFS`, u64 header length, JSON header, then every level's nodal values as little-endian f64.
pub fn write_series(w: &mut impl Write, s: &ConcentrationSeries) -> Result<()> {
    let nodes = s.values.first().map_or(0, |v| v.len());
    let header = serde_json::to_vec(&SeriesHeader { version: DIFFUSION_FORMAT_VERSION, nodes, levels: s.values.len(), dt: s.dt.clone() })?;
    w.write_all(SERIES_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for level in &s.values {
        if level.len() != nodes {
            return Err(IcmError::ShapeMismatch("ragged concentration series".into()));
        }
        for v in level {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_series(r: &mut impl Read) -> Result<ConcentrationSeries> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SERIES_MAGIC {
        return Err(IcmError::Format("not a concentration series file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let h: SeriesHeader = serde_json::from_slice(&header)?;
    if h.version != DIFFUSION_FORMAT_VERSION {
        return Err(IcmError::Format(format!("unsupported series version {}", h.version)));
    }
    let values = (0..h.levels).map(|_| (0..h.nodes).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    Ok(ConcentrationSeries { dt: h.dt, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{assemble_forces, deformation_gradients, generate_plate_mesh, GeometrySpec, Hole};
    use crate::materials::{normalize_polynomial_coefficients, sample_material_seeded, GradientProvider, SubsetRule};
    use crate::solver::{run_load_program, LoadProgram, LoadingMode};
    use crate::tokenizer::tokenize_field;

    fn holed() -> Mesh {
        generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h: 0.08 }).unwrap()
    }

    fn nonlinear() -> DiffusivityModel {
        DiffusivityModel { d11: vec![0.05, 0.1, 0.05], d12: vec![0.01, 0.02], d22: vec![0.03, 0.05] }
    }

    fn bump(mesh: &Mesh) -> Vec<f64> {
        let on = domain_boundary_nodes(mesh);
        mesh.nodes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if on[k] {
                    0.2
                } else {
                    0.2 + (-((p[0] - 0.25).powi(2) + (p[1] - 0.3).powi(2)) / 0.02).exp()
                }
            })
            .collect()
    }

    #[test]
    fn constant_field_is_steady() {
        let mesh = holed();
        let c = vec![0.7; mesh.node_count()];
        let (next, rep) = diffusion_step(&mesh, &nonlinear(), &c, &c, 0.01, &DiffusionOptions::default()).unwrap();
        assert_eq!(next, c);
        assert_eq!(rep.iterations, 0);
        let s = ConcentrationSeries { dt: vec![0.01], values: vec![c.clone(), next] };
        for t in tokenize_diffusion(&mesh, &s).unwrap() {
            assert_eq!(t.b, 0.0);
            assert!(t.subtokens.iter().all(|s| s.a == [0.0; 4]));
            assert_eq!(t.residual(&nonlinear()).unwrap().0, 0.0);
        }
    }

    #[test]
    fn boundary_detection_includes_hole_rim() {
        let mesh = holed();
        let on = domain_boundary_nodes(&mesh);
        let rim = mesh.nodes.iter().enumerate().filter(|(k, p)| on[*k] && ((p[0] - 0.5).hypot(p[1] - 0.5) - 0.2).abs() < 1e-9).count();
        assert!(rim >= 8);
        for set in mesh.boundary_sets.values() {
            assert!(set.iter().all(|&k| on[k]));
        }
    }

    #[test]
    fn simulated_tokens_satisfy_residual_identity() {
        let mesh = holed();
        let model = nonlinear();
        let s = simulate(&mesh, &model, bump(&mesh), 0.02, 5, &DiffusionOptions::default()).unwrap();
        let tokens = tokenize_diffusion(&mesh, &s).unwrap();
        let interior = domain_boundary_nodes(&mesh).iter().filter(|b| !**b).count();
        assert_eq!(tokens.len(), 5 * interior);
        for m in 1..=5 {
            let step: Vec<&DiffusionToken> = tokens.iter().filter(|t| t.step == m).collect();
            let scale = step.iter().map(|t| t.residual(&model).unwrap().1).fold(0.0, f64::max);
            for t in &step {
                assert_eq!(t.subtokens.len(), mesh.adjacency[t.node].len());
                let (r, _) = t.residual(&model).unwrap();
                assert!(r.abs() <= 1e-8 * scale, "node {} step {m}: {r} vs {scale}", t.node);
            }
        }
        // a wrong diffusivity violates it
        let wrong = model.scaled(1.3);
        let worst = tokens.iter().map(|t| t.residual(&wrong).unwrap().0.abs()).fold(0.0, f64::max);
        assert!(worst > 1e-4);
    }

    #[test]
    fn mass_balance() {
        let mesh = holed();
        let model = nonlinear();
        let s = simulate(&mesh, &model, bump(&mesh), 0.02, 3, &DiffusionOptions::default()).unwrap();
        for m in 1..s.values.len() {
            let change = total_content(&mesh, &s.values[m]) - total_content(&mesh, &s.values[m - 1]);
            let flux: f64 = boundary_reactions(&mesh, &model, &s.values[m - 1], &s.values[m], s.dt[m - 1])
                .unwrap()
                .iter()
                .map(|(_, r)| r * s.dt[m - 1])
                .sum();
            assert!(change < 0.0);
            assert!((change - flux).abs() <= 1e-8 * change.abs(), "{change} vs {flux}");
        }
    }

    #[test]
    fn rescaling_diffusivity_and_time() {
        let mesh = holed();
        let model = nonlinear();
        let sc = 4.0;
        let a = simulate(&mesh, &model, bump(&mesh), 0.02, 3, &DiffusionOptions::default()).unwrap();
        let b = simulate(&mesh, &model.scaled(sc), bump(&mesh), 0.02 / sc, 3, &DiffusionOptions::default()).unwrap();
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
        let ta = tokenize_diffusion(&mesh, &ConcentrationSeries { dt: vec![0.02 / sc; 3], values: a.values.clone() }).unwrap();
        let scale = ta.iter().map(|t| t.residual(&model.scaled(sc)).unwrap().1).fold(0.0, f64::max);
        for t in &ta {
            let (r, _) = t.residual(&model.scaled(sc)).unwrap();
            assert!(r.abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn generic_evaluator_matches_both_disciplines() {
        let mesh = holed();
        let model = nonlinear();
        let s = simulate(&mesh, &model, bump(&mesh), 0.02, 2, &DiffusionOptions::default()).unwrap();
        for t in tokenize_diffusion(&mesh, &s).unwrap() {
            let local = t.residual(&model).unwrap().0;
            let generic = affine_residual(&t.affine(&model).unwrap()).unwrap()[0];
            assert!((local - generic).abs() <= 1e-12 * t.residual(&model).unwrap().1.max(1e-300));
        }

        let sample = |i| normalize_polynomial_coefficients(&sample_material_seeded(SubsetRule::PolynomialA, 3, i).unwrap(), 0).unwrap();
        let m = sample(0);
        let field = run_load_program(&mesh, "g", &m, &LoadProgram::new(LoadingMode::Uniaxial, 0.1, 0.0, 1).unwrap())
            .unwrap()
            .pop()
            .unwrap();
        // evaluate a wrong energy so the residual is not trivially zero
        let wrong = sample(1);
        let fs = deformation_gradients(&mesh, &field.displacements);
        let g = wrong.gradients(&crate::discretization::element_invariants(&fs).unwrap()).unwrap();
        let forces = assemble_forces(&mesh, &fs, &g);
        let scale = forces.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        for t in tokenize_field(&mesh, &field).unwrap() {
            let r = affine_residual(&deformation_affine(&t, &g)).unwrap();
            for k in 0..2 {
                assert!((r[k] - forces[t.node][k]).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn dumps_round_trip() {
        let mesh = holed();
        let s = simulate(&mesh, &nonlinear(), bump(&mesh), 0.02, 2, &DiffusionOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_series(&mut buf, &s).unwrap();
        assert_eq!(read_series(&mut buf.as_slice()).unwrap(), s);
        let tokens = tokenize_diffusion(&mesh, &s).unwrap();
        let mut buf = Vec::new();
        write_diffusion_dump(&mut buf, &tokens).unwrap();
        let back = read_diffusion_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), tokens.len());
        for (a, b) in back.iter().zip(&tokens) {
            assert_eq!((a.node, a.step, a.b), (b.node, b.step, b.b));
            assert_eq!(a.subtokens.iter().map(|s| (s.a, s.c, s.b)).collect::<Vec<_>>(), b.subtokens.iter().map(|s| (s.a, s.c, s.b)).collect::<Vec<_>>());
        }
        assert!(tokenize_diffusion(&mesh, &ConcentrationSeries { dt: vec![], values: vec![s.values[0].clone()] }).is_err());
        assert!(DiffusivityModel::isotropic(-1.0).eval(0.0).is_err());
    }
}
