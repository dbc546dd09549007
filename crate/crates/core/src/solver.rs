//! Displacement-controlled Newton solver for plane-strain hyperelastic plates.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::discretization::{
    assemble_forces, boundary_resultant, deformation_gradients, element_coefficients, element_invariants,
    BoundaryCondition, Mesh, StrainField,
};
use crate::error::{IcmError, Result};
use crate::materials::{GradientProvider, Invariants2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadingMode {
    Uniaxial,
    Biaxial,
    Shear,
    ProportionalBiaxial,
    EqualBiaxial,
}

impl LoadingMode {
    pub const ALL: [LoadingMode; 5] = [
        LoadingMode::Uniaxial,
        LoadingMode::Biaxial,
        LoadingMode::Shear,
        LoadingMode::ProportionalBiaxial,
        LoadingMode::EqualBiaxial,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LoadingMode::Uniaxial => "uniaxial",
            LoadingMode::Biaxial => "biaxial",
            LoadingMode::Shear => "shear",
            LoadingMode::ProportionalBiaxial => "proportional-biaxial",
            LoadingMode::EqualBiaxial => "equal-biaxial",
        }
    }

    pub fn from_name(s: &str) -> Result<LoadingMode> {
        LoadingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IcmError::InvalidConfig(format!("unknown loading mode `{s}`")))
    }
}

/// Loading mode with final boundary displacement ratios `ū/L`, ramped linearly over `steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProgram {
    pub mode: LoadingMode,
    pub u1: f64,
    pub u2: f64,
    pub steps: usize,
}

impl LoadProgram {
    pub fn new(mode: LoadingMode, u1: f64, u2: f64, steps: usize) -> Result<LoadProgram> {
        let p = LoadProgram { mode, u1, u2, steps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(IcmError::InvalidConfig("load program needs at least one step".into()));
        }
        if !(self.u1.is_finite() && self.u2.is_finite()) {
            return Err(IcmError::InvalidConfig("non-finite load magnitude".into()));
        }
        if self.mode == LoadingMode::EqualBiaxial && self.u1 != self.u2 {
            return Err(IcmError::InvalidConfig("equal-biaxial requires u1 = u2".into()));
        }
        Ok(())
    }

    /// Boundary displacement ratios at step `k` (1-based) of the ramp.
    pub fn step_ratios(&self, k: usize) -> (f64, f64) {
        let t = k as f64 / self.steps as f64;
        (t * self.u1, t * self.u2)
    }

    pub fn is_zero(&self) -> bool {
        self.u1 == 0.0 && self.u2 == 0.0
    }
}

/// Prescribed displacement per DOF (`None` = free).
#[derive(Clone, Debug, PartialEq)]
pub struct Dirichlet {
    pub values: Vec<[Option<f64>; 2]>,
    pub bcs: Vec<BoundaryCondition>,
}

fn edge_span(mesh: &Mesh) -> ([f64; 2], f64) {
    let x0 = mesh.nodes.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let y0 = mesh.nodes.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    ([x0, y0], mesh.length_scale)
}

/// Displacement gradient `G` and origin of the homogeneous field matching the
/// boundary data of `mode` at ratios `(r1, r2)`.
fn homogeneous_field(mesh: &Mesh, mode: LoadingMode, r1: f64, r2: f64) -> (Matrix2<f64>, [f64; 2]) {
    let (origin, l) = edge_span(mesh);
    match mode {
        LoadingMode::Uniaxial => (Matrix2::new(r1, 0.0, 0.0, 0.0), origin),
        LoadingMode::Biaxial | LoadingMode::EqualBiaxial => (Matrix2::new(r1, 0.0, 0.0, r2), origin),
        LoadingMode::ProportionalBiaxial => {
            (Matrix2::new(r1, 0.0, 0.0, r2), [origin[0] + 0.5 * l, origin[1] + 0.5 * l])
        }
        LoadingMode::Shear => (Matrix2::new(r1, 0.0, r2, 0.0), origin),
    }
}

/// Dirichlet data of a loading mode at boundary displacement ratios `(r1, r2)`.
///
/// * uniaxial: left `u1 = 0`, bottom-left corner `u2 = 0`, right `u1 = ū1`
/// * biaxial / equal-biaxial: additionally bottom `u2 = 0`, top `u2 = ū2`
/// * proportional-biaxial: opposite sides moved symmetrically by `∓ū/2`
/// * shear: left clamped, right edge displaced by `(ū1, ū2)`
pub fn dirichlet_for_mode(mesh: &Mesh, mode: LoadingMode, r1: f64, r2: f64) -> Result<Dirichlet> {
    let (origin, l) = edge_span(mesh);
    let (u1, u2) = (r1 * l, r2 * l);
    let mut values = vec![[None, None]; mesh.node_count()];
    let left = mesh.boundary_set("left")?;
    let right = mesh.boundary_set("right")?;
    let set = |values: &mut Vec<[Option<f64>; 2]>, nodes: &[usize], comp: usize, v: f64| {
        for &n in nodes {
            values[n][comp] = Some(v);
        }
    };
    let bc = |s: &str, d: [f64; 2]| BoundaryCondition::new(s, d, 0.0);
    let bcs = match mode {
        LoadingMode::Uniaxial => {
            set(&mut values, left, 0, 0.0);
            set(&mut values, right, 0, u1);
            let corner = *left
                .iter()
                .min_by(|&&a, &&b| {
                    let da = (mesh.nodes[a][1] - origin[1]).abs();
                    let db = (mesh.nodes[b][1] - origin[1]).abs();
                    da.total_cmp(&db)
                })
                .ok_or_else(|| IcmError::InvalidMesh("empty left edge".into()))?;
            values[corner][1] = Some(0.0);
            vec![bc("right", [1.0, 0.0])?, bc("left", [-1.0, 0.0])?]
        }
        LoadingMode::Biaxial | LoadingMode::EqualBiaxial | LoadingMode::ProportionalBiaxial => {
            let bottom = mesh.boundary_set("bottom")?;
            let top = mesh.boundary_set("top")?;
            let (lo1, hi1, lo2, hi2) = if mode == LoadingMode::ProportionalBiaxial {
                (-0.5 * u1, 0.5 * u1, -0.5 * u2, 0.5 * u2)
            } else {
                (0.0, u1, 0.0, u2)
            };
            set(&mut values, left, 0, lo1);
            set(&mut values, right, 0, hi1);
            set(&mut values, bottom, 1, lo2);
            set(&mut values, top, 1, hi2);
            vec![
                bc("right", [1.0, 0.0])?,
                bc("left", [-1.0, 0.0])?,
                bc("top", [0.0, 1.0])?,
                bc("bottom", [0.0, -1.0])?,
            ]
        }
        LoadingMode::Shear => {
            set(&mut values, left, 0, 0.0);
            set(&mut values, left, 1, 0.0);
            set(&mut values, right, 0, u1);
            set(&mut values, right, 1, u2);
            vec![bc("right", [0.0, 1.0])?, bc("left", [0.0, -1.0])?]
        }
    };
    Ok(Dirichlet { values, bcs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TangentMode {
    Analytic,
    /// Column-wise central differencing of the residual (verification only).
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub max_bisections: usize,
    pub tangent: TangentMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rel_tol: 1e-10,
            max_iterations: 50,
            max_halvings: 20,
            max_bisections: 6,
            tangent: TangentMode::Analytic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Relative interior residual after each Newton iteration (index 0 = initial guess).
    pub residual_history: Vec<f64>,
    pub field: StrainField,
}

/// Reverse Cuthill–McKee node order of the mesh graph.
pub(crate) fn rcm_order(mesh: &Mesh) -> Vec<usize> {
    let n = mesh.node_count();
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in &mesh.triangles {
        for a in 0..3 {
            for b in 0..3 {
                if a != b && !nbrs[t[a]].contains(&t[b]) {
                    nbrs[t[a]].push(t[b]);
                }
            }
        }
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n)
            .filter(|&k| !visited[k])
            .min_by_key(|&k| (nbrs[k].len(), k))
            .unwrap();
        visited[start] = true;
        let mut head = order.len();
        order.push(start);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = nbrs[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (nbrs[w].len(), w));
            for w in next {
                visited[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// Stiffness matrix: banded when the invariant Hessians are symmetric.
enum Tangent {
    Banded(Banded),
    Dense(DMatrix<f64>),
}

/// Symmetric banded matrix, lower band stored column by column.
pub(crate) struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    pub(crate) fn new(n: usize, bw: usize) -> Self {
        Banded { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        self.data[j * (self.bw + 1) + (i - j)] += v;
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * (self.bw + 1) + (i - j)]
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for i in j..(j + self.bw + 1).min(self.n) {
                let v = self.get(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// In-place `LDLᵀ` solve; `None` on a near-zero pivot.
    pub(crate) fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = self.data.clone();
        let mut d = vec![0.0; n];
        let scale = (0..n).map(|j| self.get(j, j).abs()).fold(0.0, f64::max);
        for j in 0..n {
            let k0 = j.saturating_sub(bw);
            let mut djj = l[j * w];
            for k in k0..j {
                let ljk = l[k * w + (j - k)];
                djj -= ljk * ljk * d[k];
            }
            if !(djj.abs() > 1e-13 * scale) {
                return None;
            }
            d[j] = djj;
            for i in (j + 1)..(j + w).min(n) {
                let mut s = l[j * w + (i - j)];
                for k in i.saturating_sub(bw).max(k0)..j {
                    s -= l[k * w + (i - k)] * l[k * w + (j - k)] * d[k];
                }
                l[j * w + (i - j)] = s / djj;
            }
        }
        let mut x = rhs.to_vec();
        for j in 0..n {
            for i in (j + 1)..(j + w).min(n) {
                x[i] -= l[j * w + (i - j)] * x[j];
            }
        }
        for j in 0..n {
            x[j] /= d[j];
        }
        for j in (0..n).rev() {
            for i in (j + 1)..(j + w).min(n) {
                x[j] -= l[j * w + (i - j)] * x[i];
            }
        }
        Some(x)
    }
}

/// `∂P/∂F` in row-major `(F11, F12, F21, F22)` ordering, with `h[i][j] = ∂g_i/∂I_j`.
fn material_tangent(f: &Matrix2<f64>, g: [f64; 2], h: [[f64; 2]; 2]) -> Matrix4<f64> {
    let det = f.determinant();
    let cof = [f[(1, 1)], -f[(1, 0)], -f[(0, 1)], f[(0, 0)]];
    let d1 = [2.0 * f[(0, 0)], 2.0 * f[(0, 1)], 2.0 * f[(1, 0)], 2.0 * f[(1, 1)]];
    let d3 = cof.map(|c| 2.0 * det * c);
    let mut t = Matrix4::zeros();
    for a in 0..4 {
        for b in 0..4 {
            t[(a, b)] = h[0][0] * d1[a] * d1[b]
                + h[0][1] * d1[a] * d3[b]
                + h[1][0] * d3[a] * d1[b]
                + h[1][1] * d3[a] * d3[b]
                + 2.0 * g[1] * cof[a] * cof[b];
        }
        t[(a, a)] += 2.0 * g[0];
    }
    // 2·det·∂cof/∂F
    let s = 2.0 * g[1] * det;
    t[(0, 3)] += s;
    t[(3, 0)] += s;
    t[(1, 2)] -= s;
    t[(2, 1)] -= s;
    t
}

struct Evaluation {
    forces: Vec<[f64; 2]>,
    inv: Vec<Invariants2D>,
    grads: Vec<[f64; 2]>,
    fs: Vec<Matrix2<f64>>,
    /// RMS of `‖A^{n,e} ∇ψ^e‖` over all (n, e).
    characteristic: f64,
}

fn evaluate<P: GradientProvider + ?Sized>(mesh: &Mesh, provider: &P, u: &[[f64; 2]]) -> Result<Evaluation> {
    let fs = deformation_gradients(mesh, u);
    let inv = element_invariants(&fs)?;
    let grads = provider.gradients(&inv)?;
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(IcmError::NonFinite("constitutive gradient".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for e in 0..mesh.element_count() {
        let gv = Vector2::new(grads[e][0], grads[e][1]);
        for a in element_coefficients(mesh, &fs[e], e) {
            sq += (a * gv).norm_squared();
            count += 1;
        }
    }
    let forces = assemble_forces(mesh, &fs, &grads);
    Ok(Evaluation { forces, inv, grads, fs, characteristic: (sq / count as f64).sqrt() })
}

/// Newton iteration state bound to one Dirichlet configuration.
struct System<'a> {
    mesh: &'a Mesh,
    /// Equation number of each `(node, comp)` or `usize::MAX` when prescribed.
    eq: Vec<[usize; 2]>,
    neq: usize,
    bw: usize,
}

impl<'a> System<'a> {
    fn new(mesh: &'a Mesh, order: &[usize], dirichlet: &Dirichlet) -> System<'a> {
        let mut eq = vec![[usize::MAX; 2]; mesh.node_count()];
        let mut neq = 0;
        for &n in order {
            for c in 0..2 {
                if dirichlet.values[n][c].is_none() {
                    eq[n][c] = neq;
                    neq += 1;
                }
            }
        }
        let mut bw = 0;
        for t in &mesh.triangles {
            let ids: Vec<usize> = t.iter().flat_map(|&n| eq[n]).filter(|&q| q != usize::MAX).collect();
            for &a in &ids {
                for &b in &ids {
                    bw = bw.max(a.abs_diff(b));
                }
            }
        }
        System { mesh, eq, neq, bw }
    }

    fn residual(&self, ev: &Evaluation) -> Vec<f64> {
        let mut r = vec![0.0; self.neq];
        for (n, q) in self.eq.iter().enumerate() {
            for c in 0..2 {
                if q[c] != usize::MAX {
                    r[q[c]] = ev.forces[n][c];
                }
            }
        }
        r
    }

    /// Max unconstrained force component relative to the characteristic force.
    fn relative_residual(&self, ev: &Evaluation) -> f64 {
        let mut worst = 0.0f64;
        for (n, q) in self.eq.iter().enumerate() {
            for c in 0..2 {
                if q[c] != usize::MAX {
                    worst = worst.max(ev.forces[n][c].abs());
                }
            }
        }
        if ev.characteristic > 0.0 {
            worst / ev.characteristic
        } else if worst == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    fn tangent<P: GradientProvider + ?Sized>(&self, provider: &P, ev: &Evaluation) -> Result<Tangent> {
        let hess = provider.hessians(&ev.inv)?;
        let symmetric = hess.iter().all(|h| (h[0][1] - h[1][0]).abs() <= 1e-10 * (h[0][1].abs() + h[1][0].abs()));
        if symmetric {
            let mut k = Banded::new(self.neq, self.bw);
            self.assemble_tangent(ev, &hess, true, |i, j, v| k.add(i, j, v));
            Ok(Tangent::Banded(k))
        } else {
            let mut k = DMatrix::zeros(self.neq, self.neq);
            self.assemble_tangent(ev, &hess, false, |i, j, v| k[(i, j)] += v);
            Ok(Tangent::Dense(k))
        }
    }

    /// Element tangent contributions; with `lower` only entries with column ≤ row.
    fn assemble_tangent(&self, ev: &Evaluation, hess: &[[[f64; 2]; 2]], lower: bool, mut add: impl FnMut(usize, usize, f64)) {
        for e in 0..self.mesh.element_count() {
            let t = material_tangent(&ev.fs[e], ev.grads[e], hess[e]);
            let w = self.mesh.areas[e];
            let gr = &self.mesh.grads[e];
            let tri = &self.mesh.triangles[e];
            for a in 0..3 {
                for i in 0..2 {
                    let qa = self.eq[tri[a]][i];
                    if qa == usize::MAX {
                        continue;
                    }
                    for b in 0..3 {
                        for kk in 0..2 {
                            let qb = self.eq[tri[b]][kk];
                            if qb == usize::MAX || (lower && qb > qa) {
                                continue;
                            }
                            let mut v = 0.0;
                            for jj in 0..2 {
                                for ll in 0..2 {
                                    v += t[(2 * i + jj, 2 * kk + ll)] * gr[a][jj] * gr[b][ll];
                                }
                            }
                            add(qa, qb, w * v);
                        }
                    }
                }
            }
        }
    }

    fn fd_tangent<P: GradientProvider + ?Sized>(&self, provider: &P, u: &[[f64; 2]]) -> Result<DMatrix<f64>> {
        let mut k = DMatrix::zeros(self.neq, self.neq);
        let h = 1e-7 * self.mesh.length_scale;
        for (n, q) in self.eq.iter().enumerate() {
            for c in 0..2 {
                if q[c] == usize::MAX {
                    continue;
                }
                let mut up = u.to_vec();
                up[n][c] += h;
                let rp = self.residual(&evaluate(self.mesh, provider, &up)?);
                up[n][c] -= 2.0 * h;
                let rm = self.residual(&evaluate(self.mesh, provider, &up)?);
                for r in 0..self.neq {
                    k[(r, q[c])] = (rp[r] - rm[r]) / (2.0 * h);
                }
            }
        }
        Ok(k)
    }

    fn apply(&self, u: &[[f64; 2]], du: &[f64], t: f64) -> Vec<[f64; 2]> {
        let mut out = u.to_vec();
        for (n, q) in self.eq.iter().enumerate() {
            for c in 0..2 {
                if q[c] != usize::MAX {
                    out[n][c] += t * du[q[c]];
                }
            }
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn record_field(mesh: &Mesh, mesh_id: &str, u: Vec<[f64; 2]>, bcs: &[BoundaryCondition], forces: &[[f64; 2]]) -> Result<StrainField> {
    let mut out = Vec::with_capacity(bcs.len());
    for bc in bcs {
        let r = boundary_resultant(mesh, forces, &bc.set)?;
        let mut b = bc.clone();
        b.force = r[0] * bc.direction[0] + r[1] * bc.direction[1];
        out.push(b);
    }
    Ok(StrainField { mesh: mesh_id.to_string(), displacements: u, bcs: out })
}

/// Solve one equilibrium problem from `init`, with prescribed DOFs overwritten.
pub fn solve_step<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    provider: &P,
    dirichlet: &Dirichlet,
    init: &StrainField,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let order = rcm_order(mesh);
    solve_with_order(mesh, &order, provider, dirichlet, init, opts)
}

fn solve_with_order<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    order: &[usize],
    provider: &P,
    dirichlet: &Dirichlet,
    init: &StrainField,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    init.check(mesh)?;
    let sys = System::new(mesh, order, dirichlet);
    let mut u = init.displacements.clone();
    for (n, v) in dirichlet.values.iter().enumerate() {
        for c in 0..2 {
            if let Some(x) = v[c] {
                u[n][c] = x;
            }
        }
    }
    let mut ev = evaluate(mesh, provider, &u)?;
    let mut history = vec![sys.relative_residual(&ev)];
    let mut iterations = 0;
    while history.last().copied().unwrap() > opts.rel_tol {
        if iterations == opts.max_iterations {
            return Err(IcmError::NonConvergence { iterations, residual: *history.last().unwrap() });
        }
        iterations += 1;
        let r = sys.residual(&ev);
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let du = match opts.tangent {
            TangentMode::Analytic => {
                match sys.tangent(provider, &ev)? {
                    Tangent::Banded(k) => match k.solve(&rhs) {
                        Some(x) => x,
                        None => dense_solve(k.to_dense(), &rhs)?,
                    },
                    Tangent::Dense(k) => dense_solve(k, &rhs)?,
                }
            }
            TangentMode::FiniteDifference => dense_solve(sys.fd_tangent(provider, &u)?, &rhs)?,
        };
        let r0 = norm(&r);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = sys.apply(&u, &du, t);
            if let Ok(ev_t) = evaluate(mesh, provider, &trial) {
                let rt = norm(&sys.residual(&ev_t));
                let rel = sys.relative_residual(&ev_t);
                if rt <= (1.0 - 1e-4 * t) * r0 || rel <= opts.rel_tol {
                    accepted = Some((trial, ev_t));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((nu, nev)) = accepted else {
            return Err(IcmError::LineSearchFailure { halvings: opts.max_halvings });
        };
        u = nu;
        ev = nev;
        history.push(sys.relative_residual(&ev));
        log::trace!("newton {iterations}: step {t}, relative residual {:.3e}", history.last().unwrap());
    }
    let field = record_field(mesh, &init.mesh, u, &dirichlet.bcs, &ev.forces)?;
    Ok(SolveReport { converged: true, residual_history: history, field })
}

fn dense_solve(k: DMatrix<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    let lu = k.lu();
    lu.solve(&DVector::from_column_slice(rhs))
        .map(|x| x.as_slice().to_vec())
        .ok_or_else(|| IcmError::NonFinite("singular tangent stiffness".into()))
}

/// Per-step output of a load program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Load fractions actually solved to reach this step (bisection ladder).
    pub ladder: Vec<f64>,
    pub residual_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramReport {
    pub fields: Vec<StrainField>,
    pub steps: Vec<StepRecord>,
}

/// Run the ramp of `program`, warm-starting each step from the previous
/// solution plus the homogeneous increment.
pub fn run_load_program_with<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    mesh_id: &str,
    provider: &P,
    program: &LoadProgram,
    opts: &SolverOptions,
) -> Result<ProgramReport> {
    program.validate()?;
    let order = rcm_order(mesh);
    let mut current = StrainField::zero(mesh_id, mesh);
    let mut fraction = 0.0;
    let mut fields = Vec::with_capacity(program.steps);
    let mut steps = Vec::with_capacity(program.steps);
    for k in 1..=program.steps {
        let target = k as f64 / program.steps as f64;
        let mut ladder = Vec::new();
        let mut history = Vec::new();
        let mut attempt = target - fraction;
        let mut depth = 0;
        while fraction < target - 1e-15 {
            let next = (fraction + attempt).min(target);
            match solve_fraction(mesh, &order, provider, program, &current, fraction, next, opts) {
                Ok(rep) => {
                    current = rep.field;
                    history = rep.residual_history;
                    fraction = next;
                    ladder.push(next);
                }
                Err(e @ (IcmError::NonConvergence { .. } | IcmError::LineSearchFailure { .. } | IcmError::NonPositiveJacobian(_) | IcmError::DomainViolation(_)))
                    if depth < opts.max_bisections =>
                {
                    log::debug!("step {k}: bisecting after {e}");
                    attempt *= 0.5;
                    depth += 1;
                }
                Err(e) => return Err(IcmError::LoadStepFailure { step: k, source: Box::new(e) }),
            }
        }
        fields.push(current.clone());
        steps.push(StepRecord { step: k, ladder, residual_history: history });
    }
    Ok(ProgramReport { fields, steps })
}

#[allow(clippy::too_many_arguments)]
fn solve_fraction<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    order: &[usize],
    provider: &P,
    program: &LoadProgram,
    current: &StrainField,
    from: f64,
    to: f64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let (r1, r2) = (to * program.u1, to * program.u2);
    let dirichlet = dirichlet_for_mode(mesh, program.mode, r1, r2)?;
    let (g0, origin) = homogeneous_field(mesh, program.mode, from * program.u1, from * program.u2);
    let (g1, _) = homogeneous_field(mesh, program.mode, r1, r2);
    let dg = g1 - g0;
    let mut init = current.clone();
    for (u, p) in init.displacements.iter_mut().zip(&mesh.nodes) {
        let d = dg * Vector2::new(p[0] - origin[0], p[1] - origin[1]);
        u[0] += d[0];
        u[1] += d[1];
    }
    solve_with_order(mesh, order, provider, &dirichlet, &init, opts)
}

/// One converged field per step of `program` for a closed-form material.
pub fn run_load_program<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    mesh_id: &str,
    material: &P,
    program: &LoadProgram,
) -> Result<Vec<StrainField>> {
    Ok(run_load_program_with(mesh, mesh_id, material, program, &SolverOptions::default())?.fields)
}

/// Equilibrium quality of a field: max over free nodes of `‖Σ_e A∇ψ‖` divided
/// by the RMS of `‖A^{n,e}∇ψ^e‖`.
pub fn interior_residual_ratio<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    field: &StrainField,
    provider: &P,
) -> Result<f64> {
    let ev = evaluate(mesh, provider, &field.displacements)?;
    let free = field.free_nodes(mesh)?;
    let worst = free
        .iter()
        .map(|&n| ev.forces[n][0].hypot(ev.forces[n][1]))
        .fold(0.0, f64::max);
    Ok(if ev.characteristic > 0.0 { worst / ev.characteristic } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{generate_plate_mesh, GeometrySpec, Hole};
    use crate::materials::{
        invariants_from_f, normalize_polynomial_coefficients, sample_material_seeded, DeformationGradient2D,
        MaterialModel, Scaled, SubsetRule,
    };

    fn holed(h: f64) -> Mesh {
        generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h }).unwrap()
    }

    fn poly(k: u64) -> MaterialModel {
        let m = sample_material_seeded(SubsetRule::PolynomialA, 100, k).unwrap();
        normalize_polynomial_coefficients(&m, 0).unwrap()
    }

    #[test]
    fn analytic_tangent_matches_differences() {
        let f = Matrix2::new(1.2, 0.1, -0.05, 0.95);
        for m in [poly(0), sample_material_seeded(SubsetRule::OgdenLow, 1, 1).unwrap()] {
            let inv = invariants_from_f(&DeformationGradient2D(f)).unwrap();
            let t = material_tangent(&f, m.grad_energy(inv).unwrap(), m.hessian_energy(inv).unwrap());
            let p = |f: Matrix2<f64>| {
                crate::materials::first_pk_stress(&m, &DeformationGradient2D(f)).unwrap().value
            };
            let h = 1e-6;
            for b in 0..4 {
                let mut e = Matrix2::zeros();
                e[(b / 2, b % 2)] = 1.0;
                let d = (p(f + e * h) - p(f - e * h)) / (2.0 * h);
                for a in 0..4 {
                    let fd = d[(a / 2, a % 2)];
                    assert!((t[(a, b)] - fd).abs() < 1e-6 * t.norm(), "{a}{b}: {} vs {fd}", t[(a, b)]);
                }
            }
        }
    }

    /// Linear in the invariants with `∂g1/∂I3 ≠ ∂g2/∂I1`.
    struct Skewed;

    impl GradientProvider for Skewed {
        fn gradients(&self, invariants: &[Invariants2D]) -> Result<Vec<[f64; 2]>> {
            Ok(invariants.iter().map(|i| [0.5 + 0.3 * (i.i1 - 2.0) + 2.0 * (i.i3 - 1.0), -0.5 - 0.4 * (i.i1 - 2.0) + 1.5 * (i.i3 - 1.0)]).collect())
        }
    }

    #[test]
    fn nonsymmetric_provider_tangent_and_quadratic_convergence() {
        let f = Matrix2::new(1.1, 0.05, -0.08, 0.97);
        let inv = invariants_from_f(&DeformationGradient2D(f)).unwrap();
        let h = Skewed.hessians(&[inv]).unwrap()[0];
        assert!((h[0][1] - 2.0).abs() < 1e-8 && (h[1][0] + 0.4).abs() < 1e-8);
        let t = material_tangent(&f, Skewed.gradients(&[inv]).unwrap()[0], h);
        let p = |f: Matrix2<f64>| crate::materials::first_pk_stress(&Skewed, &DeformationGradient2D(f)).unwrap().value;
        for b in 0..4 {
            let mut e = Matrix2::zeros();
            e[(b / 2, b % 2)] = 1.0;
            let d = (p(f + e * 1e-6) - p(f - e * 1e-6)) / 2e-6;
            for a in 0..4 {
                assert!((t[(a, b)] - d[(a / 2, a % 2)]).abs() < 1e-6 * t.norm());
            }
        }
        let mesh = holed(0.2);
        let program = LoadProgram::new(LoadingMode::Uniaxial, 0.05, 0.0, 1).unwrap();
        let rep = run_load_program_with(&mesh, "g", &Skewed, &program, &SolverOptions::default()).unwrap();
        let hist = &rep.steps[0].residual_history;
        assert!(hist.len() <= 8, "{hist:?}");
    }

    #[test]
    fn banded_matches_dense() {
        let n = 12;
        let mut b = Banded::new(n, 3);
        for i in 0..n {
            b.add(i, i, 4.0 + i as f64);
            for k in 1..=3 {
                if i + k < n {
                    b.add(i + k, i, 1.0 / (k as f64 + i as f64));
                }
            }
        }
        let rhs: Vec<f64> = (0..n).map(|k| (k as f64).sin()).collect();
        let x = b.solve(&rhs).unwrap();
        let y = dense_solve(b.to_dense(), &rhs).unwrap();
        for (a, c) in x.iter().zip(&y) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_plate_one_iteration() {
        let mesh = generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![], h: 0.1 }).unwrap();
        let m = poly(1);
        let g = Matrix2::new(0.2, 0.0, 0.0, -0.05);
        let all: Vec<usize> = (0..mesh.node_count()).collect();
        let mut values = vec![[None, None]; mesh.node_count()];
        let on_edge: Vec<usize> = all.iter().copied().filter(|n| !mesh.interior_nodes.contains(n)).collect();
        for &n in &on_edge {
            let v = g * Vector2::new(mesh.nodes[n][0], mesh.nodes[n][1]);
            values[n] = [Some(v[0]), Some(v[1])];
        }
        let dirichlet = Dirichlet { values, bcs: vec![] };
        let mut init = StrainField::zero("h", &mesh);
        for (u, p) in init.displacements.iter_mut().zip(&mesh.nodes) {
            let v = g * Vector2::new(p[0], p[1]);
            *u = [v[0], v[1]];
        }
        let rep = solve_step(&mesh, &m, &dirichlet, &init, &SolverOptions::default()).unwrap();
        assert!(rep.residual_history.len() <= 2);
        assert!(*rep.residual_history.last().unwrap() <= 1e-12);
    }

    #[test]
    fn uniaxial_program_converges_and_equilibrates() {
        let mesh = holed(0.1);
        let m = poly(2);
        let program = LoadProgram::new(LoadingMode::Uniaxial, 0.3, 0.0, 10).unwrap();
        let fields = run_load_program(&mesh, "g", &m, &program).unwrap();
        assert_eq!(fields.len(), 10);
        let mut last_stretch = 1.0;
        for f in &fields {
            assert!(interior_residual_ratio(&mesh, f, &m).unwrap() <= 1e-8);
            let right = f.bcs.iter().find(|b| b.set == "right").unwrap().force;
            let left = f.bcs.iter().find(|b| b.set == "left").unwrap().force;
            assert!(right > 0.0);
            assert!((right - left).abs() <= 1e-8 * right.abs());
            let stretch = deformation_gradients(&mesh, &f.displacements)
                .iter()
                .map(|fm| {
                    let c = fm.transpose() * fm;
                    nalgebra::SymmetricEigen::new(c).eigenvalues.max().sqrt()
                })
                .fold(0.0, f64::max);
            assert!(stretch > last_stretch);
            last_stretch = stretch;
        }
    }

    #[test]
    fn scale_invariance_of_displacements() {
        let mesh = holed(0.12);
        let m = poly(3);
        let program = LoadProgram::new(LoadingMode::Biaxial, 0.15, 0.1, 3).unwrap();
        let a = run_load_program(&mesh, "g", &m, &program).unwrap();
        let scaled = Scaled { inner: &m, factor: 2.0 };
        let b = run_load_program(&mesh, "g", &scaled, &program).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            let scale = fa.displacements.iter().map(|u| u[0].hypot(u[1])).fold(0.0, f64::max);
            for (ua, ub) in fa.displacements.iter().zip(&fb.displacements) {
                assert!((ua[0] - ub[0]).abs() <= 1e-10 * scale && (ua[1] - ub[1]).abs() <= 1e-10 * scale);
            }
            for (ba, bb) in fa.bcs.iter().zip(&fb.bcs) {
                assert!((2.0 * ba.force - bb.force).abs() <= 1e-8 * bb.force.abs());
            }
        }
    }

    #[test]
    fn all_modes_and_global_equilibrium() {
        let mesh = holed(0.12);
        let m = sample_material_seeded(SubsetRule::ExpLn, 4, 0).unwrap();
        for (mode, u1, u2) in [
            (LoadingMode::Shear, 0.0, 0.15),
            (LoadingMode::ProportionalBiaxial, 0.2, 0.1),
            (LoadingMode::EqualBiaxial, 0.1, 0.1),
        ] {
            let program = LoadProgram::new(mode, u1, u2, 3).unwrap();
            let fields = run_load_program(&mesh, "g", &m, &program).unwrap();
            let f = fields.last().unwrap();
            assert!(interior_residual_ratio(&mesh, f, &m).unwrap() <= 1e-8);
            let forces = crate::discretization::nodal_forces(&mesh, f, &m).unwrap();
            let total = forces.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
            let scale: f64 = forces.iter().map(|v| v[0].hypot(v[1])).sum();
            assert!(total[0].hypot(total[1]) <= 1e-8 * scale, "{mode:?}");
        }
    }

    #[test]
    fn fd_tangent_agrees() {
        let mesh = holed(0.2);
        let m = poly(4);
        let program = LoadProgram::new(LoadingMode::Uniaxial, 0.1, 0.0, 1).unwrap();
        let opts = SolverOptions { tangent: TangentMode::FiniteDifference, ..Default::default() };
        let a = run_load_program_with(&mesh, "g", &m, &program, &opts).unwrap().fields;
        let b = run_load_program(&mesh, "g", &m, &program).unwrap();
        for (ua, ub) in a[0].displacements.iter().zip(&b[0].displacements) {
            assert!((ua[0] - ub[0]).abs() < 1e-9 && (ua[1] - ub[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_program_and_determinism() {
        let mesh = holed(0.15);
        let m = poly(5);
        let zero = LoadProgram::new(LoadingMode::Uniaxial, 0.0, 0.0, 2).unwrap();
        let f = run_load_program(&mesh, "g", &m, &zero).unwrap();
        assert!(f.iter().all(|f| f.displacements.iter().all(|u| u[0] == 0.0 && u[1] == 0.0)));
        let p = LoadProgram::new(LoadingMode::Uniaxial, 0.2, 0.0, 2).unwrap();
        assert_eq!(run_load_program(&mesh, "g", &m, &p).unwrap(), run_load_program(&mesh, "g", &m, &p).unwrap());
    }
}
