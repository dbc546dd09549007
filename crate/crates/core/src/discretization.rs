//! Linear-triangle meshes of perforated square plates, element kinematics,
//! the per-(node, element) coefficient matrices `A^{n,e}` and nodal forces.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::materials::{first_pk_from_gradient, DeformationGradient2D, GradientProvider, Invariants2D};

pub const OUTER_SETS: [&str; 4] = ["left", "right", "bottom", "top"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum HoleShape {
    Circle { radius: f64 },
    /// Semi-axes `a` (along x before rotation) and `b`; `angle` in radians.
    Ellipse { a: f64, b: f64, #[serde(default)] angle: f64 },
    /// Axis-aligned square of side `2·half_side`, rotated by `angle`.
    Square { half_side: f64, #[serde(default)] angle: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub center: [f64; 2],
    #[serde(flatten)]
    pub shape: HoleShape,
}

impl Hole {
    pub fn circle(cx: f64, cy: f64, radius: f64) -> Self {
        Hole { center: [cx, cy], shape: HoleShape::Circle { radius } }
    }

    pub fn ellipse(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Hole { center: [cx, cy], shape: HoleShape::Ellipse { a, b, angle } }
    }

    pub fn square(cx: f64, cy: f64, half_side: f64, angle: f64) -> Self {
        Hole { center: [cx, cy], shape: HoleShape::Square { half_side, angle } }
    }

    fn local(&self, p: [f64; 2], angle: f64) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (s, c) = angle.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self.shape {
            HoleShape::Circle { radius } => {
                (p[0] - self.center[0]).hypot(p[1] - self.center[1]) < radius
            }
            HoleShape::Ellipse { a, b, angle } => {
                let q = self.local(p, angle);
                (q[0] / a).powi(2) + (q[1] / b).powi(2) < 1.0
            }
            HoleShape::Square { half_side, angle } => {
                let q = self.local(p, angle);
                q[0].abs() < half_side && q[1].abs() < half_side
            }
        }
    }

    fn perimeter(&self) -> f64 {
        match self.shape {
            HoleShape::Circle { radius } => 2.0 * std::f64::consts::PI * radius,
            HoleShape::Ellipse { a, b, .. } => {
                // Ramanujan
                let h = ((a - b) / (a + b)).powi(2);
                std::f64::consts::PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
            }
            HoleShape::Square { half_side, .. } => 8.0 * half_side,
        }
    }

    /// Closed polygon resolving the hole boundary with at least 16 segments.
    pub fn boundary_points(&self, h: f64) -> Vec<[f64; 2]> {
        let n = ((self.perimeter() / h).ceil() as usize).max(16);
        let [cx, cy] = self.center;
        let rot = |x: f64, y: f64, angle: f64| {
            let (s, c) = angle.sin_cos();
            [cx + c * x - s * y, cy + s * x + c * y]
        };
        match self.shape {
            HoleShape::Circle { radius } => (0..n)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    [cx + radius * t.cos(), cy + radius * t.sin()]
                })
                .collect(),
            HoleShape::Ellipse { a, b, angle } => {
                // equal arc-length spacing from a dense parametric sample
                let dense = 64 * n;
                let pts: Vec<[f64; 2]> = (0..=dense)
                    .map(|k| {
                        let t = 2.0 * std::f64::consts::PI * k as f64 / dense as f64;
                        [a * t.cos(), b * t.sin()]
                    })
                    .collect();
                let mut arc = vec![0.0];
                for w in pts.windows(2) {
                    arc.push(arc.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
                }
                let total = *arc.last().unwrap();
                let mut out = Vec::with_capacity(n);
                let mut j = 0;
                for k in 0..n {
                    let target = total * k as f64 / n as f64;
                    while arc[j + 1] < target {
                        j += 1;
                    }
                    let s = (target - arc[j]) / (arc[j + 1] - arc[j]);
                    let x = pts[j][0] + s * (pts[j + 1][0] - pts[j][0]);
                    let y = pts[j][1] + s * (pts[j + 1][1] - pts[j][1]);
                    out.push(rot(x, y, angle));
                }
                out
            }
            HoleShape::Square { half_side, angle } => {
                let per_side = n.div_ceil(4);
                let s = half_side;
                let corners = [[-s, -s], [s, -s], [s, s], [-s, s]];
                let mut out = Vec::with_capacity(4 * per_side);
                for c in 0..4 {
                    let (p, q) = (corners[c], corners[(c + 1) % 4]);
                    for k in 0..per_side {
                        let t = k as f64 / per_side as f64;
                        out.push(rot(p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), angle));
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    /// Plate side length `L`.
    pub side: f64,
    #[serde(default)]
    pub holes: Vec<Hole>,
    /// Target edge length.
    pub h: f64,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn polygon_distance(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    (0..poly.len())
        .map(|k| point_segment_distance(p, poly[k], poly[(k + 1) % poly.len()]))
        .fold(f64::INFINITY, f64::min)
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]) {
            inside = !inside;
        }
    }
    inside
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|k| {
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        .abs()
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Triangulate a perforated square plate.
///
/// Without holes this is a structured grid with two triangles per cell. With
/// holes the background grid is carved around each hole, the hole polygons are
/// inserted and the point set is Delaunay-triangulated, followed by a few
/// rounds of Laplacian smoothing of the free grid points.
pub fn generate_plate_mesh(spec: &GeometrySpec) -> Result<Mesh> {
    let l = spec.side;
    if !(l > 0.0 && spec.h > 0.0 && spec.h <= l) {
        return Err(IcmError::MeshGenerationFailure(format!("invalid side {l} / edge length {}", spec.h)));
    }
    let cells = (l / spec.h).ceil() as usize;
    let h = l / cells as f64;
    if spec.holes.is_empty() {
        let mut nodes = Vec::with_capacity((cells + 1) * (cells + 1));
        for j in 0..=cells {
            for i in 0..=cells {
                nodes.push([i as f64 * h, j as f64 * h]);
            }
        }
        let id = |i: usize, j: usize| j * (cells + 1) + i;
        let mut tris = Vec::with_capacity(2 * cells * cells);
        for j in 0..cells {
            for i in 0..cells {
                tris.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                tris.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        return Mesh::from_parts(nodes, tris, outer_boundary_sets);
    }

    let polys: Vec<Vec<[f64; 2]>> = spec.holes.iter().map(|hole| hole.boundary_points(h)).collect();
    let clearance = h;
    for (k, poly) in polys.iter().enumerate() {
        for p in poly {
            if p[0] < clearance || p[1] < clearance || p[0] > l - clearance || p[1] > l - clearance {
                return Err(IcmError::MeshGenerationFailure(format!("hole {k} touches the outer boundary")));
            }
        }
        for (m, other) in polys.iter().enumerate().skip(k + 1) {
            let hit = poly.iter().any(|&p| spec.holes[m].contains(p) || polygon_distance(p, other) < clearance)
                || other.iter().any(|&p| spec.holes[k].contains(p));
            if hit {
                return Err(IcmError::MeshGenerationFailure(format!("holes {k} and {m} overlap")));
            }
        }
    }

    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut fixed: Vec<bool> = Vec::new();
    for j in 0..=cells {
        for i in 0..=cells {
            let p = [i as f64 * h, j as f64 * h];
            let edge = i == 0 || j == 0 || i == cells || j == cells;
            let carved = !edge && spec
                .holes
                .iter()
                .zip(&polys)
                .any(|(hole, poly)| hole.contains(p) || polygon_distance(p, poly) < 0.6 * h);
            if !carved {
                points.push(p);
                fixed.push(edge);
            }
        }
    }
    for poly in &polys {
        points.extend_from_slice(poly);
        fixed.extend(std::iter::repeat(true).take(poly.len()));
    }

    let in_hole = |p: [f64; 2]| polys.iter().any(|poly| point_in_polygon(p, poly));
    let triangulate = |points: &[[f64; 2]]| -> Vec<[usize; 3]> {
        let pts: Vec<delaunator::Point> = points.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
        let t = delaunator::triangulate(&pts);
        t.triangles
            .chunks_exact(3)
            .filter_map(|c| {
                let mut tri = [c[0], c[1], c[2]];
                let (a, b, cc) = (points[tri[0]], points[tri[1]], points[tri[2]]);
                let centroid = [(a[0] + b[0] + cc[0]) / 3.0, (a[1] + b[1] + cc[1]) / 3.0];
                if in_hole(centroid) {
                    return None;
                }
                let area = signed_area(a, b, cc);
                if area.abs() < 1e-12 * l * l {
                    return None;
                }
                if area < 0.0 {
                    tri.swap(1, 2);
                }
                Some(tri)
            })
            .collect()
    };

    let mut tris = triangulate(&points);
    for _ in 0..6 {
        let mut sum = vec![[0.0f64; 2]; points.len()];
        let mut count = vec![0usize; points.len()];
        for t in &tris {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        sum[t[a]][0] += points[t[b]][0];
                        sum[t[a]][1] += points[t[b]][1];
                        count[t[a]] += 1;
                    }
                }
            }
        }
        for k in 0..points.len() {
            if !fixed[k] && count[k] > 0 {
                let target = [sum[k][0] / count[k] as f64, sum[k][1] / count[k] as f64];
                if !in_hole(target) {
                    points[k] = [0.5 * (points[k][0] + target[0]), 0.5 * (points[k][1] + target[1])];
                }
            }
        }
        tris = triangulate(&points);
    }

    let expected = l * l - polys.iter().map(|p| polygon_area(p)).sum::<f64>();
    let covered: f64 = tris.iter().map(|t| signed_area(points[t[0]], points[t[1]], points[t[2]])).sum();
    if (covered - expected).abs() > 1e-9 * l * l {
        return Err(IcmError::MeshGenerationFailure(format!(
            "triangulation covers area {covered}, expected {expected}"
        )));
    }

    // drop unused points and renumber
    let mut used = vec![false; points.len()];
    tris.iter().flatten().for_each(|&k| used[k] = true);
    let mut remap = vec![usize::MAX; points.len()];
    let mut nodes = Vec::new();
    for (k, p) in points.iter().enumerate() {
        if used[k] {
            remap[k] = nodes.len();
            nodes.push(*p);
        }
    }
    let tris = tris.into_iter().map(|t| [remap[t[0]], remap[t[1]], remap[t[2]]]).collect();
    Mesh::from_parts(nodes, tris, outer_boundary_sets)
}

fn outer_boundary_sets(nodes: &[[f64; 2]]) -> BTreeMap<String, Vec<usize>> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in nodes {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let tol = 1e-9 * (x1 - x0).max(y1 - y0);
    let pick = |f: &dyn Fn(&[f64; 2]) -> bool| -> Vec<usize> {
        nodes.iter().enumerate().filter(|(_, p)| f(p)).map(|(k, _)| k).collect()
    };
    let mut sets = BTreeMap::new();
    sets.insert("left".to_string(), pick(&|p| (p[0] - x0).abs() <= tol));
    sets.insert("right".to_string(), pick(&|p| (p[0] - x1).abs() <= tol));
    sets.insert("bottom".to_string(), pick(&|p| (p[1] - y0).abs() <= tol));
    sets.insert("top".to_string(), pick(&|p| (p[1] - y1).abs() <= tol));
    sets
}

/// Immutable triangulation with cached shape-function gradients and adjacency.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_sets: BTreeMap<String, Vec<usize>>,
    /// Nodes on none of the boundary sets.
    pub interior_nodes: Vec<usize>,
    /// ℰ(n): elements adjacent to each node, ascending.
    pub adjacency: Vec<Vec<usize>>,
    /// Reference areas `w^e`.
    pub areas: Vec<f64>,
    /// `∇𝖭` of the three vertices of each element.
    pub grads: Vec<[Vector2<f64>; 3]>,
    /// Bounding-box extent, the length scale `L`.
    pub length_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct MeshRecord {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_sets: BTreeMap<String, Vec<usize>>,
}

impl Mesh {
    fn from_parts(
        nodes: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        sets: impl Fn(&[[f64; 2]]) -> BTreeMap<String, Vec<usize>>,
    ) -> Result<Mesh> {
        let boundary_sets = sets(&nodes);
        Mesh::new(nodes, triangles, boundary_sets)
    }

    /// Validate and cache geometry. Clockwise triangles are reoriented.
    pub fn new(
        nodes: Vec<[f64; 2]>,
        mut triangles: Vec<[usize; 3]>,
        boundary_sets: BTreeMap<String, Vec<usize>>,
    ) -> Result<Mesh> {
        if nodes.is_empty() || triangles.is_empty() {
            return Err(IcmError::InvalidMesh("empty mesh".into()));
        }
        let n = nodes.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&k| k >= n)) {
            return Err(IcmError::InvalidMesh(format!("triangle {t:?} references a missing node")));
        }
        if let Some((name, _)) = boundary_sets.iter().find(|(_, s)| s.iter().any(|&k| k >= n)) {
            return Err(IcmError::InvalidMesh(format!("boundary set `{name}` references a missing node")));
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &nodes {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let length_scale = (x1 - x0).max(y1 - y0);
        let mut areas = Vec::with_capacity(triangles.len());
        let mut grads = Vec::with_capacity(triangles.len());
        for (e, t) in triangles.iter_mut().enumerate() {
            let mut w = signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]]);
            if w < 0.0 {
                t.swap(1, 2);
                w = -w;
            }
            if !(w >= 1e-14 * length_scale * length_scale) {
                return Err(IcmError::DegenerateElement { element: e, area: w });
            }
            let [p0, p1, p2] = [nodes[t[0]], nodes[t[1]], nodes[t[2]]];
            let s = 1.0 / (2.0 * w);
            grads.push([
                Vector2::new(p1[1] - p2[1], p2[0] - p1[0]) * s,
                Vector2::new(p2[1] - p0[1], p0[0] - p2[0]) * s,
                Vector2::new(p0[1] - p1[1], p1[0] - p0[0]) * s,
            ]);
            areas.push(w);
        }
        let mut adjacency = vec![Vec::new(); n];
        for (e, t) in triangles.iter().enumerate() {
            for &k in t {
                adjacency[k].push(e);
            }
        }
        if let Some(k) = adjacency.iter().position(|a| a.is_empty()) {
            return Err(IcmError::InvalidMesh(format!("node {k} belongs to no element")));
        }
        let mut on_boundary = vec![false; n];
        boundary_sets.values().flatten().for_each(|&k| on_boundary[k] = true);
        let interior_nodes = (0..n).filter(|&k| !on_boundary[k]).collect();
        Ok(Mesh { nodes, triangles, boundary_sets, interior_nodes, adjacency, areas, grads, length_scale })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn element_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn boundary_set(&self, name: &str) -> Result<&[usize]> {
        self.boundary_sets
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| IcmError::UnknownBoundarySet(name.to_string()))
    }

    /// Local vertex index of node `n` in element `e`.
    pub fn local_index(&self, n: usize, e: usize) -> Result<usize> {
        self.triangles
            .get(e)
            .and_then(|t| t.iter().position(|&k| k == n))
            .ok_or(IcmError::NodeNotInElement { node: n, element: e })
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_degrees(&self) -> f64 {
        let mut best = 180.0f64;
        for t in &self.triangles {
            for k in 0..3 {
                let a = self.nodes[t[k]];
                let b = self.nodes[t[(k + 1) % 3]];
                let c = self.nodes[t[(k + 2) % 3]];
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - a[0], c[1] - a[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
                best = best.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MeshRecord {
            nodes: self.nodes.clone(),
            triangles: self.triangles.clone(),
            boundary_sets: self.boundary_sets.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Mesh> {
        let r: MeshRecord = serde_json::from_str(s)?;
        Mesh::new(r.nodes, r.triangles, r.boundary_sets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCondition {
    pub set: String,
    /// Unit loading direction `d`.
    pub direction: [f64; 2],
    /// Measured resultant projected on `d`.
    pub force: f64,
}

impl BoundaryCondition {
    pub fn new(set: &str, direction: [f64; 2], force: f64) -> Result<Self> {
        let norm = direction[0].hypot(direction[1]);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(IcmError::InvalidConfig(format!("loading direction {direction:?} is not a unit vector")));
        }
        Ok(BoundaryCondition { set: set.to_string(), direction, force })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainField {
    /// Mesh path or identifier.
    pub mesh: String,
    pub displacements: Vec<[f64; 2]>,
    pub bcs: Vec<BoundaryCondition>,
}

impl StrainField {
    pub fn zero(mesh_id: &str, mesh: &Mesh) -> StrainField {
        StrainField { mesh: mesh_id.to_string(), displacements: vec![[0.0; 2]; mesh.node_count()], bcs: Vec::new() }
    }

    pub fn check(&self, mesh: &Mesh) -> Result<()> {
        if self.displacements.len() != mesh.node_count() {
            return Err(IcmError::ShapeMismatch(format!(
                "field has {} displacements for {} nodes",
                self.displacements.len(),
                mesh.node_count()
            )));
        }
        for bc in &self.bcs {
            mesh.boundary_set(&bc.set)?;
        }
        Ok(())
    }

    /// Nodes in none of this field's loaded boundary sets: the set 𝒩^in on
    /// which interior equilibrium holds (traction-free edges and hole edges included).
    pub fn free_nodes(&self, mesh: &Mesh) -> Result<Vec<usize>> {
        let mut loaded = vec![false; mesh.node_count()];
        for bc in &self.bcs {
            mesh.boundary_set(&bc.set)?.iter().for_each(|&k| loaded[k] = true);
        }
        Ok((0..mesh.node_count()).filter(|&k| !loaded[k]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementKinematics {
    pub f: DeformationGradient2D,
    pub grads: [Vector2<f64>; 3],
    pub area: f64,
}

fn field_gradient(mesh: &Mesh, u: &[[f64; 2]], e: usize) -> Matrix2<f64> {
    let t = mesh.triangles[e];
    let mut f = Matrix2::identity();
    for (k, &n) in t.iter().enumerate() {
        let g = mesh.grads[e][k];
        let un = u[n];
        f[(0, 0)] += un[0] * g[0];
        f[(0, 1)] += un[0] * g[1];
        f[(1, 0)] += un[1] * g[0];
        f[(1, 1)] += un[1] * g[1];
    }
    f
}

/// `F^e = I + Σ u^n ⊗ ∇𝖭^n`.
pub fn element_kinematics(mesh: &Mesh, field: &StrainField, e: usize) -> Result<ElementKinematics> {
    let area = *mesh
        .areas
        .get(e)
        .ok_or_else(|| IcmError::InvalidMesh(format!("element {e} out of range")))?;
    if !(area > 0.0) {
        return Err(IcmError::DegenerateElement { element: e, area });
    }
    Ok(ElementKinematics {
        f: DeformationGradient2D(field_gradient(mesh, &field.displacements, e)),
        grads: mesh.grads[e],
        area,
    })
}

/// Deformation gradients of all elements for a displacement vector.
pub fn deformation_gradients(mesh: &Mesh, u: &[[f64; 2]]) -> Vec<Matrix2<f64>> {
    (0..mesh.element_count()).map(|e| field_gradient(mesh, u, e)).collect()
}

/// `[A^{n,e}]` for the three vertices of `e`, given `F^e`. Columns are (m=1, m=3).
pub fn element_coefficients(mesh: &Mesh, f: &Matrix2<f64>, e: usize) -> [Matrix2<f64>; 3] {
    let c = f.transpose() * f;
    let adj = Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]);
    let m1 = f * (2.0 * mesh.areas[e]);
    let m3 = m1 * adj;
    let g = &mesh.grads[e];
    std::array::from_fn(|k| {
        let a = m1 * g[k];
        let b = m3 * g[k];
        Matrix2::new(a[0], b[0], a[1], b[1])
    })
}

/// `A^{n,e}_{im} = 2 w^e F_il ∂I_m/∂C_lr ∂𝖭^n/∂X_r`.
pub fn coefficient_matrix(mesh: &Mesh, field: &StrainField, n: usize, e: usize) -> Result<Matrix2<f64>> {
    let k = mesh.local_index(n, e)?;
    let kin = element_kinematics(mesh, field, e)?;
    Ok(element_coefficients(mesh, &kin.f.0, e)[k])
}

/// Element invariants, failing on inverted elements.
pub fn element_invariants(fs: &[Matrix2<f64>]) -> Result<Vec<Invariants2D>> {
    fs.iter()
        .map(|f| crate::materials::invariants_from_f(&DeformationGradient2D(*f)))
        .collect()
}

/// All nodal internal forces `f^n = Σ_e A^{n,e} ∇ψ(I^e)`.
pub fn nodal_forces<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    field: &StrainField,
    provider: &P,
) -> Result<Vec<[f64; 2]>> {
    field.check(mesh)?;
    let fs = deformation_gradients(mesh, &field.displacements);
    let inv = element_invariants(&fs)?;
    let g = provider.gradients(&inv)?;
    Ok(assemble_forces(mesh, &fs, &g))
}

/// Assemble `Σ_e A^{n,e} g^e` for given per-element gradients.
pub fn assemble_forces(mesh: &Mesh, fs: &[Matrix2<f64>], g: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; mesh.node_count()];
    for e in 0..mesh.element_count() {
        let a = element_coefficients(mesh, &fs[e], e);
        let gv = Vector2::new(g[e][0], g[e][1]);
        for (k, &n) in mesh.triangles[e].iter().enumerate() {
            let f = a[k] * gv;
            out[n][0] += f[0];
            out[n][1] += f[1];
        }
    }
    out
}

pub fn nodal_force<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    field: &StrainField,
    provider: &P,
    n: usize,
) -> Result<[f64; 2]> {
    let mut out = [0.0; 2];
    for &e in &mesh.adjacency[n] {
        let kin = element_kinematics(mesh, field, e)?;
        let inv = crate::materials::invariants_from_f(&kin.f)?;
        let g = provider.gradients(&[inv])?[0];
        let a = element_coefficients(mesh, &kin.f.0, e)[mesh.local_index(n, e)?];
        let f = a * Vector2::new(g[0], g[1]);
        out[0] += f[0];
        out[1] += f[1];
    }
    Ok(out)
}

/// Quadrature path `Σ_e w^e P^e ∇𝖭^n`, independent of the `A` matrices.
pub fn nodal_forces_quadrature<P: GradientProvider + ?Sized>(
    mesh: &Mesh,
    field: &StrainField,
    provider: &P,
) -> Result<Vec<[f64; 2]>> {
    let mut out = vec![[0.0; 2]; mesh.node_count()];
    for e in 0..mesh.element_count() {
        let kin = element_kinematics(mesh, field, e)?;
        let inv = crate::materials::invariants_from_f(&kin.f)?;
        let g = provider.gradients(&[inv])?[0];
        let p = first_pk_from_gradient(&kin.f, g)?.value;
        for (k, &n) in mesh.triangles[e].iter().enumerate() {
            let f = p * kin.grads[k] * kin.area;
            out[n][0] += f[0];
            out[n][1] += f[1];
        }
    }
    Ok(out)
}

/// Sum of nodal forces over a boundary set.
pub fn boundary_resultant(mesh: &Mesh, forces: &[[f64; 2]], set: &str) -> Result<[f64; 2]> {
    let nodes = mesh.boundary_set(set)?;
    Ok(nodes.iter().fold([0.0; 2], |acc, &n| [acc[0] + forces[n][0], acc[1] + forces[n][1]]))
}
