//! Deformation tokens: per free node, the set of `(A^{n,e}, I^e)` over its
//! adjacent elements, plus context assembly and normalization.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discretization::{deformation_gradients, element_coefficients, element_invariants, Mesh, StrainField};
use crate::error::{IcmError, Result};
use crate::materials::{Invariants2D, I0};
use crate::solver::LoadingMode;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationSubtoken {
    pub element: usize,
    /// Raw `A^{n,e}`, row-major.
    pub a: [f64; 4],
    /// Row-normalized `Ā^{n,e}`, row-major.
    pub a_bar: [f64; 4],
    pub raw_i: Invariants2D,
    /// `(I - I0) / scale`, set when the token joins a context.
    pub i_hat: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationToken {
    pub node: usize,
    /// Index of the source field within its dataset entry or context.
    pub field: usize,
    /// Row root-sum-squares `η_i`.
    pub eta: [f64; 2],
    pub subtokens: Vec<DeformationSubtoken>,
}

/// Raw tokens of every free node of `field` (Ā filled in, Î zero).
pub fn tokenize_field(mesh: &Mesh, field: &StrainField) -> Result<Vec<DeformationToken>> {
    field.check(mesh)?;
    let fs = deformation_gradients(mesh, &field.displacements);
    let inv = element_invariants(&fs)?;
    let coeffs: Vec<[nalgebra::Matrix2<f64>; 3]> =
        (0..mesh.element_count()).map(|e| element_coefficients(mesh, &fs[e], e)).collect();
    let mut out = Vec::new();
    for n in field.free_nodes(mesh)? {
        let subtokens = mesh.adjacency[n]
            .iter()
            .map(|&e| {
                let k = mesh.local_index(n, e)?;
                let a = coeffs[e][k];
                Ok(DeformationSubtoken {
                    element: e,
                    a: [a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]],
                    a_bar: [0.0; 4],
                    raw_i: inv[e],
                    i_hat: [0.0; 2],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let token = DeformationToken { node: n, field: 0, eta: [0.0; 2], subtokens };
        match normalize_a(token) {
            Ok(t) => out.push(t),
            Err(e) => log::warn!("dropping token: {e}"),
        }
    }
    Ok(out)
}

/// `Ā_im = A_im / η_i`, `η_i = sqrt(Σ_{e,m} A_im²)` over the token.
pub fn normalize_a(mut token: DeformationToken) -> Result<DeformationToken> {
    let mut eta = [0.0f64; 2];
    for s in &token.subtokens {
        eta[0] += s.a[0] * s.a[0] + s.a[1] * s.a[1];
        eta[1] += s.a[2] * s.a[2] + s.a[3] * s.a[3];
    }
    let eta = eta.map(f64::sqrt);
    if eta.iter().any(|&v| !(v > 1e-300)) {
        return Err(IcmError::ZeroRowNorm(token.node));
    }
    for s in token.subtokens.iter_mut() {
        s.a_bar = [s.a[0] / eta[0], s.a[1] / eta[0], s.a[2] / eta[1], s.a[3] / eta[1]];
    }
    token.eta = eta;
    Ok(token)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub material: String,
    pub fields: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub tokens: Vec<DeformationToken>,
    pub invariant_center: [f64; 2],
    pub invariant_scale: f64,
    pub provenance: Provenance,
}

impl Context {
    /// Assemble a context and apply the invariant normalization.
    pub fn new(tokens: Vec<DeformationToken>, provenance: Provenance) -> Context {
        let mut c = Context { tokens, invariant_center: I0, invariant_scale: 1.0, provenance };
        normalize_invariants(&mut c);
        c
    }

    pub fn subtoken_count(&self) -> usize {
        self.tokens.iter().map(|t| t.subtokens.len()).sum()
    }

    pub fn normalize_query(&self, inv: Invariants2D) -> [f64; 2] {
        [
            (inv.i1 - self.invariant_center[0]) / self.invariant_scale,
            (inv.i3 - self.invariant_center[1]) / self.invariant_scale,
        ]
    }
}

/// `scale = sqrt(mean_𝒦 ‖I - I0‖²)` over all (node, element) pairs; 1 when below 1e-12.
pub fn normalize_invariants(ctx: &mut Context) {
    let c = ctx.invariant_center;
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in ctx.tokens.iter().flat_map(|t| &t.subtokens) {
        sum += (s.raw_i.i1 - c[0]).powi(2) + (s.raw_i.i3 - c[1]).powi(2);
        count += 1;
    }
    let rms = if count > 0 { (sum / count as f64).sqrt() } else { 0.0 };
    ctx.invariant_scale = if rms < 1e-12 { 1.0 } else { rms };
    let scale = ctx.invariant_scale;
    for s in ctx.tokens.iter_mut().flat_map(|t| t.subtokens.iter_mut()) {
        s.i_hat = [(s.raw_i.i1 - c[0]) / scale, (s.raw_i.i3 - c[1]) / scale];
    }
}

/// Every token of every field, in field order. Token `field` indices refer to positions in `fields`.
pub fn full_context(fields: &[&[DeformationToken]], provenance: Provenance) -> Context {
    let mut tokens = Vec::new();
    for (k, f) in fields.iter().enumerate() {
        tokens.extend(f.iter().cloned().map(|mut t| {
            t.field = k;
            t
        }));
    }
    Context::new(tokens, provenance)
}

/// Element states queried by the loss: the unique `(field, element)` pairs of the context.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub keys: Vec<(usize, usize)>,
    pub raw: Vec<Invariants2D>,
    pub normalized: Vec<[f64; 2]>,
    /// For each token, the query index of each of its subtokens.
    pub subtoken_query: Vec<Vec<usize>>,
}

pub fn context_queries(ctx: &Context) -> QueryBatch {
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut keys = Vec::new();
    let mut raw = Vec::new();
    let mut normalized = Vec::new();
    let mut subtoken_query = Vec::with_capacity(ctx.tokens.len());
    for t in &ctx.tokens {
        let mut row = Vec::with_capacity(t.subtokens.len());
        for s in &t.subtokens {
            let key = (t.field, s.element);
            let q = *index.entry(key).or_insert_with(|| {
                keys.push(key);
                raw.push(s.raw_i);
                normalized.push(s.i_hat);
                keys.len() - 1
            });
            row.push(q);
        }
        subtoken_query.push(row);
    }
    QueryBatch { keys, raw, normalized, subtoken_query }
}

/// Tokenized field with its place in the (geometry, mode, step) hierarchy.
#[derive(Clone, Debug)]
pub struct FieldEntry {
    pub id: String,
    pub geometry: usize,
    pub mode: LoadingMode,
    pub step: usize,
    pub tokens: Vec<DeformationToken>,
}

#[derive(Clone, Debug)]
pub struct MaterialEntry {
    pub id: String,
    pub fields: Vec<FieldEntry>,
}

#[derive(Clone, Debug, Default)]
pub struct TokenDataset {
    pub materials: Vec<MaterialEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingBounds {
    pub geometries: (usize, usize),
    pub modes: (usize, usize),
    pub steps: (usize, usize),
    pub fields: (usize, usize),
    pub tokens: (usize, usize),
}

impl Default for SamplingBounds {
    fn default() -> Self {
        SamplingBounds { geometries: (1, 7), modes: (1, 3), steps: (1, 10), fields: (1, 5), tokens: (100, 400) }
    }
}

impl SamplingBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("geometries", self.geometries),
            ("modes", self.modes),
            ("steps", self.steps),
            ("fields", self.fields),
            ("tokens", self.tokens),
        ] {
            if lo == 0 || lo > hi {
                return Err(IcmError::InvalidConfig(format!("sampling bound {name} = ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, items: &[T], range: (usize, usize)) -> Vec<T> {
    let hi = range.1.min(items.len());
    let lo = range.0.min(hi);
    let n = rng.gen_range(lo..=hi);
    let mut idx = sample_indices(rng, items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| items[k]).collect()
}

/// Hierarchical sampling of a training context for `material`:
/// geometries → modes → load steps build a candidate pool, then fields, then tokens.
/// Returns the context and the number of fields requested at the field level.
pub fn sample_training_context(
    dataset: &TokenDataset,
    material: usize,
    bounds: &SamplingBounds,
    rng: &mut impl Rng,
) -> Result<(Context, QueryBatch, usize)> {
    let entry = dataset
        .materials
        .get(material)
        .ok_or_else(|| IcmError::InvalidConfig(format!("material index {material} out of range")))?;
    if entry.fields.is_empty() {
        return Err(IcmError::InsufficientTokens { requested: bounds.tokens.0, available: 0 });
    }
    let mut geometries: Vec<usize> = entry.fields.iter().map(|f| f.geometry).collect();
    geometries.sort_unstable();
    geometries.dedup();
    let geos = pick(rng, &geometries, bounds.geometries);
    let mut modes: Vec<LoadingMode> = entry.fields.iter().filter(|f| geos.contains(&f.geometry)).map(|f| f.mode).collect();
    modes.sort_by_key(|m| m.name());
    modes.dedup();
    let chosen_modes = pick(rng, &modes, bounds.modes);
    let mut pool = Vec::new();
    for &m in &chosen_modes {
        let mut steps: Vec<usize> =
            entry.fields.iter().filter(|f| f.mode == m && geos.contains(&f.geometry)).map(|f| f.step).collect();
        steps.sort_unstable();
        steps.dedup();
        let chosen = pick(rng, &steps, bounds.steps);
        for (k, f) in entry.fields.iter().enumerate() {
            if f.mode == m && geos.contains(&f.geometry) && chosen.contains(&f.step) {
                pool.push(k);
            }
        }
    }
    let requested_fields = rng.gen_range(bounds.fields.0..=bounds.fields.1);
    let n_fields = requested_fields.min(pool.len());
    let mut chosen: Vec<usize> = sample_indices(rng, pool.len(), n_fields).into_iter().map(|k| pool[k]).collect();
    chosen.sort_unstable();

    let mut all: Vec<(usize, usize)> = Vec::new();
    for (slot, &fi) in chosen.iter().enumerate() {
        all.extend((0..entry.fields[fi].tokens.len()).map(|t| (slot, t)));
    }
    let requested = rng.gen_range(bounds.tokens.0..=bounds.tokens.1);
    let n_tokens = if all.len() < requested {
        if all.len() < bounds.tokens.0 {
            log::warn!(
                "{}; using all available tokens",
                IcmError::InsufficientTokens { requested: bounds.tokens.0, available: all.len() }
            );
        }
        all.len()
    } else {
        requested
    };
    if n_tokens == 0 {
        return Err(IcmError::InsufficientTokens { requested, available: 0 });
    }
    let mut picked = sample_indices(rng, all.len(), n_tokens).into_vec();
    picked.sort_unstable();
    let tokens: Vec<DeformationToken> = picked
        .into_iter()
        .map(|k| {
            let (slot, t) = all[k];
            let mut tok = entry.fields[chosen[slot]].tokens[t].clone();
            tok.field = slot;
            tok
        })
        .collect();
    let provenance = Provenance {
        material: entry.id.clone(),
        fields: chosen.iter().map(|&k| entry.fields[k].id.clone()).collect(),
        seed: None,
    };
    let ctx = Context::new(tokens, provenance);
    let queries = context_queries(&ctx);
    Ok((ctx, queries, requested_fields))
}

const TOKEN_MAGIC: &[u8; 4] = b"ICMT";
pub const DUMP_VERSION: u32 = 1;

/// Binary token dump: header `ICMT`, version, count; per token node id,
/// subtoken count, then `Ā` (4), `Î` (2), raw `I` (2) per subtoken.
pub fn write_token_dump(w: &mut impl Write, tokens: &[DeformationToken]) -> Result<()> {
    w.write_all(TOKEN_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(tokens.len() as u32).to_le_bytes())?;
    for t in tokens {
        w.write_all(&(t.node as u32).to_le_bytes())?;
        w.write_all(&(t.subtokens.len() as u32).to_le_bytes())?;
        for s in &t.subtokens {
            for v in s.a_bar.iter().chain(&s.i_hat).chain(&[s.raw_i.i1, s.raw_i.i3]) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Decoded dump record: `(node, [(Ā, Î, raw I)])`.
pub type DumpedToken = (u32, Vec<([f64; 4], [f64; 2], [f64; 2])>);

pub fn read_token_dump(r: &mut impl Read) -> Result<Vec<DumpedToken>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(IcmError::Format("not an ICMT token dump".into()));
    }
    let version = read_u32(r)?;
    if version != DUMP_VERSION {
        return Err(IcmError::Format(format!("unsupported token dump version {version}")));
    }
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let node = read_u32(r)?;
        let k = read_u32(r)? as usize;
        let mut subs = Vec::with_capacity(k);
        for _ in 0..k {
            let mut v = [0.0; 8];
            for x in v.iter_mut() {
                *x = read_f64(r)?;
            }
            subs.push(([v[0], v[1], v[2], v[3]], [v[4], v[5]], [v[6], v[7]]));
        }
        out.push((node, subs));
    }
    Ok(out)
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{generate_plate_mesh, GeometrySpec, Hole};
    use crate::materials::{normalize_polynomial_coefficients, sample_material_seeded, SubsetRule};
    use crate::rng::stream_rng;
    use crate::solver::{run_load_program, LoadProgram};

    fn setup() -> (Mesh, Vec<StrainField>, crate::materials::MaterialModel) {
        let mesh = generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h: 0.1 })
            .unwrap();
        let m = normalize_polynomial_coefficients(&sample_material_seeded(SubsetRule::PolynomialA, 3, 0).unwrap(), 0)
            .unwrap();
        let fields = run_load_program(&mesh, "g", &m, &LoadProgram::new(LoadingMode::Uniaxial, 0.2, 0.0, 3).unwrap())
            .unwrap();
        (mesh, fields, m)
    }

    #[test]
    fn one_token_per_free_node() {
        let (mesh, fields, _) = setup();
        let f = &fields[1];
        let tokens = tokenize_field(&mesh, f).unwrap();
        let free = f.free_nodes(&mesh).unwrap();
        assert_eq!(tokens.len(), free.len());
        let loaded: Vec<usize> = ["left", "right"].iter().flat_map(|s| mesh.boundary_set(s).unwrap().to_vec()).collect();
        assert!(tokens.iter().all(|t| !loaded.contains(&t.node)));
        for t in &tokens {
            assert_eq!(t.subtokens.len(), mesh.adjacency[t.node].len());
            let mut rs = [0.0; 2];
            for s in &t.subtokens {
                rs[0] += s.a_bar[0].powi(2) + s.a_bar[1].powi(2);
                rs[1] += s.a_bar[2].powi(2) + s.a_bar[3].powi(2);
            }
            assert!((rs[0] - 1.0).abs() < 1e-12 && (rs[1] - 1.0).abs() < 1e-12);
        }
    }

    fn single(a: [f64; 4]) -> DeformationToken {
        DeformationToken {
            node: 0,
            field: 0,
            eta: [0.0; 2],
            subtokens: vec![DeformationSubtoken {
                element: 0,
                a,
                a_bar: [0.0; 4],
                raw_i: Invariants2D::reference(),
                i_hat: [0.0; 2],
            }],
        }
    }

    #[test]
    fn three_four_five() {
        let t = normalize_a(single([3.0, 4.0, 0.0, 2.0])).unwrap();
        let b = t.subtokens[0].a_bar;
        assert!((b[0] - 0.6).abs() < 1e-15 && (b[1] - 0.8).abs() < 1e-15 && b[2] == 0.0 && b[3] == 1.0);
        // idempotent
        let mut again = t.clone();
        for s in again.subtokens.iter_mut() {
            s.a = s.a_bar;
        }
        let again = normalize_a(again).unwrap();
        assert_eq!(again.subtokens[0].a_bar, t.subtokens[0].a_bar);
        assert!(matches!(normalize_a(single([1.0, 0.0, 0.0, 0.0])), Err(IcmError::ZeroRowNorm(0))));
    }

    #[test]
    fn invariant_scale_rules() {
        let mut t = single([1.0, 0.0, 0.0, 1.0]);
        let ctx = Context::new(vec![t.clone()], Provenance::default());
        assert_eq!(ctx.invariant_scale, 1.0);
        assert_eq!(ctx.tokens[0].subtokens[0].i_hat, [0.0, 0.0]);
        // two-point RMS
        let v = [0.6, 0.8];
        let c = 0.3;
        let mut s2 = t.subtokens[0].clone();
        t.subtokens[0].raw_i = Invariants2D::new(2.0 + c * v[0], 1.0 + c * v[1]);
        s2.raw_i = Invariants2D::new(2.0 - c * v[0], 1.0 - c * v[1]);
        t.subtokens.push(s2);
        let ctx = Context::new(vec![t], Provenance::default());
        assert!((ctx.invariant_scale - c).abs() < 1e-15);
        let h = ctx.tokens[0].subtokens[0].i_hat;
        assert!((h[0] - v[0]).abs() < 1e-14 && (h[1] - v[1]).abs() < 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn i_hat_invariant_under_dilation(devs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..20), k in 0.1f64..10.0) {
            let build = |s: f64| {
                let tokens = devs.iter().enumerate().map(|(n, d)| {
                    let mut t = single([1.0, 0.0, 0.0, 1.0]);
                    t.node = n;
                    t.subtokens[0].raw_i = Invariants2D::new(2.0 + s * d.0, 1.0 + s * d.1);
                    t
                }).collect();
                Context::new(tokens, Provenance::default())
            };
            let a = build(1.0);
            let b = build(k);
            if a.invariant_scale > 1e-6 {
                for (x, y) in a.tokens.iter().zip(&b.tokens) {
                    for i in 0..2 {
                        proptest::prop_assert!((x.subtokens[0].i_hat[i] - y.subtokens[0].i_hat[i]).abs() < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_equilibrium_preserved() {
        let (mesh, fields, m) = setup();
        let f = &fields[2];
        let tokens = tokenize_field(&mesh, f).unwrap();
        let mut worst = 0.0f64;
        let mut rms = 0.0;
        let mut count = 0;
        for t in &tokens {
            let mut sum = [0.0; 2];
            for s in &t.subtokens {
                let g = m.grad_energy(s.raw_i).unwrap();
                let fe = [s.a_bar[0] * g[0] + s.a_bar[1] * g[1], s.a_bar[2] * g[0] + s.a_bar[3] * g[1]];
                rms += fe[0] * fe[0] + fe[1] * fe[1];
                count += 1;
                sum[0] += fe[0];
                sum[1] += fe[1];
            }
            worst = worst.max(sum[0].hypot(sum[1]));
        }
        let rms = (rms / count as f64).sqrt();
        assert!(worst / rms <= 1e-8, "{}", worst / rms);
    }

    #[test]
    fn refinement_invariance_of_a_bar() {
        // Affine field on a structured mesh and on a uniformly refined one; corresponding
        // interior nodes see the same Ā up to the element split.
        let coarse = generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![], h: 0.25 }).unwrap();
        let fine = generate_plate_mesh(&GeometrySpec { side: 1.0, holes: vec![], h: 0.125 }).unwrap();
        let g = nalgebra::Matrix2::new(0.1, 0.05, 0.0, -0.03);
        let field = |mesh: &Mesh| StrainField {
            mesh: "m".into(),
            displacements: mesh
                .nodes
                .iter()
                .map(|p| {
                    let v = g * nalgebra::Vector2::new(p[0], p[1]);
                    [v[0], v[1]]
                })
                .collect(),
            bcs: vec![],
        };
        let tc = tokenize_field(&coarse, &field(&coarse)).unwrap();
        let tf = tokenize_field(&fine, &field(&fine)).unwrap();
        let node_at = |mesh: &Mesh, p: [f64; 2]| {
            mesh.nodes.iter().position(|q| (q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12).unwrap()
        };
        let center = [0.5, 0.5];
        let a = tc.iter().find(|t| t.node == node_at(&coarse, center)).unwrap();
        let b = tf.iter().find(|t| t.node == node_at(&fine, center)).unwrap();
        let sorted = |t: &DeformationToken| {
            let mut v: Vec<[f64; 4]> = t.subtokens.iter().map(|s| s.a_bar).collect();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v
        };
        let (sa, sb) = (sorted(a), sorted(b));
        assert!(a.eta[0] != b.eta[0]);
        for (x, y) in sa.iter().zip(&sb) {
            for i in 0..4 {
                assert!((x[i] - y[i]).abs() < 1e-12);
            }
        }
    }

    fn dataset(steps: usize) -> TokenDataset {
        let (mesh, _, m) = setup();
        let program = LoadProgram::new(LoadingMode::Uniaxial, 0.2, 0.0, steps).unwrap();
        let fields = run_load_program(&mesh, "g", &m, &program).unwrap();
        let entries = fields
            .iter()
            .enumerate()
            .map(|(k, f)| FieldEntry {
                id: format!("f{k}"),
                geometry: 0,
                mode: LoadingMode::Uniaxial,
                step: k + 1,
                tokens: tokenize_field(&mesh, f).unwrap(),
            })
            .collect();
        TokenDataset { materials: vec![MaterialEntry { id: "m0".into(), fields: entries }] }
    }

    #[test]
    fn degenerate_bounds_and_determinism() {
        let ds = dataset(3);
        let bounds = SamplingBounds { fields: (1, 1), tokens: (10, 10), ..Default::default() };
        let mut rng = stream_rng(1, 0);
        let (ctx, q, _) = sample_training_context(&ds, 0, &bounds, &mut rng).unwrap();
        assert_eq!(ctx.tokens.len(), 10);
        assert!(ctx.tokens.iter().all(|t| t.field == 0));
        assert_eq!(ctx.provenance.fields.len(), 1);
        let mut seen: Vec<(usize, usize)> = q.keys.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), q.keys.len());
        let a = sample_training_context(&ds, 0, &bounds, &mut stream_rng(7, 0)).unwrap();
        let b = sample_training_context(&ds, 0, &bounds, &mut stream_rng(7, 0)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn field_count_distribution_is_uniform() {
        let ds = dataset(5);
        let bounds = SamplingBounds { steps: (5, 5), fields: (1, 5), tokens: (1, 1), ..Default::default() };
        let mut rng = stream_rng(2, 0);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let (ctx, _, requested) = sample_training_context(&ds, 0, &bounds, &mut rng).unwrap();
            assert_eq!(ctx.provenance.fields.len(), requested);
            counts[requested - 1] += 1;
        }
        let expected = 2000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // χ²(4) critical value at p = 0.01
        assert!(chi2 < 13.277, "{counts:?} chi2 {chi2}");
    }

    #[test]
    fn full_context_counts_and_dump_round_trip() {
        let ds = dataset(3);
        let fields: Vec<&[DeformationToken]> = ds.materials[0].fields.iter().map(|f| f.tokens.as_slice()).collect();
        let ctx = full_context(&fields, Provenance::default());
        assert_eq!(ctx.tokens.len(), fields.iter().map(|f| f.len()).sum::<usize>());
        let one = full_context(&fields[..1], Provenance::default());
        assert_eq!(one.tokens.len(), fields[0].len());
        let mut buf = Vec::new();
        write_token_dump(&mut buf, &ctx.tokens).unwrap();
        let back = read_token_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), ctx.tokens.len());
        for (d, t) in back.iter().zip(&ctx.tokens) {
            assert_eq!(d.0 as usize, t.node);
            for (x, s) in d.1.iter().zip(&t.subtokens) {
                assert_eq!(x.0, s.a_bar);
                assert_eq!(x.1, s.i_hat);
                assert_eq!(x.2, [s.raw_i.i1, s.raw_i.i3]);
            }
        }
    }

    #[test]
    fn scale_is_permutation_invariant() {
        let ds = dataset(2);
        let mut tokens: Vec<DeformationToken> = ds.materials[0].fields[1].tokens.clone();
        let a = Context::new(tokens.clone(), Provenance::default());
        tokens.reverse();
        let b = Context::new(tokens, Provenance::default());
        assert!((a.invariant_scale - b.invariant_scale).abs() <= 1e-15 * a.invariant_scale);
    }
}
