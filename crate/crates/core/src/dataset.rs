//! Dataset generation (sample, solve, tokenize) and the on-disk manifest layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discretization::{generate_plate_mesh, GeometrySpec, Mesh, StrainField};
use crate::error::{IcmError, Result};
use crate::inference::FieldView;
use crate::materials::{normalize_polynomial_coefficients, sample_material_seeded, Family, MaterialModel, SubsetRule};
use crate::rng::mix;
use crate::solver::{run_load_program, LoadProgram, LoadingMode};
use crate::tokenizer::{tokenize_field, DeformationToken, FieldEntry, MaterialEntry, TokenDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialGroup {
    pub rule: SubsetRule,
    pub count: usize,
    /// Apply the two-step coefficient normalization (polynomials only).
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Offset into the sampling stream, so that disjoint sets can share a seed.
    #[serde(default)]
    pub first_index: u64,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub seed: u64,
    pub materials: Vec<MaterialGroup>,
    pub geometries: Vec<GeometrySpec>,
    pub programs: Vec<LoadProgram>,
    /// Prefix of material ids.
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

fn default_prefix() -> String {
    "m".into()
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.materials.is_empty() || self.geometries.is_empty() || self.programs.is_empty() {
            return Err(IcmError::InvalidConfig("datagen needs materials, geometries and programs".into()));
        }
        for p in &self.programs {
            p.validate()?;
        }
        Ok(())
    }
}

/// Sampled (and, for polynomials, normalized) materials of a config, in order.
pub fn sample_materials(cfg: &DatagenConfig) -> Result<Vec<(String, MaterialModel)>> {
    let mut out = Vec::new();
    for (gi, g) in cfg.materials.iter().enumerate() {
        let stream_seed = mix(cfg.seed, gi as u64 + 1);
        for k in 0..g.count {
            let index = g.first_index + k as u64;
            let raw = sample_material_seeded(g.rule, stream_seed, index)?;
            let m = if g.normalize && raw.family() == Family::Polynomial {
                normalize_polynomial_coefficients(&raw, cfg.seed)?
            } else {
                raw
            };
            out.push((format!("{}{:04}", cfg.prefix, out.len()), m));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GeneratedField {
    pub id: String,
    pub geometry: usize,
    pub mode: LoadingMode,
    pub step: usize,
    pub field: StrainField,
}

#[derive(Clone, Debug)]
pub struct GeneratedMaterial {
    pub id: String,
    pub material: MaterialModel,
    pub fields: Vec<GeneratedField>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveFailure {
    pub material: String,
    pub geometry: usize,
    pub mode: LoadingMode,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meshes: Vec<Mesh>,
    pub materials: Vec<GeneratedMaterial>,
    pub failures: Vec<SolveFailure>,
    pub attempted: usize,
}

pub fn mesh_id(g: usize) -> String {
    format!("g{g:02}")
}

fn field_id(material: &str, g: usize, mode: LoadingMode, step: usize) -> String {
    format!("{material}_{}_{}_s{step:02}", mesh_id(g), mode.name())
}

/// Solve every (material, geometry, program) tuple; failed solves are recorded and skipped.
/// Tuples are spread over `threads` workers and collected in a fixed order.
pub fn generate(cfg: &DatagenConfig, threads: usize) -> Result<Dataset> {
    cfg.validate()?;
    let meshes = cfg.geometries.iter().map(generate_plate_mesh).collect::<Result<Vec<_>>>()?;
    let materials = sample_materials(cfg)?;
    let mut tasks = Vec::new();
    for mi in 0..materials.len() {
        for gi in 0..meshes.len() {
            for pi in 0..cfg.programs.len() {
                tasks.push((mi, gi, pi));
            }
        }
    }
    let solve = |&(mi, gi, pi): &(usize, usize, usize)| {
        run_load_program(&meshes[gi], &mesh_id(gi), &materials[mi].1, &cfg.programs[pi])
    };
    let threads = threads.max(1).min(tasks.len().max(1));
    let results: Vec<Result<Vec<StrainField>>> = if threads == 1 {
        tasks.iter().map(solve).collect()
    } else {
        let chunk = tasks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = tasks.chunks(chunk).map(|c| s.spawn(move || c.iter().map(solve).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("datagen worker panicked")).collect()
        })
    };
    let mut out: Vec<GeneratedMaterial> = materials
        .iter()
        .map(|(id, m)| GeneratedMaterial { id: id.clone(), material: m.clone(), fields: Vec::new() })
        .collect();
    let mut failures = Vec::new();
    for (&(mi, gi, pi), r) in tasks.iter().zip(results) {
        let mode = cfg.programs[pi].mode;
        match r {
            Ok(fields) => {
                for (k, f) in fields.into_iter().enumerate() {
                    let id = field_id(&out[mi].id, gi, mode, k + 1);
                    out[mi].fields.push(GeneratedField { id, geometry: gi, mode, step: k + 1, field: f });
                }
            }
            Err(e) => {
                log::warn!("solve failed for {} on {} ({}): {e}", out[mi].id, mesh_id(gi), mode.name());
                failures.push(SolveFailure { material: out[mi].id.clone(), geometry: gi, mode, reason: e.to_string() });
            }
        }
    }
    Ok(Dataset { meshes, materials: out, failures, attempted: tasks.len() })
}

impl Dataset {
    pub fn failure_fraction(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.failures.len() as f64 / self.attempted as f64
        }
    }

    /// Tokens per material and field, aligned with `materials[i].fields`.
    pub fn tokenize(&self) -> Result<Vec<Vec<Vec<DeformationToken>>>> {
        self.materials
            .iter()
            .map(|m| m.fields.iter().map(|f| tokenize_field(&self.meshes[f.geometry], &f.field)).collect())
            .collect()
    }

    pub fn token_dataset(&self, tokens: &[Vec<Vec<DeformationToken>>]) -> TokenDataset {
        TokenDataset {
            materials: self
                .materials
                .iter()
                .zip(tokens)
                .map(|(m, t)| MaterialEntry {
                    id: m.id.clone(),
                    fields: m
                        .fields
                        .iter()
                        .zip(t)
                        .map(|(f, tk)| FieldEntry {
                            id: f.id.clone(),
                            geometry: f.geometry,
                            mode: f.mode,
                            step: f.step,
                            tokens: tk.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn views(&self, material: usize) -> Result<Vec<FieldView<'_>>> {
        self.materials[material].fields.iter().map(|f| FieldView::new(&self.meshes[f.geometry], &f.field)).collect()
    }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub file: String,
    pub geometry: usize,
    pub mode: LoadingMode,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub material: String,
    pub material_file: String,
    pub fields: Vec<FieldRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatagenConfig,
    pub meshes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    pub attempted: usize,
    pub failures: Vec<SolveFailure>,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| IcmError::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Write meshes, materials and fields under `root` plus `root/manifest.json`.
pub fn write_dataset(root: &Path, cfg: &DatagenConfig, ds: &Dataset) -> Result<PathBuf> {
    let mut meshes = Vec::new();
    for (g, mesh) in ds.meshes.iter().enumerate() {
        let rel = format!("meshes/{}.json", mesh_id(g));
        let path = root.join(&rel);
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, mesh.to_json()?)?;
        meshes.push(rel);
    }
    let mut samples = Vec::new();
    for m in &ds.materials {
        let material_file = format!("materials/{}.json", m.id);
        write_json(&root.join(&material_file), &m.material)?;
        let mut fields = Vec::new();
        for f in &m.fields {
            let file = format!("fields/{}.json", f.id);
            write_json(&root.join(&file), &f.field)?;
            fields.push(FieldRecord { file, geometry: f.geometry, mode: f.mode, step: f.step });
        }
        samples.push(SampleRecord { material: m.id.clone(), material_file, fields });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        meshes,
        samples,
        attempted: ds.attempted,
        failures: ds.failures.clone(),
    };
    let path = root.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Load a dataset from its manifest; relative paths resolve against the manifest's directory.
pub fn read_dataset(manifest_path: &Path) -> Result<(Manifest, Dataset)> {
    let manifest: Manifest = read_json(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(IcmError::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let meshes = manifest
        .meshes
        .iter()
        .map(|m| {
            let s = std::fs::read_to_string(root.join(m)).map_err(|e| IcmError::Format(format!("{m}: {e}")))?;
            Mesh::from_json(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut materials = Vec::new();
    for s in &manifest.samples {
        let material: MaterialModel = read_json(&root.join(&s.material_file))?;
        let mut fields = Vec::new();
        for f in &s.fields {
            let field: StrainField = read_json(&root.join(&f.file))?;
            let mesh = meshes
                .get(f.geometry)
                .ok_or_else(|| IcmError::Format(format!("{}: geometry {} missing", f.file, f.geometry)))?;
            field.check(mesh)?;
            let id = Path::new(&f.file).file_stem().and_then(|x| x.to_str()).unwrap_or(&f.file).to_string();
            fields.push(GeneratedField { id, geometry: f.geometry, mode: f.mode, step: f.step, field });
        }
        materials.push(GeneratedMaterial { id: s.material.clone(), material, fields });
    }
    let ds = Dataset { meshes, materials, failures: manifest.failures.clone(), attempted: manifest.attempted };
    Ok((manifest, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::Hole;

    fn config() -> DatagenConfig {
        DatagenConfig {
            seed: 4,
            materials: vec![MaterialGroup { rule: SubsetRule::PolynomialA, count: 5, normalize: true, first_index: 0 }],
            geometries: vec![GeometrySpec { side: 1.0, holes: vec![Hole::circle(0.5, 0.5, 0.2)], h: 0.12 }],
            programs: vec![LoadProgram::new(LoadingMode::Uniaxial, 0.2, 0.0, 3).unwrap()],
            prefix: "m".into(),
        }
    }

    #[test]
    fn counts_and_round_trip() {
        let cfg = config();
        let ds = generate(&cfg, 2).unwrap();
        assert!(ds.failures.is_empty());
        assert_eq!(ds.materials.iter().map(|m| m.fields.len()).sum::<usize>(), 15);
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &cfg, &ds).unwrap();
        let files = std::fs::read_dir(dir.path().join("fields")).unwrap().count();
        assert_eq!(files, 15);
        let (_, back) = read_dataset(&path).unwrap();
        for (a, b) in ds.materials.iter().zip(&back.materials) {
            assert_eq!(a.material, b.material);
            for (x, y) in a.fields.iter().zip(&b.fields) {
                assert_eq!(x.field, y.field);
                assert_eq!(x.id, y.id);
            }
        }
        let one = generate(&cfg, 1).unwrap();
        for (a, b) in ds.materials.iter().zip(&one.materials) {
            assert_eq!(a.fields.iter().map(|f| &f.field).collect::<Vec<_>>(), b.fields.iter().map(|f| &f.field).collect::<Vec<_>>());
        }
    }
}
