//! Named parameter tensors and the binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Weight matrices are the only tensors treated as 2D by Muon.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    pub tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape, data });
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![0.0; t.data.len()] })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &ParameterSet, c: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += c * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self, other: &ParameterSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(IcmError::ShapeMismatch(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(IcmError::ShapeMismatch(format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape)));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header<C> {
    format_version: u32,
    config: C,
    manifest: Vec<ManifestEntry>,
}

/// Magic, u64 header length, JSON header, then every tensor as little-endian f64 in manifest order.
pub fn write_checkpoint<C: Serialize>(w: &mut impl Write, config: &C, params: &ParameterSet) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config,
        manifest: params.tensors.iter().map(|t| ManifestEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.parameter_count() * 8);
    for t in &params.tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint; the caller validates the tensors against the layout built from the config.
pub fn read_checkpoint<C: for<'de> Deserialize<'de>>(r: &mut impl Read) -> Result<(C, ParameterSet)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(IcmError::Format("not an ICM checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header<C> = serde_json::from_slice(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(IcmError::Format(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let mut params = ParameterSet::default();
    for e in header.manifest {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(e.name, e.shape, data);
    }
    Ok((header.config, params))
}

pub fn save_checkpoint<C: Serialize>(path: &Path, config: &C, params: &ParameterSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, config, params)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<(C, ParameterSet)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
