//! In-context constitutive modeling of hyperelastic solids.

pub mod diffusion;
pub mod discretization;
pub mod enn;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod materials;
pub mod network;
pub mod rng;
pub mod solver;
pub mod tokenizer;
pub mod training;

pub use error::{IcmError, Result};
