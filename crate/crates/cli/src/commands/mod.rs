pub mod datagen;
pub mod diffusion;
pub mod dumps;
pub mod eval;
pub mod fem;
pub mod infer;
pub mod train;

use icm_core::dataset::Dataset;
use icm_core::tokenizer::DeformationToken;

use crate::CliResult;

/// Tokens of one material, one vector per field.
pub(crate) fn material_tokens(ds: &Dataset, i: usize) -> CliResult<Vec<Vec<DeformationToken>>> {
    let m = &ds.materials[i];
    Ok(m.fields
        .iter()
        .map(|f| icm_core::tokenizer::tokenize_field(&ds.meshes[f.geometry], &f.field))
        .collect::<icm_core::Result<Vec<_>>>()?)
}
