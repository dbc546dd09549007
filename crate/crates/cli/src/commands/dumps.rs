use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use icm_core::network::ContextInput;
use icm_core::tokenizer::{full_context, write_token_dump, Provenance};

use super::material_tokens;
use crate::{material_index, open_dataset, open_network, require, write_bytes, CliError, CliResult, GlobalArgs};

#[derive(Debug, Clone, Args)]
pub struct DumpTokensArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Material id or index.
    #[arg(long)]
    pub material: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DumpEmbeddingsArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// `<out>/tokens_<material>.icmt` with the normalized full context of the material.
pub fn run_tokens(g: &GlobalArgs, a: &DumpTokensArgs) -> CliResult<()> {
    let (_, ds) = open_dataset(&require(a.dataset.as_ref(), "--dataset")?)?;
    let i = material_index(&ds, a.material.as_deref())?;
    let tokens = material_tokens(&ds, i)?;
    let refs: Vec<_> = tokens.iter().map(|t| t.as_slice()).collect();
    let ctx = full_context(&refs, Provenance { material: ds.materials[i].id.clone(), ..Default::default() });
    let mut buf = Vec::new();
    write_token_dump(&mut buf, &ctx.tokens)?;
    write_bytes(&g.out.join(format!("tokens_{}.icmt", ds.materials[i].id)), &buf)
}

/// `<out>/embeddings.csv`: one row per field, the mean final-layer context embedding of that field alone.
pub fn run_embeddings(g: &GlobalArgs, a: &DumpEmbeddingsArgs) -> CliResult<()> {
    if g.oracle {
        return Err(CliError::Usage("--oracle has no embeddings".into()));
    }
    let net = open_network(&require(a.checkpoint.as_ref(), "--checkpoint")?)?;
    let (_, ds) = open_dataset(&require(a.dataset.as_ref(), "--dataset")?)?;
    let d = net.config.embed_dim;
    let mut csv = String::from("material,field,mode,step");
    for k in 0..d {
        let _ = write!(csv, ",e{k}");
    }
    csv.push('\n');
    for i in 0..ds.materials.len() {
        let m = &ds.materials[i];
        let tokens = material_tokens(&ds, i)?;
        for (f, t) in m.fields.iter().zip(&tokens) {
            let ctx = full_context(&[t.as_slice()], Provenance { material: m.id.clone(), fields: vec![f.id.clone()], seed: None });
            let emb = net.embed_contexts(&ContextInput::from_context(&ctx))?;
            let _ = write!(csv, "{},{},{},{}", m.id, f.id, f.mode.name(), f.step);
            for v in &emb.field_embedding {
                let _ = write!(csv, ",{v:e}");
            }
            csv.push('\n');
        }
    }
    write_bytes(&g.out.join("embeddings.csv"), csv.as_bytes())
}
