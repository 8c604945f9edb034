//! Parameter checkpoints: little-endian f64 values in `<stem>.bin` plus a JSON
//! sidecar `<stem>.json` describing the model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbedMeanConfig, EmbedMeanModel, LocalModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub num_params: usize,
    pub dim: usize,
    pub window: usize,
    pub local_regions: Vec<u32>,
    pub num_categories: usize,
}

impl CheckpointMeta {
    pub fn of(model: &EmbedMeanModel) -> Self {
        let EmbedMeanConfig { dim, window, .. } = model.config();
        Self {
            kind: "embed_mean".into(),
            num_params: model.num_params(),
            dim,
            window,
            local_regions: model.local_regions().to_vec(),
            num_categories: model.num_categories(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_checkpoint(model: &EmbedMeanModel, stem: &Path) -> Result<()> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let bytes: Vec<u8> = model.params().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let meta = serde_json::to_vec_pretty(&CheckpointMeta::of(model))?;
    fs::write(&json, meta).map_err(io_err(&json))?;
    Ok(())
}

/// Reads a checkpoint's sidecar and parameters.
pub fn read_checkpoint(stem: &Path) -> Result<(CheckpointMeta, Vec<f64>)> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&json).map_err(io_err(&json))?)?;
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != meta.num_params * 8 {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, sidecar expects {} parameters",
            bin.display(),
            bytes.len(),
            meta.num_params
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((meta, params))
}
