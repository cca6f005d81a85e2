//! JSON checkpoint files.
//!
//! ```text
//! {
//!   "format": "sata-checkpoint",
//!   "version": 1,
//!   "config": { ...ViTConfig... },
//!   "params": [ { "name": "patch_embed.weight", "shape": [48, 192], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameters appear in canonical order. Values are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelState, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "sata-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ViTConfig,
    params: Vec<NamedParam>,
}

pub fn save_checkpoint(path: &Path, cfg: &ViTConfig, state: &ModelState) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: state
            .named()
            .into_iter()
            .map(|(name, t)| NamedParam {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ViTConfig, ModelState)> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    let cfg = file.config;
    let template = ModelState::init(&cfg, 0)?;
    let expected = template.named();
    if expected.len() != file.params.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} tensors, checkpoint holds {}",
            expected.len(),
            file.params.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, t), p) in expected.iter().zip(file.params) {
        if *name != p.name || t.shape() != p.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "expected {name} {:?}, found {} {:?}",
                t.shape(),
                p.name,
                p.shape
            )));
        }
        tensors.push(Tensor::new(p.shape, p.data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    let state = template.from_flat(&tensors)?;
    Ok((cfg, state))
}
