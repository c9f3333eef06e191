//! Checkpoint directories: one matrix CSV (plus sidecar) per parameter and
//! a JSON manifest holding the model configuration. Constructions and
//! trained models share the format, so every analysis works on either.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::io::{read_matrix_csv, write_matrix_csv};
use crate::numerics::rng::{Seed, SeedStream};

pub const CHECKPOINT_FORMAT: &str = "icl-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    /// parameter matrices in flatten order
    pub matrices: Vec<String>,
    /// free-form provenance (training step, construction kind, ...)
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    params: &ModelParams,
    meta: serde_json::Value,
) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let named = params.named();
    for (name, m) in &named {
        write_matrix_csv(dir, name, m)?;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        model: cfg.clone(),
        matrices: named.into_iter().map(|(n, _)| n).collect(),
        meta,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelParams, serde_json::Value)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidParam(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    manifest.model.validate()?;
    // the config fully determines the parameter shapes; a throwaway init
    // provides the structural template
    let template = ModelParams::init(&manifest.model, &mut SeedStream::new(Seed(0)))?;
    let expected: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
    if expected != manifest.matrices {
        return Err(Error::InvalidParam(format!(
            "manifest matrices do not match the model config: expected {:?}, got {:?}",
            expected, manifest.matrices
        )));
    }
    let flat: Result<Vec<_>> = manifest
        .matrices
        .iter()
        .map(|name| read_matrix_csv(dir, name))
        .collect();
    let params = template.unflatten_like(&flat?)?;
    Ok((manifest.model, params, manifest.meta))
}
