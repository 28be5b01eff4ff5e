//! Versioned JSON checkpoints with named parameter tensors.
//!
//! Parameters are stored as an ordered array, so serialization is
//! deterministic and files round-trip bit-exactly.

use super::{ModelConfig, ModelState};
use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::BufReader;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

pub fn save(model: &ModelState, path: &Path) -> CoreResult<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        params: model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load(path: &Path) -> CoreResult<ModelState> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(f))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CoreError::BadCheckpointVersion {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut model = ModelState::init(file.config, 0)?;
    let mut loaded = std::collections::HashMap::new();
    for p in file.params {
        let t = Tensor::new(p.shape, p.data).map_err(CoreError::Autodiff)?;
        loaded.insert(p.name, t);
    }
    for (name, slot) in model.named_params_mut() {
        let t = loaded.remove(&name).ok_or_else(|| {
            CoreError::InvalidConfig(format!("checkpoint missing parameter {name}"))
        })?;
        if t.shape() != slot.shape() {
            return Err(CoreError::DimensionMismatch(format!(
                "parameter {name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(CoreError::InvalidConfig(format!(
            "checkpoint has unknown parameter {extra}"
        )));
    }
    Ok(model)
}
