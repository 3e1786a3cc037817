use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{read_json, write_json};

use super::adapter::LoraAdapter;
use super::backbone::{init_backbone, BackboneConfig, FrozenBackbone};
use super::network::LoraModel;

pub const MODEL_FORMAT: &str = "uqlora-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: backbone descriptor plus every adapter matrix. The frozen
/// weights are regenerated from `(backbone, backbone_seed)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub adapters: Vec<LoraAdapter>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &LoraModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            backbone: model.backbone().config().clone(),
            backbone_seed: model.backbone().seed(),
            adapters: model.adapters().to_vec(),
        }
    }

    /// Rebuilds the model, reusing `backbone` when it matches the descriptor.
    pub fn into_model(self, backbone: Option<Arc<FrozenBackbone>>) -> Result<LoraModel> {
        check_header(&self.format, MODEL_FORMAT, self.version)?;
        let backbone = resolve_backbone(&self.backbone, self.backbone_seed, backbone)?;
        LoraModel::from_parts(backbone, self.adapters)
    }
}

pub(crate) fn check_header(format: &str, expected: &str, version: u32) -> Result<()> {
    if format != expected {
        return Err(Error::invalid(format!("expected a {expected} file, found {format:?}")));
    }
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

pub(crate) fn resolve_backbone(
    config: &BackboneConfig,
    seed: u64,
    cached: Option<Arc<FrozenBackbone>>,
) -> Result<Arc<FrozenBackbone>> {
    match cached {
        Some(b) if b.config() == config && b.seed() == seed => Ok(b),
        _ => Ok(Arc::new(init_backbone(config, seed)?)),
    }
}

pub fn save_model(model: &LoraModel, path: &Path) -> Result<()> {
    write_json(path, &ModelCheckpoint::from_model(model))
}

pub fn load_model(path: &Path) -> Result<LoraModel> {
    read_json::<ModelCheckpoint>(path)?.into_model(None)
}
