//! LoRA ensembles: independently trained adapter sets over one shared frozen
//! backbone, combined by averaging class probabilities.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::fsio::{read_json, write_json};
use crate::model::{
    check_header, resolve_backbone, BackboneConfig, FrozenBackbone, LoraAdapter, LoraModel, CHECKPOINT_VERSION,
};
use crate::train::{train_from_seed, LoraConfig, LossRecord, TrainConfig};

pub const DEFAULT_MEMBERS: usize = 3;
const ENSEMBLE_FORMAT: &str = "uqlora-ensemble";
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeds `base + m·φ` (wrapping), so member 0 reuses `base` itself.
pub fn member_seeds(base: u64, members: usize) -> Vec<u64> {
    (0..members as u64)
        .map(|m| base.wrapping_add(m.wrapping_mul(SEED_STRIDE)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub seed: u64,
    pub model: LoraModel,
}

#[derive(Clone, Debug)]
pub struct LoraEnsemble {
    backbone: Arc<FrozenBackbone>,
    members: Vec<EnsembleMember>,
}

impl LoraEnsemble {
    /// Every member must share the same backbone instance.
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
        let backbone = first.model.backbone().clone();
        if members.iter().any(|m| !Arc::ptr_eq(m.model.backbone(), &backbone)) {
            return Err(Error::invalid("ensemble members must share one backbone"));
        }
        Ok(Self { backbone, members })
    }

    pub fn backbone(&self) -> &Arc<FrozenBackbone> {
        &self.backbone
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &EnsembleCheckpoint::from_ensemble(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json::<EnsembleCheckpoint>(path)?.into_ensemble()
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleOutcome {
    pub ensemble: LoraEnsemble,
    pub loss_logs: Vec<Vec<LossRecord>>,
    pub warnings: Vec<String>,
}

/// Trains one member per seed (in parallel); member `m` is exactly what a
/// single run with `seeds[m]` would produce.
pub fn train_ensemble(
    backbone: Arc<FrozenBackbone>,
    train_set: &[EncodedExample],
    lora: &LoraConfig,
    config: &TrainConfig,
    members: usize,
    seeds: &[u64],
) -> Result<EnsembleOutcome> {
    if members == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    if seeds.len() != members {
        return Err(Error::invalid(format!(
            "{members} members need {members} seeds, got {}",
            seeds.len()
        )));
    }
    let mut warnings = Vec::new();
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            warnings.push(format!(
                "duplicate ensemble seed {s}: member {i} repeats an earlier member"
            ));
        }
    }
    let outcomes: Vec<_> = seeds
        .par_iter()
        .map(|&seed| train_from_seed(backbone.clone(), lora, train_set, config, seed))
        .collect::<Result<_>>()?;
    let mut loss_logs = Vec::with_capacity(members);
    let mut list = Vec::with_capacity(members);
    for (out, &seed) in outcomes.into_iter().zip(seeds) {
        loss_logs.push(out.loss_log);
        list.push(EnsembleMember { seed, model: out.model });
    }
    Ok(EnsembleOutcome {
        ensemble: LoraEnsemble::new(list)?,
        loss_logs,
        warnings,
    })
}

/// Arithmetic mean of member probabilities, summed in member order.
pub fn average_probabilities(member_probs: &[[f64; 2]]) -> Result<[f64; 2]> {
    if member_probs.is_empty() {
        return Err(Error::invalid("no member probabilities to average"));
    }
    let n = member_probs.len() as f64;
    let (a, b) = member_probs.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    Ok([a / n, b / n])
}

/// Ensemble class probabilities with each member in eval mode.
pub fn ensemble_predict(ensemble: &LoraEnsemble, tokens: &[u32]) -> Result<[f64; 2]> {
    Ok(ensemble_predict_members(ensemble, tokens)?.0)
}

/// Ensemble probability together with every member's own prediction.
pub fn ensemble_predict_members(ensemble: &LoraEnsemble, tokens: &[u32]) -> Result<([f64; 2], Vec<[f64; 2]>)> {
    let per: Vec<[f64; 2]> = ensemble
        .members
        .iter()
        .map(|m| m.model.predict_proba(tokens))
        .collect::<Result<_>>()?;
    Ok((average_probabilities(&per)?, per))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MemberCheckpoint {
    seed: u64,
    adapters: Vec<LoraAdapter>,
}

/// Backbone descriptor plus every member's adapters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleCheckpoint {
    format: String,
    version: u32,
    backbone: BackboneConfig,
    backbone_seed: u64,
    members: Vec<MemberCheckpoint>,
}

impl EnsembleCheckpoint {
    pub fn from_ensemble(e: &LoraEnsemble) -> Self {
        Self {
            format: ENSEMBLE_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            backbone: e.backbone.config().clone(),
            backbone_seed: e.backbone.seed(),
            members: e
                .members
                .iter()
                .map(|m| MemberCheckpoint {
                    seed: m.seed,
                    adapters: m.model.adapters().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_ensemble(self) -> Result<LoraEnsemble> {
        check_header(&self.format, ENSEMBLE_FORMAT, self.version)?;
        let backbone = resolve_backbone(&self.backbone, self.backbone_seed, None)?;
        let members = self
            .members
            .into_iter()
            .map(|m| {
                Ok(EnsembleMember {
                    seed: m.seed,
                    model: LoraModel::from_parts(backbone.clone(), m.adapters)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LoraEnsemble::new(members)
    }
}
