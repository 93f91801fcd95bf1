//! Trained-model snapshots as self-describing JSON documents.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::write_atomic;
use crate::diffcore::{Parameter, ParameterStore};
use crate::encoders::FeatureDims;
use crate::error::{Error, Result};
use crate::model::MoeHealthModel;
use crate::moe::{ExpertPool, Fusion};
use crate::trainer::{apply_ablation, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "moe-health-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: FeatureDims,
    pub pool: ExpertPool,
    pub best_epoch: Option<usize>,
    pub params: ParameterStore,
    /// Run provenance such as the dataset digest.
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct ParameterRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrainConfig,
    dims: FeatureDims,
    pool: ExpertPool,
    best_epoch: Option<usize>,
    #[serde(default)]
    meta: Value,
    parameters: Vec<ParameterRecord>,
}

impl Checkpoint {
    pub fn model(&self) -> MoeHealthModel {
        MoeHealthModel::new(apply_ablation(&self.config).model, self.dims, self.pool.clone())
    }

    pub fn fusion(&self) -> Fusion {
        apply_ablation(&self.config).fusion
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            dims: self.dims,
            pool: self.pool.clone(),
            best_epoch: self.best_epoch,
            meta: self.meta.clone(),
            parameters: self
                .params
                .iter()
                .map(|p| ParameterRecord {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    /// Parses a checkpoint and checks that its parameters are exactly the
    /// ones its configuration would create.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_slice(bytes)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let mut params = ParameterStore::new();
        for r in file.parameters {
            params.insert(Parameter::new(r.name, r.shape, r.values)?)?;
        }
        let ckpt = Checkpoint {
            config: file.config,
            dims: file.dims,
            pool: file.pool,
            best_epoch: file.best_epoch,
            params,
            meta: file.meta,
        };
        let template = ckpt.model().init(&mut ChaCha8Rng::seed_from_u64(0))?;
        if template.len() != ckpt.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                ckpt.params.len(),
                template.len()
            )));
        }
        for p in template.iter() {
            let have = ckpt.params.by_name(&p.name)?;
            if have.shape != p.shape {
                return Err(Error::shape("checkpoint", &p.shape, &have.shape));
            }
            if have.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "checkpoint" });
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_json()?)))
    }
}
