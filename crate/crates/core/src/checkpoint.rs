//! Model checkpoints on top of the tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{Error, Result};
use crate::model::{ModuleFlags, RadmModel};
use crate::training::TrainConfig;
use crate::types::ModelConfig;

pub const KIND: &str = "radm-checkpoint";

/// Source revision the library was built from.
pub const GIT_DESCRIBE: &str = env!("RADM_GIT_DESCRIBE");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub flags: ModuleFlags,
    pub seed: u64,
    pub step: usize,
    pub git: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: RadmModel<f32>,
}

pub fn encode_checkpoint(model: &RadmModel<f32>, train: &TrainConfig, step: usize) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        kind: KIND.into(),
        model: model.cfg.clone(),
        train: train.clone(),
        flags: model.flags,
        seed: train.seed,
        step,
        git: GIT_DESCRIBE.into(),
    };
    let tensors: Vec<_> = model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    Ok(container::encode(&serde_json::to_value(&meta)?, &tensors))
}

pub fn save_checkpoint(path: &Path, model: &RadmModel<f32>, train: &TrainConfig, step: usize) -> Result<()> {
    let bytes = encode_checkpoint(model, train, step)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Decodes a checkpoint. With `expect`, a checkpoint trained under other
/// module flags is rejected.
pub fn decode_checkpoint(bytes: &[u8], expect: Option<ModuleFlags>) -> Result<Checkpoint> {
    let c = container::decode(bytes)?;
    let meta: CheckpointMeta = serde_json::from_value(c.manifest)
        .map_err(|e| Error::Malformed(format!("checkpoint manifest: {e}")))?;
    if meta.kind != KIND {
        return Err(Error::Malformed(format!("container holds {:?}, not a checkpoint", meta.kind)));
    }
    if let Some(f) = expect {
        if f != meta.flags {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained as {} but {} was requested",
                meta.flags.name(),
                f.name()
            )));
        }
    }
    let mut model = RadmModel::<f32>::new(meta.model.clone(), meta.flags, 0)?;
    if c.tensors.len() != model.store.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} tensors, model has {}",
            c.tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in c.tensors {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Incompatible(format!("unknown tensor {name}")))?;
        let slot = model.store.get_mut(id);
        if slot.shape != t.shape {
            return Err(Error::Incompatible(format!(
                "tensor {name}: shape {:?} in file, {:?} expected",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    Ok(Checkpoint { meta, model })
}

pub fn load_checkpoint(path: &Path, expect: Option<ModuleFlags>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, expect)
}

/// Hex SHA-256 of the canonical JSON of a model configuration.
pub fn config_digest(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialization is infallible");
    Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
}
