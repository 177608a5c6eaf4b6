//! Checkpoint files: one JSON header line carrying the payload digest,
//! then one JSON payload line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::policy::{AnchorSet, DiffusionSchedule, PolicyConfig, PolicyModel};

pub const CHECKPOINT_FORMAT: &str = "sharenav-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Payload {
    config: PolicyConfig,
    config_hash: String,
    schedule: DiffusionSchedule,
    anchors: AnchorSet,
    params: ParamStore,
}

pub fn config_hash(c: &PolicyConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(c).expect("config serializes")))
}

pub fn checkpoint_string(model: &PolicyModel) -> String {
    let payload = Payload {
        config: model.config.clone(),
        config_hash: config_hash(&model.config),
        schedule: model.schedule.clone(),
        anchors: model.anchors.clone(),
        params: model.store.clone(),
    };
    let body = serde_json::to_string(&payload).expect("payload serializes");
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        sha256: hex::encode(Sha256::digest(body.as_bytes())),
    };
    format!("{}\n{body}\n", serde_json::to_string(&header).expect("header serializes"))
}

pub fn save_checkpoint(model: &PolicyModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_string(model))?;
    Ok(())
}

pub fn parse_checkpoint(text: &str) -> Result<PolicyModel, CheckpointError> {
    let (head, body) = text.split_once('\n').ok_or_else(|| CheckpointError::Integrity("missing header line".into()))?;
    let body = body.strip_suffix('\n').unwrap_or(body);
    let header: Header = serde_json::from_str(head).map_err(|e| CheckpointError::Integrity(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Integrity(format!("unsupported {} v{}", header.format, header.version)));
    }
    if hex::encode(Sha256::digest(body.as_bytes())) != header.sha256 {
        return Err(CheckpointError::Integrity("payload digest mismatch".into()));
    }
    let mut p: Payload = serde_json::from_str(body).map_err(|e| CheckpointError::Integrity(format!("payload: {e}")))?;
    if config_hash(&p.config) != p.config_hash {
        return Err(CheckpointError::Config("config hash mismatch".into()));
    }
    p.params.reindex();
    let mut model = PolicyModel::new(p.config, p.anchors, p.schedule).map_err(|e| CheckpointError::Config(e.to_string()))?;
    if model.store.len() != p.params.len() {
        return Err(CheckpointError::Config(format!("{} tensors, model has {}", p.params.len(), model.store.len())));
    }
    for id in model.store.ids() {
        let name = model.store.name(id);
        let ok = p.params.id(name).is_some_and(|j| j == id && p.params.get(j).shape() == model.store.get(id).shape());
        if !ok {
            return Err(CheckpointError::Config(format!("parameter {name} missing or reshaped")));
        }
    }
    model.store = p.params;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyModel, CheckpointError> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}

/// Loads and checks that the horizon and spacing match what the caller expects.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &PolicyConfig) -> Result<PolicyModel, CheckpointError> {
    let m = load_checkpoint(path)?;
    if m.config.horizon != expected.horizon || m.config.dt != expected.dt {
        return Err(CheckpointError::Config(format!(
            "checkpoint horizon {} at {} s, expected {} at {} s",
            m.config.horizon, m.config.dt, expected.horizon, expected.dt
        )));
    }
    Ok(m)
}
