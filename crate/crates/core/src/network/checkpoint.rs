//! JSON checkpoints: genotype, build config, program, named parameters with
//! shapes, frozen flags, Adam state and training metadata.

use super::{Network, NetworkError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epochs: usize,
    pub evals: u64,
    pub best_value: Option<f64>,
    pub best_solution: Option<Vec<f64>>,
    pub objective: Option<String>,
    pub weight_seed: Option<u64>,
    pub input_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub network: Network,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(network: Network, meta: CheckpointMeta) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            network,
            meta,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| NetworkError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(NetworkError::Checkpoint(format!(
                "unsupported schema version {} (expected {CHECKPOINT_SCHEMA})",
                ck.schema
            )));
        }
        ck.network.restore_buffers();
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| NetworkError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetworkError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
