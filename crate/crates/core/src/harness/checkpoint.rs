//! JSON checkpoints. Floats are written in shortest round-trip form and
//! parsed exactly, so save → load → save reproduces the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::EmbeddingNet;
use super::{HarnessError, Result};
use crate::loss::LossKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Hash of the experiment config that produced the weights.
    pub config_hash: String,
    pub loss: LossKind,
    /// Optimizer steps taken.
    pub iteration: u64,
    pub net: EmbeddingNet,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint holds finite plain data")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| HarnessError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
