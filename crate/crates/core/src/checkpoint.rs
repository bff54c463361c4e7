//! JSON checkpoints shared by all task models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::NamedTensor;
use crate::types::Task;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub task: Task,
    /// Model kind within the task, e.g. `va`, `expr_sub`, `au`.
    pub role: String,
    /// Training stage the parameters come from.
    pub stage: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Backbone variant index for ensemble members.
    #[serde(default)]
    pub arch_id: Option<usize>,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint {
                path: path.to_path_buf(),
                reason: format!("format version {}", ckpt.format_version),
            });
        }
        Ok(ckpt)
    }

    /// Fails unless the checkpoint holds a `role` model for `task`.
    pub fn expect(&self, task: Task, role: &str) -> Result<()> {
        if self.task != task || self.role != role {
            return Err(Error::IncompatibleCheckpoint {
                path: Default::default(),
                reason: format!(
                    "checkpoint holds a {}/{} model, expected {task}/{role}",
                    self.task, self.role
                ),
            });
        }
        Ok(())
    }
}
