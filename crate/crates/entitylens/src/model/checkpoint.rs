//! Model checkpoint: JSON manifest + f32 blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{Layout, ParamVec};
use crate::container::{self, TensorEntry, CONTAINER_SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Chat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: ParamVec<f32>,
    pub meta: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    kind: String,
    config: ModelConfig,
    training_meta: Option<TrainingMeta>,
    tensors: Vec<TensorEntry>,
    blob: String,
}

impl ModelCheckpoint {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Writes `{stem}.json` and `{stem}.bin` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let layout = self.layout();
        let tensors = layout
            .tensor_table()
            .into_iter()
            .map(|(name, slot)| TensorEntry::f32(name, vec![slot.rows, slot.cols], slot.offset))
            .collect();
        let manifest = Manifest {
            schema_version: CONTAINER_SCHEMA_VERSION,
            kind: "model_checkpoint".to_string(),
            config: self.config,
            training_meta: self.meta.clone(),
            tensors,
            blob: format!("{stem}.bin"),
        };
        let json_path = dir.join(format!("{stem}.json"));
        let bin_path = dir.join(format!("{stem}.bin"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
        container::write_f32_blob(&bin_path, &self.params.data)?;
        Ok((json_path, bin_path))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<ModelCheckpoint> {
        let json_path = dir.join(format!("{stem}.json"));
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
        if manifest.schema_version != CONTAINER_SCHEMA_VERSION || manifest.kind != "model_checkpoint"
        {
            return Err(Error::InvalidConfig(format!(
                "{} is not a v{CONTAINER_SCHEMA_VERSION} model checkpoint",
                json_path.display()
            )));
        }
        manifest.config.validate()?;
        let layout = Layout::new(&manifest.config);
        // The manifest table must agree with the layout for this config.
        let expected = layout.tensor_table();
        if manifest.tensors.len() != expected.len() {
            return Err(Error::ShapeMismatch {
                what: "checkpoint tensor table".to_string(),
                expected: format!("{} tensors", expected.len()),
                got: format!("{} tensors", manifest.tensors.len()),
            });
        }
        for (entry, (name, slot)) in manifest.tensors.iter().zip(&expected) {
            if &entry.name != name
                || entry.shape != vec![slot.rows, slot.cols]
                || entry.offset != slot.offset * 4
            {
                return Err(Error::ShapeMismatch {
                    what: format!("tensor {}", entry.name),
                    expected: format!("{name} {:?} @ {}", [slot.rows, slot.cols], slot.offset * 4),
                    got: format!("{} {:?} @ {}", entry.name, entry.shape, entry.offset),
                });
            }
        }
        let data = container::read_f32_blob(&dir.join(&manifest.blob), layout.total)?;
        let params = ParamVec { data };
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint {stem}")));
        }
        Ok(ModelCheckpoint {
            config: manifest.config,
            params,
            meta: manifest.training_meta,
        })
    }
}
