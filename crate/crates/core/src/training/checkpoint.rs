use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::encoding::FeatureSpec;
use crate::error::{Error, Result};
use crate::numerics::{HasParams, Tensor};

use super::{JointModel, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing JSON snapshot of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub features: FeatureSpec,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    /// Epochs actually run.
    pub epochs: usize,
    pub val_auc_history: Vec<f64>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture(
        model: &JointModel,
        features: FeatureSpec,
        backbone: &BackboneConfig,
        train: &TrainConfig,
        epochs: usize,
        val_auc_history: Vec<f64>,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            features,
            model: backbone.clone(),
            train: train.clone(),
            epochs,
            val_auc_history,
            params: model
                .params()
                .into_iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn restore(&self) -> Result<JointModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut model = JointModel::new(self.features, &self.model, &self.train)?;
        let mut blocks = model.params_mut();
        if blocks.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameter blocks, model expects {}",
                self.params.len(),
                blocks.len()
            )));
        }
        for (block, rec) in blocks.iter_mut().zip(&self.params) {
            if block.name != rec.name || block.value.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "block `{}` {:?} does not match stored `{}` {:?}",
                    block.name,
                    block.value.shape(),
                    rec.name,
                    rec.shape
                )));
            }
            block.value = Tensor::from_vec(&rec.shape, rec.values.clone())
                .map_err(|e| Error::Checkpoint(format!("block `{}`: {e}", rec.name)))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
