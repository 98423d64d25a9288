//! JSON checkpoints: model configuration, parameters, and the dataset
//! fingerprint needed to evaluate on the same normalized data.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Statistics the training data was normalized with.
    pub normalization: Option<NormalizationStats>,
    /// Checksum of the unnormalized dataset the model was trained on.
    pub dataset_checksum: String,
    pub parameters: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(
        model: &Classifier,
        normalization: Option<NormalizationStats>,
        dataset_checksum: impl Into<String>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: model.config().clone(),
            normalization,
            dataset_checksum: dataset_checksum.into(),
            parameters: model.parameters().clone(),
        }
    }

    pub fn classifier(&self) -> Result<Classifier> {
        Classifier::from_parameters(self.model.clone(), self.parameters.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::load(path, Some(e.line()), e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::load(
                path,
                None,
                format!("unsupported checkpoint format version {}", ckpt.format_version),
            ));
        }
        // shapes and finiteness are checked here rather than at first use
        ckpt.classifier().map_err(|e| Error::load(path, None, e.to_string()))?;
        Ok(ckpt)
    }
}
