//! Trained-model file: one JSON document holding the format version, the
//! training configuration, the store fingerprint and every parameter.
//! `f64` values are written in shortest round-trip form, so a load
//! reproduces the saved model bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{FormatError, Result, UrtError};
use crate::layer::UrtParams;
use crate::store::FeatureStore;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub episode: usize,
    pub val_accuracy: f64,
    pub params: UrtParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub config: TrainConfig,
    pub store_fingerprint: String,
    /// Mean total loss over the last (up to) 100 training episodes.
    pub final_train_loss: f64,
    pub params: UrtParams,
    /// Best validation checkpoint, when validation ran.
    pub best_checkpoint: Option<Checkpoint>,
}

impl TrainedModel {
    pub fn new(
        params: UrtParams,
        config: TrainConfig,
        store: &FeatureStore,
        final_train_loss: f64,
        best_checkpoint: Option<Checkpoint>,
    ) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            config,
            store_fingerprint: store.fingerprint(),
            final_train_loss,
            params,
            best_checkpoint,
        }
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.num_heads() != self.config.heads || self.params.key_dim != self.config.key_dim
        {
            return Err(UrtError::Shape(format!(
                "model has H={}, l={} but its config says H={}, l={}",
                self.params.num_heads(),
                self.params.key_dim,
                self.config.heads,
                self.config.key_dim
            )));
        }
        if let Some(cp) = &self.best_checkpoint {
            cp.params.validate()?;
            if cp.params.num_backbones != self.params.num_backbones
                || cp.params.dim != self.params.dim
                || cp.params.num_heads() != self.params.num_heads()
                || cp.params.key_dim != self.params.key_dim
            {
                return Err(UrtError::Shape(
                    "best checkpoint shape differs from the final parameters".into(),
                ));
            }
        }
        Ok(())
    }

    /// Checks that the model was trained on (a store laid out like) `store`.
    pub fn check_store(&self, store: &FeatureStore) -> Result<()> {
        if store.num_backbones() != self.params.num_backbones || store.dim() != self.params.dim {
            return Err(UrtError::Shape(format!(
                "model expects m={}, d={} but the store has m={}, d={}",
                self.params.num_backbones,
                self.params.dim,
                store.num_backbones(),
                store.dim()
            )));
        }
        let fp = store.fingerprint();
        if fp != self.store_fingerprint {
            return Err(UrtError::Config(format!(
                "store fingerprint {fp} does not match the model's training store {}",
                self.store_fingerprint
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("model serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Hex SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: u32,
        }
        let bad = |e: serde_json::Error| FormatError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let probe: VersionProbe = serde_json::from_slice(bytes).map_err(bad)?;
        if probe.format_version != MODEL_FORMAT_VERSION {
            return Err(FormatError::Version {
                path: path.to_path_buf(),
                expected: MODEL_FORMAT_VERSION,
                found: probe.format_version,
            }
            .into());
        }
        let model: TrainedModel = serde_json::from_slice(bytes).map_err(bad)?;
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| UrtError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| UrtError::io(path, e))?;
    TrainedModel::from_bytes(&bytes, path)
}
