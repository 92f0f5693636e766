//! Experiment configuration file: architecture plus training settings,
//! mirrored as JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sfnn_core::math::ActivationKind;
use sfnn_core::network::{LayerSpec, NetworkSpec, OutputHead};
use sfnn_core::training::TrainConfig;
use sfnn_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenLayerConfig {
    pub width: usize,
    pub activation: ActivationKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayerConfig>,
    pub head: OutputHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_m_train")]
    pub m_train: usize,
    #[serde(default = "default_m_eval")]
    pub m_eval: usize,
    /// Absent means: pick from the candidate grid by validation loss.
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    pub seed: u64,
}

fn default_batch() -> usize {
    128
}
fn default_m_train() -> usize {
    20
}
fn default_m_eval() -> usize {
    500
}
fn default_decay() -> f64 {
    0.98
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub train: TrainSection,
    /// Tail rows held out for validation.
    #[serde(default)]
    pub n_val: usize,
}

impl ExperimentConfig {
    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.arch.input_dim,
            layers: self
                .arch
                .hidden
                .iter()
                .map(|h| LayerSpec::Deterministic {
                    width: h.width,
                    activation: h.activation,
                })
                .collect(),
            head: self.arch.head,
        }
    }

    pub fn train_config(&self, base_lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            m_train: self.train.m_train,
            m_eval: self.train.m_eval,
            base_lr,
            lr_decay: self.train.lr_decay,
            seed: self.train.seed,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("parse config: {e}")))?;
    let spec = cfg.network_spec();
    if let Some(v) = spec.validate().first() {
        return Err(Error::InvalidNetwork(v.to_string()));
    }
    Ok(cfg)
}

/// Hex SHA-256 of a serializable value, used as the config hash in
/// provenance records.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
