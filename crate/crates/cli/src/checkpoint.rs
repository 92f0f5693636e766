//! Checkpoint persistence: canonical JSON with stable key order and
//! shortest-round-trip float encoding, so save -> load -> save is
//! byte-identical and parameters survive bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sfnn_core::transfer::TransferReport;
use sfnn_core::{Error, NetworkSpec, Params, Result};

pub const FORMAT_VERSION: u32 = 1;

/// What stage of the pipeline produced the model. `DnnStar` marks a
/// simplified-SFNN exported for deterministic evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dnn,
    /// Simple transformation: stochastic first layer, plain layers above.
    Sfnn,
    SimplifiedSfnn,
    DnnStar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
}

/// Recorded with every artifact: enough to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Provenance {
            tool: "sfnn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub spec: NetworkSpec,
    pub params: Params,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
    pub provenance: Provenance,
}

impl Checkpoint {
    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format version {} (this build reads {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if let Some(v) = self.spec.hard_violations().first() {
            return Err(Error::InvalidNetwork(v.to_string()));
        }
        self.spec.check_params(&self.params)?;
        if let Some(t) = &self.transfer {
            let finite = t.end_to_end_bound.is_finite()
                && t.layers.iter().all(|l| {
                    l.gamma_lower.is_finite()
                        && l.max_preactivation.is_finite()
                        && l.tau.is_finite()
                });
            if !finite {
                return Err(Error::NonFinite("transfer report".into()));
            }
        }
        Ok(())
    }
}

pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.validate()?;
    let json = serde_json::to_string_pretty(checkpoint)
        .map_err(|e| Error::Data(format!("serialize checkpoint: {e}")))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("parse checkpoint: {e}")))?;
    checkpoint.validate()?;
    Ok(checkpoint)
}
