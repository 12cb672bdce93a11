//! Run manifests and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::harness::config::RunConfig;
use crate::model::{EncoderPair, StudentOptimizer};
use crate::support_set::SupportSnapshot;

pub const MANIFEST_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metrics for one epoch. Diagnostics are `None` when no anchor had a full
/// neighbor set (K = 0, or a support set still filling up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_mean: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub purity: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub inconsistency_mean: Option<f64>,
    pub per_position: Vec<f64>,
    pub per_position_cas: Vec<f64>,
    pub oracle_shortfalls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub knn_acc: f64,
    pub probe_acc: Option<f64>,
    pub probe_train_acc: Option<f64>,
    pub probe_final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildStamp {
    pub crate_version: String,
    pub parallel_feature: bool,
    pub os: String,
    pub arch: String,
}

impl BuildStamp {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            parallel_feature: cfg!(feature = "parallel"),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub config: RunConfig,
    pub epochs: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub step_lrs: Vec<f64>,
    /// KNN accuracy on raw inputs.
    pub raw_input_knn: f64,
    /// Evaluation of the randomly initialized student.
    pub baseline: EvalReport,
    pub final_eval: EvalReport,
    /// Later evaluations appended by `evaluate`.
    #[serde(default)]
    pub evaluations: Vec<EvalReport>,
    pub wall_clock_secs: f64,
    pub build: BuildStamp,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(invalid(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

/// Full training state after some number of epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub epochs_done: usize,
    pub global_step: usize,
    pub pair: EncoderPair,
    pub optimizer: StudentOptimizer,
    pub support: SupportSnapshot,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(invalid(format!("checkpoint {} does not exist", path.display())));
        }
        let c: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }
}
