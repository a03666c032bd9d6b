use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gelflex::datapipe::AugmentConfig;
use gelflex::experiments::{AngleSource, TaskKind, TrainSchedule};
use gelflex::kinematics::FingerGeometry;
use gelflex::models::SizeArch;
use gelflex::synthgen::SceneConfig;

use crate::CliError;

/// Per-field overrides of a task's default schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub epochs: Option<usize>,
    pub lr_init: Option<f64>,
    pub lr_final: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSelect {
    pub cameras: usize,
    pub arch: SizeArch,
    /// Angle inputs of the size network.
    pub angles: AngleSource,
    /// Contrast/gain augmentation and label noise while training the
    /// proprioception network.
    pub augment: bool,
}

impl Default for ModelSelect {
    fn default() -> Self {
        Self { cameras: 1, arch: SizeArch::Incorporator, angles: AngleSource::Predicted, augment: true }
    }
}

/// Everything a run depends on. Loaded from TOML, then overridden by flags;
/// the hash of the resolved value is stamped on every output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Option<TaskKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub count: Option<usize>,
    pub trials: Option<usize>,
    pub scene: SceneConfig,
    pub geometry: FingerGeometry,
    pub augment: AugmentConfig,
    pub schedule: ScheduleOverrides,
    pub model: ModelSelect,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.geometry.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.augment.validate().map_err(|e| CliError::config(e.to_string()))?;
        if !(1..=2).contains(&self.model.cameras) {
            return Err(CliError::config(format!("cameras must be 1 or 2, got {}", self.model.cameras)));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config. The output directory is left out:
    /// where results are written does not change them.
    pub fn hash(&self) -> String {
        let keyed = Self { out: None, ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&keyed).expect("config serializes")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::config("--seed is required"))
    }

    pub fn task(&self) -> Result<TaskKind, CliError> {
        self.task.ok_or_else(|| CliError::config("--task is required"))
    }

    pub fn schedule(&self, task: TaskKind) -> Result<TrainSchedule, CliError> {
        let seed = self.seed()?;
        let base = match task {
            TaskKind::Proprio => TrainSchedule::proprio(seed),
            TaskKind::Tactile => TrainSchedule::tactile(seed),
            TaskKind::Size => TrainSchedule::size(seed),
        };
        let o = &self.schedule;
        let s = TrainSchedule {
            epochs: o.epochs.unwrap_or(base.epochs),
            lr_init: o.lr_init.unwrap_or(base.lr_init),
            lr_final: o.lr_final.unwrap_or(base.lr_final),
            batch_size: o.batch_size.unwrap_or(base.batch_size),
            seed,
        };
        s.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(s)
    }
}
