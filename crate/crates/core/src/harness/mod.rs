//! Training, evaluation and the mode and ablation experiments.

mod experiments;
mod metrics;
mod optim;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{DataError, DatasetConfig};
use crate::model::{Mode, ModelConfig, ModelError, Variant};
use crate::simkit::{SimConfig, SimError};

pub use experiments::{
    build_benchmark, run_ablation, run_mode, run_variants, AblationRow, AblationTable, ModeRun, SPATIAL_PREFIXES,
};
pub use metrics::{
    baseline_persistence, evaluate, evaluate_predictions, predictions, write_predictions, FilterAudit, ItemMetrics,
    MetricsReport, PredictionRow, SplitMetrics,
};
pub use optim::Adam;
pub use train::{train, write_history, EpochRecord, StopReason, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Decoupled decay of weight matrices, embeddings and kernels per unit
    /// learning rate.
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub mode: Mode,
    pub gcn_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            weight_decay: 0.0,
            seed: 0,
            patience: 10,
            mode: Mode::S2P,
            gcn_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        Variant { mode: self.mode, gcn: self.gcn_enabled }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.learning_rate * self.weight_decay < 1.0) {
            return bad("weight_decay must be non-negative and below 1 / learning_rate");
        }
        Ok(())
    }
}

/// Everything one experiment needs, resolved before any work starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Keeps the dataset and model windows in step and checks every part.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.window != self.model.window || self.data.horizon != self.model.horizon {
            return Err(HarnessError::Config(format!(
                "data window/horizon {}/{} differ from model {}/{}",
                self.data.window, self.data.horizon, self.model.window, self.model.horizon
            )));
        }
        Ok(())
    }

    /// One seed drives simulation, split, initialization and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.rng_seed = seed;
        self.data.split_seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Short SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize");
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("split `{0}` has no examples")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}: non-finite loss on item {item} window {start}")]
    Diverged { epoch: usize, item: u32, start: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.window = 5;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::default().with_seed(3);
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train":{"epochs":3},"model":{"delta":0.4}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.delta, 0.4);
    }
}
