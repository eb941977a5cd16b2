//! Self-describing JSON checkpoints. Resuming continues a run exactly where
//! it stopped: weights, optimizer moments, quantizer states and every RNG
//! counter are restored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ActivationStore, QuantizerSnapshot};
use crate::ledger::{LedgerReport, MemoryLedger};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamWState;
use crate::rng::{Rng, RngState};
use crate::scalar::Scalar;
use crate::task::SyntheticTask;
use crate::train::{RunStatus, StepMetrics, TrainConfig, Trainer, TrajectoryRow};

pub const FORMAT: &str = "actq-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct Checkpoint<T: Scalar = f32> {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub task: SyntheticTask,
    pub train_config: TrainConfig,
    pub step: u64,
    pub status: RunStatus,
    pub model: Model<T>,
    pub optimizer: AdamWState,
    pub quantizers: BTreeMap<String, QuantizerSnapshot>,
    pub data_rng: RngState,
    pub ledger: MemoryLedger,
    pub last_loss: Option<f64>,
    pub last_ledger: Option<LedgerReport>,
    pub metrics: Vec<StepMetrics>,
    pub trajectories: Vec<TrajectoryRow>,
}

impl<T: Scalar> Trainer<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model_config: self.model_config,
            task: self.task,
            train_config: self.config.clone(),
            step: self.step,
            status: self.status.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            quantizers: self.store.snapshot_quantizers(),
            data_rng: self.data_rng.state(),
            ledger: self.store.ledger().clone(),
            last_loss: self.last_loss,
            last_ledger: self.last_ledger.clone(),
            metrics: self.metrics.clone(),
            trajectories: self.trajectories.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut trainer = Trainer::new(ck.model_config, ck.task, ck.train_config)?;
        if ck.model.config != ck.model_config
            || ck.optimizer.m.len() != trainer.model.params().len()
        {
            return Err(Error::Checkpoint("model does not match its config".into()));
        }
        for ((name, fresh), (_, saved)) in trainer.model.params().iter().zip(ck.model.params()) {
            if fresh.shape() != saved.shape() {
                return Err(Error::Checkpoint(format!("{name} has the wrong shape")));
            }
        }
        trainer.model = ck.model;
        trainer.optimizer = ck.optimizer;
        let mut store = ActivationStore::new(trainer.config.policy, trainer.config.seed);
        store.set_shadow_exact(trainer.config.shadow_exact);
        store.restore_quantizers(&ck.quantizers);
        *store.ledger_mut() = ck.ledger;
        trainer.store = store;
        trainer.data_rng = Rng::from_state(&ck.data_rng);
        trainer.step = ck.step;
        trainer.status = ck.status;
        trainer.last_loss = ck.last_loss;
        trainer.last_ledger = ck.last_ledger;
        trainer.metrics = ck.metrics;
        trainer.trajectories = ck.trajectories;
        Ok(trainer)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
