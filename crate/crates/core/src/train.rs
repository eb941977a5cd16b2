//! Training loop: task batches, forward/backward through the activation
//! store, AdamW, periodic metrics and quantizer trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ActivationStore, CompressionPolicy, StoreMode};
use crate::ledger::LedgerReport;
use crate::model::{cross_entropy, Model, ModelConfig};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
use crate::rng::Rng;
use crate::scalar::{Precision, Scalar};
use crate::task::{Batch, SyntheticTask};

pub const DEFAULT_LOG_STRIDE: u64 = 10;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Carries the quantizer settings, including the running-estimate decay.
    pub policy: CompressionPolicy,
    pub precision: Precision,
    /// Metrics and quantizer trajectories are logged every this many steps
    /// and at the final step.
    pub log_stride: u64,
    /// Keep an exact copy next to every compressed tensor and run backward
    /// from the copy. Debug aid for checking forward exactness end to end.
    pub shadow_exact: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 5e-2,
            seed: 0,
            policy: CompressionPolicy::none(),
            precision: Precision::Standard,
            log_stride: DEFAULT_LOG_STRIDE,
            shadow_exact: false,
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f32 {
        self.policy.quant.lambda
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.batch_size == 0 || self.log_stride == 0 {
            return Err(Error::Config(
                "batch size and log stride must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} is not positive",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} is negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the training batch.
    pub accuracy: f64,
    pub ledger: LedgerSnapshot,
}

/// Ledger totals for one step's stored activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub baseline_bytes: u64,
    pub actual_bytes: u64,
    pub quant_param_bytes: u64,
    pub reduction_ratio: f64,
    pub peak_baseline_bytes: u64,
    pub peak_actual_bytes: u64,
}

impl From<&LedgerReport> for LedgerSnapshot {
    fn from(r: &LedgerReport) -> Self {
        LedgerSnapshot {
            baseline_bytes: r.baseline_bytes,
            actual_bytes: r.actual_bytes,
            quant_param_bytes: r.quant_param_bytes,
            reduction_ratio: r.reduction_ratio,
            peak_baseline_bytes: r.peak_baseline_bytes,
            peak_actual_bytes: r.peak_actual_bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub layer: String,
    pub group: usize,
    pub alpha: f32,
    pub beta: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub status: RunStatus,
    pub steps_completed: u64,
    pub param_count: usize,
    pub final_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Stored activations of the last completed step.
    pub ledger: Option<LedgerReport>,
    /// Peak concurrently-stored bytes, `(baseline, actual)`.
    pub peak_bytes: (u64, u64),
    pub metrics: Vec<StepMetrics>,
    pub trajectories: Vec<TrajectoryRow>,
}

/// A resumable training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f32> {
    pub(crate) model_config: ModelConfig,
    pub(crate) task: SyntheticTask,
    pub(crate) config: TrainConfig,
    pub(crate) model: Model<T>,
    pub(crate) optimizer: AdamWState,
    pub(crate) store: ActivationStore,
    pub(crate) data_rng: Rng,
    pub(crate) step: u64,
    pub(crate) status: RunStatus,
    pub(crate) last_loss: Option<f64>,
    pub(crate) last_ledger: Option<LedgerReport>,
    pub(crate) metrics: Vec<StepMetrics>,
    pub(crate) trajectories: Vec<TrajectoryRow>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model_config: ModelConfig,
        task: SyntheticTask,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        task.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config asks for {:?} precision, trainer runs {:?}",
                config.precision,
                T::PRECISION
            )));
        }
        if task.vocab_size != model_config.vocab_size
            || task.seq_len != model_config.seq_len
            || task.num_classes() != model_config.num_classes
        {
            return Err(Error::Config(
                "task vocabulary, length or classes differ from the model".into(),
            ));
        }
        let model = Model::<T>::new(model_config, config.seed)?;
        let optimizer = AdamWState::new(
            AdamWConfig::default(),
            model.params().iter().map(|(_, p)| p.len()),
        );
        let mut store = ActivationStore::new(config.policy, config.seed);
        store.set_shadow_exact(config.shadow_exact);
        let data_rng = Rng::derive(config.seed, "train.data");
        Ok(Trainer {
            model_config,
            task,
            config,
            model,
            optimizer,
            store,
            data_rng,
            step: 0,
            status: RunStatus::Completed,
            last_loss: None,
            last_ledger: None,
            metrics: Vec::new(),
            trajectories: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn store(&self) -> &ActivationStore {
        &self.store
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps || self.status != RunStatus::Completed
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    /// Runs one optimization step. Numerical failures end the run with a
    /// diverged status instead of an error.
    pub fn train_step(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        match self.try_step() {
            Ok(()) => Ok(()),
            Err(e) if e.is_numerical() => {
                self.status = RunStatus::Diverged {
                    step: self.step,
                    reason: e.to_string(),
                };
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn try_step(&mut self) -> Result<()> {
        let step = self.step;
        let lr = cosine_lr(self.config.lr, step, self.config.steps);
        let batch = self.task.sample(self.config.batch_size, &mut self.data_rng);
        let n = batch.len();
        self.store.ledger_mut().begin_step(step);
        let (logits, mut tape) = self.model.forward(&batch.tokens, n, &mut self.store)?;
        let ledger = self.store.ledger().report();
        let (loss, dlogits, correct) = cross_entropy(&logits, &batch.labels)?;
        let grads = self.model.backward(&mut tape, &dlogits, &mut self.store)?;

        let decay: Vec<bool> = self
            .model
            .params()
            .iter()
            .map(|(_, p)| p.rank() == 2)
            .collect();
        let grad_refs: Vec<_> = grads.entries.iter().map(|(_, g)| g).collect();
        let mut params: Vec<_> = self
            .model
            .params_mut()
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        adamw_step(
            &mut params,
            &grad_refs,
            &decay,
            &mut self.optimizer,
            lr,
            self.config.weight_decay,
        )?;

        self.step += 1;
        let loss = loss.to_f64();
        self.last_loss = Some(loss);
        if self.step.is_multiple_of(self.config.log_stride) || self.step == self.config.steps {
            self.metrics.push(StepMetrics {
                step: self.step,
                lr,
                loss,
                accuracy: correct as f64 / n as f64,
                ledger: (&ledger).into(),
            });
            self.log_trajectories();
        }
        self.last_ledger = Some(ledger);
        Ok(())
    }

    fn log_trajectories(&mut self) {
        for (layer, q) in self.store.quantizers() {
            if !q.state.initialized {
                continue;
            }
            for (group, (&alpha, &beta)) in q.state.alpha.iter().zip(&q.state.beta).enumerate() {
                self.trajectories.push(TrajectoryRow {
                    step: self.step,
                    layer: layer.clone(),
                    group,
                    alpha,
                    beta,
                });
            }
        }
    }

    /// Runs up to `n` more steps.
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.train_step()?;
        }
        Ok(())
    }

    /// Accuracy of the current weights on `batch`, computed without storing
    /// anything.
    pub fn evaluate(&self, batch: &Batch) -> Result<f64> {
        let n = self.model_config.seq_len;
        let mut correct = 0;
        for (toks, labels) in batch
            .tokens
            .chunks(EVAL_CHUNK * n)
            .zip(batch.labels.chunks(EVAL_CHUNK))
        {
            let logits = self.model.infer(toks, labels.len())?;
            correct += cross_entropy(&logits, labels)?.2;
        }
        Ok(correct as f64 / batch.len() as f64)
    }

    /// Trains to completion and evaluates on the task's held-out draw.
    pub fn run(mut self) -> Result<TrainReport> {
        self.run_steps(self.config.steps)?;
        self.finish()
    }

    pub fn finish(mut self) -> Result<TrainReport> {
        self.store.set_mode(StoreMode::Eval);
        let eval_accuracy = match self.status {
            RunStatus::Completed => Some(self.evaluate(&self.task.eval_set())?),
            RunStatus::Diverged { .. } => None,
        };
        Ok(TrainReport {
            status: self.status,
            steps_completed: self.step,
            param_count: self.model.param_count(),
            final_loss: self.last_loss,
            eval_accuracy,
            ledger: self.last_ledger,
            peak_bytes: self.store.ledger().peak_bytes(),
            metrics: self.metrics,
            trajectories: self.trajectories,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    fn tiny() -> (ModelConfig, SyntheticTask) {
        let m = ModelConfig {
            depth: 1,
            dim: 16,
            heads: 2,
            seq_len: 8,
            mlp_ratio: 2,
            num_classes: 2,
            vocab_size: 8,
        };
        (
            m,
            SyntheticTask::new(TaskKind::MarkerDetection, 8, 8, 1).unwrap(),
        )
    }

    fn cfg(policy: CompressionPolicy, steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            policy,
            log_stride: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn logs_at_stride_and_final_step() {
        let (m, t) = tiny();
        let report = Trainer::<f32>::new(m, t, cfg(CompressionPolicy::all(), 7))
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(report.status, RunStatus::Completed);
        let steps: Vec<u64> = report.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, [3, 6, 7]);
        assert!(report.eval_accuracy.is_some());
        assert!(!report.trajectories.is_empty());
        assert!(report.peak_bytes.1 < report.peak_bytes.0);
    }

    #[test]
    fn divergence_is_reported() {
        let (m, t) = tiny();
        let mut c = cfg(CompressionPolicy::none(), 5);
        c.lr = 1e30;
        let report = Trainer::<f32>::new(m, t, c).unwrap().run().unwrap();
        assert!(matches!(report.status, RunStatus::Diverged { .. }));
        assert!(report.eval_accuracy.is_none());
    }

    #[test]
    fn rejects_mismatched_setup() {
        let (m, t) = tiny();
        let wrong = SyntheticTask { vocab_size: 9, ..t };
        assert!(Trainer::<f32>::new(m, wrong, cfg(CompressionPolicy::none(), 1)).is_err());
        let mut c = cfg(CompressionPolicy::none(), 1);
        c.precision = Precision::Oracle;
        assert!(Trainer::<f32>::new(m, t, c.clone()).is_err());
        assert!(Trainer::<f64>::new(m, t, c).is_ok());
    }
}
