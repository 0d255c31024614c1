//! The optimization loop: loss composition, Adam, the cosine schedule with
//! warmup, token budgeting, and deterministic run execution.

mod adam;
mod metrics;
mod run;
mod schedule;

pub use adam::{adam_step, AdamState, ADAM_EPS};
pub use metrics::{
    load_imbalance, read_metrics, write_metrics, DomainCe, LayerMetrics, MetricsHeader,
    MetricsRecord, PoolMetrics, METRICS_SCHEMA, METRICS_VERSION,
};
pub use run::{macro_eval, total_loss, train_run, EvalSet, RunResult, TokenSource};
pub use schedule::lr_at;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("non-finite {component} at step {step}{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    NonFinite {
        step: u64,
        component: String,
        layer: Option<usize>,
    },
    #[error("schedule step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
}

/// Numeric precision of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Hyperparameters of one training run. Auxiliary-loss weights and the
/// bias step live on the layer spec, not here, so a configuration has one
/// source of truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: u64,
    pub end_lr_fraction: f64,
    pub total_tokens: u64,
    pub seed: u64,
    /// Evaluate held-out CE every this many steps (0 = final step only).
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// The published training configuration.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 512,
            seq_len: 2048,
            peak_lr: 4e-4,
            beta1: 0.9,
            beta2: 0.95,
            warmup_steps: 50,
            end_lr_fraction: 0.1,
            total_tokens: 0,
            seed: 0,
            eval_every: 0,
            precision: Precision::F32,
        }
    }

    /// Desk-scale defaults: same schedule shape, shrunk batch and sequence.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            seq_len: 128,
            ..Self::paper()
        }
    }

    /// Tokens consumed per optimizer step.
    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    /// Total optimizer steps: `total_tokens / (batch_size * seq_len)`,
    /// rounded down. Must cover at least the warmup.
    pub fn total_steps(&self) -> Result<u64, TrainError> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(TrainError::BadConfig(
                "batch_size and seq_len must be positive".to_string(),
            ));
        }
        let steps = self.total_tokens / self.tokens_per_step();
        if steps < self.warmup_steps.max(1) {
            return Err(TrainError::BadConfig(format!(
                "{steps} steps from {} tokens is below warmup {}",
                self.total_tokens, self.warmup_steps
            )));
        }
        Ok(steps)
    }
}
