//! Experiment harness: synthetic corpora, sweep orchestration over
//! configuration grids, metrics aggregation, and plot-ready CSV emission.

mod corpus;
mod export;
mod sweep;

pub use corpus::{kl_divergence, Corpus, CorpusSpec, GeneratorKind, TrainStream};
pub use export::{emit_long_csv, emit_plots_data, write_summary_csv};
pub use sweep::{
    eval_checkpoint, expand_grid, run_sweep, GridKind, GridParams, PoolDesc, RunStatus,
    RunSummary, SweepManifest, SweepOptions,
};

use thiserror::Error;

use crate::config::ConfigError;
use crate::model::{CheckpointError, ModelError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("cannot serialize: {0}")]
    Serialize(String),
    #[error("load_imbalance needs a nonzero load vector")]
    DegenerateLoads,
}

/// max/mean expert load in a batch; errors on all-zero loads.
pub fn load_imbalance(raw_loads: &[u64]) -> Result<f64, HarnessError> {
    crate::train::load_imbalance(raw_loads).ok_or(HarnessError::DegenerateLoads)
}

/// Macro-averaged held-out cross entropy (re-exported from the trainer so
/// the same code path feeds both per-step eval and the `eval` verb).
pub use crate::train::macro_eval as macro_avg_ce;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalance_examples() {
        assert_eq!(load_imbalance(&[5, 5, 5, 5]).unwrap(), 1.0);
        assert_eq!(load_imbalance(&[8, 0, 0, 0]).unwrap(), 4.0);
        assert_eq!(load_imbalance(&[3, 1]).unwrap(), 1.5);
        assert!(load_imbalance(&[0, 0]).is_err());
    }
}
