//! Settings shared by the experiment commands and the acceptance suite.

use crate::workbench::Dataset;
use anyhow::Result;
use nd_surrogate::experiment::TestSet;
use nd_surrogate::model::{ModelConfig, Surrogate};
use nd_surrogate::train::{OptimizerKind, Strategy, TrainConfig};

/// Dataset used by the experiment suite: ten simulations per scheme.
pub const DATA_SEED: u64 = 7;
pub const DATA_PER_SCHEME: usize = 10;
pub const DATA_TEST: usize = 10;
pub const DATA_VAL: usize = 5;

/// Sweep windows.
pub const SWEEP_WINDOWS: [usize; 4] = [2, 3, 5, 8];

/// Desk-size model predicting the next state as an increment of the input.
pub fn model_config() -> ModelConfig {
    ModelConfig {
        residual: true,
        ..ModelConfig::desk()
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        window: 5,
        epochs_stf: 30,
        epochs_auto: 0,
        base_lr: 1e-3,
        warmup_epochs: 2,
        effective_batch: 4,
        windows_per_epoch: 64,
        drop_path_prob: 0.0,
        early_stop_eval_count: 3,
        master_seed: 11,
        strategy: Strategy::Stochastic,
        optimizer: OptimizerKind::Lion {
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
        },
        grad_clip: None,
    }
}

/// Initial model shared by every arm of an experiment.
pub fn initial_model(ds: &Dataset, config: ModelConfig) -> Result<Surrogate> {
    Ok(Surrogate::new(config, ds.norm_stats()?)?)
}

pub fn test_set(ds: &Dataset) -> TestSet<'_> {
    TestSet {
        trajectories: &ds.test,
        names: ds.test_names.clone(),
    }
}
