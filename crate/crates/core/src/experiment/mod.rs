//! Config-driven experiments: parse, run per seed, write CSVs and summaries.

pub mod config;
pub mod runner;

pub use config::{DatasetConfig, ExperimentConfig, ModelConfig, PartitionConfig, ENV_OUT, ENV_SEED};
pub use runner::{
    compare, format_gradcheck, gradcheck, mean_std, run_experiment, run_seed, seed_dir,
    write_seed_outputs, CompareRow, ExperimentOutcome, SeedOutcome, COMPARE_COLUMNS,
};
