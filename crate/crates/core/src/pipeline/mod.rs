//! End-to-end workflows: configuration, training, evaluation, benchmarking.

mod bench;
mod config;
mod evaluate;
mod train;

pub use bench::{bench_scan, format_bench, median, parallel_chunk, scaling_exponent, BenchConfig, BenchRow, ScanOperands, EQUIVALENCE_TOL};
pub use config::{load_toml, parse_toml, save_toml, Precision, TrainConfig};
pub use evaluate::{evaluate_field, evaluate_pairs, identity_registration, register_pair, PairRegistration};
pub use train::{
    train, validation_dice, StepRecord, TrainSummary, ValidationRecord, BEST_CHECKPOINT, LAST_CHECKPOINT, LOSS_LOG,
    MODEL_CONFIG, VALIDATION_LOG,
};
