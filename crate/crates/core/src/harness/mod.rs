//! Configuration, training, evaluation, export and benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod gradsuite;
pub mod train;

pub use bench::{benchmark_sampling, BenchConfig, BenchRow, BenchShape, ModeCost};
pub use checkpoint::Checkpoint;
pub use config::{DatasetConfig, OptimizerConfig, RunConfig};
pub use export::{class_separation, collect_embeddings, write_embeddings_csv, EmbeddingRow};
pub use gradsuite::{gradient_suite, toy_instance, ToyInstance};
pub use train::{
    evaluate, make_splits, read_log, run_training, LogRecord, RunOutputs, Splits, StepRecord, TrainOutcome, Trainer,
};
