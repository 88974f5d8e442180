//! Data ingestion and the training loop.

mod bench;
mod dataset;
mod guard;
pub mod synth;
mod trainer;

pub use bench::{bench_csv, bench_depth, BenchRow, BENCH_HEADER};
pub use dataset::{
    binarize, dequantize, load_dataset, marginal_bernoulli_baseline, Binarization, Dataset,
    DatasetFormat, DatasetSpec,
};
pub use guard::{RollbackDecision, RollbackGuard};
pub use trainer::{loss_and_grads, BatchLoss, StepRecord, TrainConfig, TrainLog, Trainer};
