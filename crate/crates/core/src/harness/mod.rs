//! Synthetic tasks, the training loop, and strategy comparisons.

pub mod config;
pub mod data;
pub mod experiment;
pub mod optim;
pub mod schedule;
pub mod train;

pub use config::{load_config, parse_config, RunConfig};
pub use data::{generate, generate_sample, vocab, Category, Dataset, Sample, TaskKind, TaskSpec};
pub use experiment::{
    adaptation_gain, compare_strategies, grid_preset, median, sweep_lr, sweep_strategy_lr,
    ComparisonReport, ComparisonRow, ExperimentConfig, StrategySummary, SweepPoint, SweepResult,
    Workbench, DEFAULT_STAGE1_LR, PAPER_GRID,
};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{lr_schedule, warmup_steps, DEFAULT_WARMUP_RATIO};
pub use train::{
    evaluate, make_batch, train, Artifacts, Batch, EvalLoss, RunRecord, Split, StepLoss,
    TrainConfig,
};
