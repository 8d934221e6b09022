//! Reproducible experiments: configuration, the training pipeline,
//! evaluation reports, the proposal benchmark, gradient suites and the
//! empirical-average bias study.

pub mod artifacts;
mod bench;
mod bias;
mod config;
mod gradsuite;
mod pipeline;
pub mod stages;

pub use bench::{bench, query_bench_pairs, run_bench, shared_edge_pairs, BenchCounters, BenchReport, BenchRun, BenchTiming};
pub use bias::{bias_study, construct_case, BiasCase, BiasStudy};
pub use config::{BenchConfig, EvalConfig, PathsConfig, RunConfig, ScorerKind};
pub use gradsuite::{grad_suite, GradSuiteReport, SuiteResult, CHECKED_PATH_LEN, GRAD_TOLERANCE};
pub use pipeline::{
    evaluate, finetune, lstm_training_data, prepare_dataset, pretrain_lstm, query_pairs, run_pipeline, AjsSummary,
    DatasetSummary, Evaluation, Models, PipelineRun, Potentials, Report, TrainingSummary, MRF_PREFIX, SIAMESE_PREFIX,
};
