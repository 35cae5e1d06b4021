//! Training loop, evaluation metrics, experiment runners and report files.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, ExperimentKind, Precision};
pub use experiment::{
    build_model, evaluate, fit_model, load_model, model_from_checkpoint, run_experiment, Evaluation, ExperimentOutput,
};
pub use metrics::{evaluate_mse, source_class_ranking, source_class_topk, SourceRanking};
pub use report::{export_report, parse_csv, to_csv, MetricsReport, MetricsRow, RunManifest};
pub use train::{stopping_point, train, EarlyStopping, TrainConfig, TrainReport};
