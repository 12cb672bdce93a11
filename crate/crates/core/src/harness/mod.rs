//! Experiment orchestration: datasets, training runs, sweeps and reports.

pub mod config;
pub mod dataset;
pub mod manifest;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod train;

pub use config::{AugmentPair, EvalConfig, Method, MethodSpec, RunConfig, Selection};
pub use dataset::{generate_dataset, raw_input_knn, Dataset, DatasetSpec, Split};
pub use manifest::{Checkpoint, EpochMetrics, EvalReport, RunManifest};
pub use report::{emit_report, read_metrics_csv, MetricsRow, METRICS_HEADER};
pub use sweep::{sweep, Axis, SweepPoint, SweepResult};
pub use train::{evaluate_checkpoint, evaluate_student, train, train_with, Direction, TrainOutcome, Trainer};
