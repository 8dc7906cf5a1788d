//! Training, evaluation, fusion ablation and the gradient suite.

pub mod adam;
pub mod config;
pub mod gradsuite;
pub mod report;
pub mod run;

pub use adam::{adam_step, adam_update, AdamSettings, AdamState};
pub use config::RunConfig;
pub use gradsuite::{gradient_suite, suite_table, SuiteEntry};
pub use report::{mean_by_region, MetricsReport, ReportRow};
pub use run::{
    evaluate, evaluate_checkpoint, prepare_dataset, run_ablation, train, train_model, AblationArm,
    Prepared, TrainSettings,
};
