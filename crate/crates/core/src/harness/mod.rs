//! Configuration, stage orchestration, reports and the command line.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;

pub use config::{RunConfig, SelectorKind};
pub use report::{Report, Status, SCHEMA_VERSION};
pub use run::{ablation_suite, ablation_with, evaluate, pipeline, train_all, Ablation, Arm, Artifacts, Evaluation};
