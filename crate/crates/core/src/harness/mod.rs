//! Experiment driver: configuration, stage orchestration, ablations, outputs.

pub mod ablation;
pub mod config;
pub mod io;
pub mod pipeline;

pub use ablation::{run_ablations, sweep_queries, sweep_retrieval, AblationReport, Variant};
pub use config::ExperimentConfig;
pub use io::MetricsLog;
pub use pipeline::{run_pipeline, Lab, PipelineSummary, Runner};
