//! Synthetic tasks, evaluation, sweeps and reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod task;
pub mod world;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, run_shot_sweep, run_temperature_sweep, PipelineRun, Trained};
pub use report::{emit_report, evaluate_open, read_report, EvalReport, RunEcho, Split};
pub use task::{generate_synthetic_task, sample_few_shot, split_base_new, SyntheticTask, TaskSpec};
pub use world::{World, WorldConfig};
