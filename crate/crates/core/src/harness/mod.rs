//! Experiment orchestration: configuration, checkpoints, the staged
//! pipeline, paired ablations and reports.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod results;

pub use ablation::{ablate, Ablation};
pub use checkpoint::Checkpoint;
pub use config::{config_diff, EvalConfig, ExperimentConfig, SeedStream};
pub use pipeline::{run_end_to_end, RunDir};
pub use results::{render_comparison, render_markdown, report, ResultRow, ResultsTable};
