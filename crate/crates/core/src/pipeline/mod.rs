//! Stage orchestration, run directories and report rendering.

mod config;
mod report;
mod run;

pub use config::{ImportanceKind, Precision, RunConfig, Stage, STAGE_ORDER};
pub use report::{load_comparisons, render_report};
pub use run::{run_pipeline, RunManifest, StageRecord, StageStatus, CONFIG_FILE, MANIFEST_FILE, REPORT_FILE};
