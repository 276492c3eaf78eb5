//! Measurement protocols: single-step decoding tables and multi-step
//! planning comparisons, with text, CSV, and JSON renderers.

mod manifest;
mod multi;
mod render;
mod single;

use thiserror::Error;

pub use manifest::{sha256_hex, RunManifest};
pub use multi::{bench_multi_step, common_solved, ConfigReport, MultiStepReport, PlanSetting, TargetRecord};
pub use render::{
    multi_step_csv, render_accuracy, render_beam_width_table, render_multi_step, render_single_step, single_step_csv,
};
pub use single::{bench_single_step, hsbs_drafts, CellReport, SingleStepOptions, SingleStepReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Decode(#[from] crate::decode::DecodeError),
    #[error(transparent)]
    Plan(#[from] crate::plan::PlanError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Results {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
