//! Experiment orchestration: configuration, training with separate learning
//! rates for the model and the suppression scales, grid search over fixed
//! scales and thresholds, evaluation, and attention-statistics export.
//!
//! Reports are CSV. A training run with an output directory writes
//! `report.csv`, `s_trajectory.csv`, `checkpoint.json`, and
//! `run_config.txt` (the resolved configuration including normalization
//! constants); a grid writes `grid.csv`; an attention export writes
//! `attn_layer{L}_head{H}.csv` and `attn_layer{L}_head{H}_hist.csv`.

mod attn_report;
mod config;
mod grid;
mod train;

pub use attn_report::{
    attention_report, export_attention_report, head_file, hist_file, write_report, AttentionReport,
    HeadTable, ReportRow, ROW_HEADER,
};
pub use config::{
    DataSpec, DatasetKind, RunConfig, Schedule, CIFAR100_LR2, DATA_DIR_ENV, DEFAULT_LR2,
};
pub use grid::{
    baseline_config, cell_config, grid_search, grid_search_on, Cell, GridResult, GRID_FILE,
};
pub use train::{
    evaluate, evaluate_state, load_data, train, train_on, train_step, EpochMetrics, TrainReport,
    CHECKPOINT_FILE, REPORT_FILE, RUN_CONFIG_FILE, S_TRAJECTORY_FILE,
};
