//! Segmentation metrics, ablation sweeps and report rendering.

pub mod metrics;
pub mod report;
pub mod sweep;

pub use metrics::{evaluate, evaluate_labels, ConfusionMatrix, MiouResult};
pub use report::{render_report, results_csv, LinePlot, Series};
pub use sweep::{median, parse_grid, run_sweep, RunRecord, Setting, SettingResult, SweepAbort, SweepResult};
