//! Config-driven experiment runs, sweeps and their on-disk artifacts.

mod config;
mod output;
mod presets;
mod run;

pub use config::*;
pub use output::{
    fmt_float, metrics_csv, run, run_sweep, summary_row, sweep_points, write_artifacts, METRICS_COLUMNS,
    SUMMARY_COLUMNS,
};
pub use presets::{preset, PRESETS};
pub use run::*;
