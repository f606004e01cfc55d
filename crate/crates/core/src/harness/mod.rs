//! Experiment pipeline: dataset generation, training, calibration,
//! evaluation and CSV reports.

pub mod config;
pub mod data;
pub mod pipeline;
pub mod report;


pub use config::{ExperimentConfig, Mode, SCHEMA_VERSION};
pub use data::{generate_datasets, Datasets, Role, Split, TrajectoryRecord};
pub use pipeline::{
    calibrate, evaluate, run_point, sweep, train, trajectory_density_ratio, ModeRun, SweepResult,
    Trained,
};
pub use report::{
    plot_rows, read_calibration, read_csv, write_calibration, write_csv, CoverageReport, PlotRow,
    PrefixOutcome,
};
