//! Synthetic datasets, benchmark sweeps and reporting for `osp-core`.

pub mod bench;
pub mod config;
pub mod datasets;
pub mod error;

pub use bench::{run_benchmark, BenchReport, Dataset, Experiment, ResultRow, SummaryRow};
pub use config::{BenchStrategy, ExperimentConfig};
pub use error::HarnessError;
