//! Scenario runner, sweeps and report generation on top of `satpep-core`,
//! plus wall-clock tunnel daemons.

pub mod daemon;
pub mod metrics;
pub mod runner;
pub mod scenario;

use std::path::Path;

use thiserror::Error;

pub use metrics::{Metric, MetricRecord, Stats};
pub use runner::{run_scenario, Mode, ScenarioReport};
pub use scenario::{Job, Scenario, SweepParameter, WorkloadSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scenario error: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: csv error: {1}")]
    Csv(String, String),
    #[error("no records")]
    Empty,
    #[error("run failed: {0}")]
    Run(String),
}

impl BenchError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Schema(_) | BenchError::Empty => 2,
            BenchError::Io { .. } | BenchError::Csv(..) => 3,
            BenchError::Run(_) => 1,
        }
    }
}
