//! Benchmark runner around the discovery engine: manifest generation,
//! method execution (engine and baselines), scoring against hidden truth,
//! results tables and reports.

pub mod baselines;
pub mod evaluate;
pub mod gp;
pub mod manifest;
pub mod methods;
pub mod report;
pub mod results;
pub mod runner;

use activelab_core::exprlang::ExprError;
use activelab_core::metrics::MetricError;
use activelab_core::oracle::OracleError;
use activelab_core::proposer::ProposerError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error("no result rows to report")]
    EmptyResults,
    #[error("mechanism does not match the task: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub use methods::Method;
