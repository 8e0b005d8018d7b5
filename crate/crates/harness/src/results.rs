//! Results table: tab-separated, fixed header, one row per
//! (task, method, seed, budget). Wall times live in a separate file so the
//! table itself is reproducible byte for byte.

use std::io::Write;
use std::path::Path;

use activelab_core::oracle::{BenchmarkId, Difficulty, TaskManifest};
use serde::{Deserialize, Serialize};

use crate::evaluate::TaskScore;
use crate::methods::Method;
use crate::HarnessError;

pub const RESULTS_FILE: &str = "results.tsv";
pub const TIMINGS_FILE: &str = "timings.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub benchmark: BenchmarkId,
    pub task_id: String,
    pub tier: Difficulty,
    pub method: Method,
    pub seed: u64,
    pub budget: usize,
    pub noise_sigma: f64,
    pub status: Status,
    pub queries: usize,
    pub rmsle: Option<f64>,
    pub exact: Option<bool>,
    pub symbolic: Option<bool>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub sign_accuracy: Option<f64>,
    pub exact_graph: Option<bool>,
    pub motif_match: Option<bool>,
    pub mechanism: String,
    pub error: String,
    #[serde(skip)]
    pub wall_ms: u64,
}

impl ResultRow {
    pub fn new(m: &TaskManifest, method: Method) -> ResultRow {
        ResultRow {
            benchmark: m.benchmark,
            task_id: m.task_id.clone(),
            tier: m.difficulty,
            method,
            seed: m.seed,
            budget: m.budget,
            noise_sigma: m.noise_sigma,
            status: Status::Failed,
            queries: 0,
            rmsle: None,
            exact: None,
            symbolic: None,
            precision: None,
            recall: None,
            f1: None,
            sign_accuracy: None,
            exact_graph: None,
            motif_match: None,
            mechanism: String::new(),
            error: String::new(),
            wall_ms: 0,
        }
    }

    pub fn set_score(&mut self, s: &TaskScore) {
        match s {
            TaskScore::Equation { score, .. } => {
                self.rmsle = Some(score.rmsle);
                self.exact = Some(score.exact);
                self.symbolic = Some(score.symbolic);
            }
            TaskScore::Graph(g) => {
                self.precision = Some(g.precision);
                self.recall = Some(g.recall);
                self.f1 = Some(g.f1);
                self.sign_accuracy = Some(g.sign_accuracy);
                self.exact_graph = Some(g.exact_graph);
                self.motif_match = Some(g.motif_match);
            }
        }
    }

    /// Exact recovery; failed rows count as not recovered.
    pub fn recovered(&self) -> bool {
        self.status == Status::Ok && (self.exact == Some(true) || self.exact_graph == Some(true))
    }

    fn sort_key(&self) -> (BenchmarkId, &str, Method, u64, usize, u64) {
        (self.benchmark, &self.task_id, self.method, self.seed, self.budget, self.noise_sigma.to_bits())
    }
}

/// Canonical row order, independent of completion order.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

pub fn write_results(rows: &[ResultRow], out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings(rows: &[ResultRow], out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    w.write_record(["benchmark", "task_id", "method", "seed", "budget", "noise_sigma", "wall_ms"])?;
    for r in rows {
        w.write_record([
            r.benchmark.to_string(),
            r.task_id.clone(),
            r.method.to_string(),
            r.seed.to_string(),
            r.budget.to_string(),
            r.noise_sigma.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn save(rows: &[ResultRow], dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_results(rows, std::fs::File::create(dir.join(RESULTS_FILE))?)?;
    write_timings(rows, std::fs::File::create(dir.join(TIMINGS_FILE))?)?;
    Ok(())
}
