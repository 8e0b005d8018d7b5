//! Executes a method over a manifest: one run log per task, one results row
//! per task, assembled by a single writer after the workers finish.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use activelab_core::engine::{FinalMechanism, RunTrace};
use activelab_core::oracle::TaskManifest;
use activelab_core::proposer::{ProposerConfig, RemoteProposer};

use crate::evaluate::evaluate;
use crate::methods::{execute, Method};
use crate::results::{self, ResultRow, Status};
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    pub manifests: Vec<TaskManifest>,
    pub out_dir: PathBuf,
    /// Replaces the manifest seeds when non-empty.
    pub seeds: Vec<u64>,
    pub budget: Option<usize>,
    pub noise: Option<f64>,
    pub proposer: ProposerConfig,
    pub workers: usize,
    /// Use the remote model as symbolic-equivalence judge.
    pub judge: bool,
}

/// Applies the seed, budget and noise overrides. With explicit seeds every
/// distinct task runs once per seed, in first-appearance order.
pub fn expand(manifests: &[TaskManifest], seeds: &[u64], budget: Option<usize>, noise: Option<f64>) -> Vec<TaskManifest> {
    let mut base: Vec<TaskManifest> = Vec::new();
    if seeds.is_empty() {
        base = manifests.to_vec();
    } else {
        let mut seen = Vec::new();
        for m in manifests {
            let key = (m.benchmark, m.task_id.clone());
            if !seen.contains(&key) {
                seen.push(key);
                base.push(m.clone());
            }
        }
        base = seeds
            .iter()
            .flat_map(|&s| {
                base.iter().map(move |m| TaskManifest {
                    seed: s,
                    ..m.clone()
                })
            })
            .collect();
    }
    for m in &mut base {
        if let Some(b) = budget {
            m.budget = b;
        }
        if let Some(n) = noise {
            m.noise_sigma = n;
        }
    }
    base
}

pub fn log_path(out_dir: &Path, method: Method, m: &TaskManifest) -> PathBuf {
    out_dir
        .join("logs")
        .join(method.as_str())
        .join(m.benchmark.as_str())
        .join(&m.task_id)
        .join(format!("seed{}_B{}_noise{}.jsonl", m.seed, m.budget, m.noise_sigma))
}

fn mechanism_text(f: &FinalMechanism) -> String {
    match f {
        FinalMechanism::Equation { instantiated, .. } => instantiated.clone(),
        FinalMechanism::Graph { graph, .. } => graph.canonical_key(),
    }
}

/// Runs and scores one task. Failures are reported in the row, never as an
/// error.
pub fn run_task(method: Method, m: &TaskManifest, proposer: &ProposerConfig, judge: bool) -> (ResultRow, RunTrace) {
    let mut row = ResultRow::new(m, method);
    let start = Instant::now();
    let outcome = execute(method, m, proposer);
    let trace = match outcome {
        Ok(out) => {
            row.queries = out.trace.n_queries();
            row.mechanism = mechanism_text(&out.final_mechanism);
            let mut j = if judge { RemoteProposer::new(proposer.clone()).ok() } else { None };
            match evaluate(m, &out.final_mechanism, j.as_mut()) {
                Ok(score) => {
                    row.set_score(&score);
                    row.status = Status::Ok;
                }
                Err(e) => row.error = e.to_string(),
            }
            out.trace
        }
        Err(fail) => {
            row.queries = fail.trace.n_queries();
            row.error = fail.error.to_string();
            fail.trace
        }
    };
    if row.queries > m.budget {
        row.status = Status::Failed;
        row.error = format!("{} queries exceed the budget of {}", row.queries, m.budget);
    }
    row.wall_ms = start.elapsed().as_millis() as u64;
    (row, trace)
}

/// Runs every task of `cfg`, writing run logs under `cfg.out_dir`. Rows come
/// back in canonical order.
pub fn run_benchmark(cfg: &RunConfig) -> Result<Vec<ResultRow>, HarnessError> {
    if cfg.method.is_remote() {
        let p = RemoteProposer::new(cfg.proposer.clone())?;
        p.check_endpoint()?;
    }
    let tasks = expand(&cfg.manifests, &cfg.seeds, cfg.budget, cfg.noise);
    if tasks.is_empty() {
        return Err(HarnessError::Config("no tasks to run".into()));
    }
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<ResultRow>> = Mutex::new(Vec::with_capacity(tasks.len()));
    let io_error: Mutex<Option<HarnessError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(m) = tasks.get(i) else { break };
                let (row, trace) = run_task(cfg.method, m, &cfg.proposer, cfg.judge);
                let path = log_path(&cfg.out_dir, cfg.method, m);
                let written = path
                    .parent()
                    .map_or(Ok(()), std::fs::create_dir_all)
                    .and_then(|_| std::fs::write(&path, trace.to_jsonl()));
                if let Err(e) = written {
                    io_error.lock().expect("lock").get_or_insert(e.into());
                }
                rows.lock().expect("lock").push(row);
            });
        }
    });
    if let Some(e) = io_error.into_inner().expect("lock") {
        return Err(e);
    }
    let mut rows = rows.into_inner().expect("lock");
    results::sort_rows(&mut rows);
    Ok(rows)
}

/// Adds `rows` to the results table in `dir`, replacing rows with the same
/// (task, method, seed, budget, noise).
pub fn save_merged(rows: &[ResultRow], dir: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let path = dir.join(results::RESULTS_FILE);
    let mut all: Vec<ResultRow> = if path.exists() { results::read_results(&path)? } else { Vec::new() };
    let same = |a: &ResultRow, b: &ResultRow| {
        a.benchmark == b.benchmark
            && a.task_id == b.task_id
            && a.method == b.method
            && a.seed == b.seed
            && a.budget == b.budget
            && a.noise_sigma.to_bits() == b.noise_sigma.to_bits()
    };
    let timings_path = dir.join(results::TIMINGS_FILE);
    let old_timings = read_timings(&timings_path);
    for r in &mut all {
        r.wall_ms = old_timings
            .iter()
            .find(|(k, _)| *k == timing_key(r))
            .map_or(0, |(_, ms)| *ms);
    }
    all.retain(|a| !rows.iter().any(|b| same(a, b)));
    all.extend_from_slice(rows);
    results::sort_rows(&mut all);
    results::save(&all, dir)?;
    Ok(all)
}

fn timing_key(r: &ResultRow) -> String {
    format!("{}\t{}\t{}\t{}\t{}\t{}", r.benchmark, r.task_id, r.method, r.seed, r.budget, r.noise_sigma)
}

fn read_timings(path: &Path) -> Vec<(String, u64)> {
    let Ok(text) = std::fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (k, ms) = l.rsplit_once('\t')?;
            Some((k.to_string(), ms.parse().ok()?))
        })
        .collect()
}
