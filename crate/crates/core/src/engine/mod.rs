//! The closed discovery loop: ensemble growth, proposal synthesis, mode
//! gating, disagreement-driven acquisition, periodic refinement with
//! bootstrap confidence, memory, and final selection.

pub mod acquire;
mod equation;
mod graph;
pub mod memory;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ensemble::{GrowConfig, HypothesisRecord};
use crate::fitkit::FitError;
use crate::grn::{GrnDynamics, SignedGraph};
use crate::oracle::{open_task, OpenedTask, OracleError, TaskManifest};
use crate::proposer::{AuditEvent, LibraryProposer, Proposal, Proposer, RankedHypothesis, SearchRegion};

pub use acquire::{disagreement, grn_disagreement, AcquireError};
pub use memory::{MemoryLedger, Status};
pub use crate::proposer::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Disambiguate,
    Refine,
}

pub const DEFAULT_TAU_CONF: f64 = 0.9;

/// `Disambiguate` iff `c < tau`.
pub fn select_mode(c: f64, tau: f64) -> Mode {
    if c < tau {
        Mode::Disambiguate
    } else {
        Mode::Refine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tau_conf: f64,
    /// Refinement runs on every iteration `t` with `(t + 1) % refine_every == 0`.
    pub refine_every: usize,
    pub candidates_per_region: usize,
    pub n_resamples: usize,
    pub ensemble: GrowConfig,
    /// Scoreboard bookkeeping and failed-skeleton exclusion.
    pub memory: bool,
    /// Confidence gating between disambiguation and refinement.
    pub gating: bool,
    pub equation_batch: usize,
    pub graph_batch: usize,
    pub fit_starts: usize,
    pub graph_fit_iters: usize,
    pub tie_abs: f64,
    pub tie_rel_equation: f64,
    pub tie_rel_graph: f64,
    pub table_recent: usize,
    pub table_disagreement: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tau_conf: DEFAULT_TAU_CONF,
            refine_every: 3,
            candidates_per_region: acquire::CANDIDATES_PER_REGION,
            n_resamples: 20,
            ensemble: GrowConfig::default(),
            memory: true,
            gating: true,
            equation_batch: 3,
            graph_batch: 2,
            fit_starts: 8,
            graph_fit_iters: 800,
            tie_abs: 1e-4,
            tie_rel_equation: 0.02,
            tie_rel_graph: 0.05,
            table_recent: 40,
            table_disagreement: 10,
        }
    }
}

impl EngineConfig {
    /// Fixed-library design baseline: no memory, no gating.
    pub fn without_memory_and_gating() -> Self {
        EngineConfig {
            memory: false,
            gating: false,
            ..EngineConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("no fitted candidate survived to final selection")]
    EmptyPool,
    #[error("proposer unavailable and library fallback failed: {0}")]
    Proposer(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Deterministic,
    Arbiter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalMechanism {
    Equation {
        /// Expression over free constants.
        expression: String,
        skeleton: String,
        constants: BTreeMap<String, f64>,
        /// Expression with the fitted constants substituted.
        instantiated: String,
        score: f64,
        complexity: usize,
        selection: Selection,
    },
    Graph {
        graph: SignedGraph,
        dynamics: GrnDynamics,
        score: f64,
        complexity: usize,
        selection: Selection,
    },
}

impl FinalMechanism {
    pub fn key(&self) -> String {
        match self {
            FinalMechanism::Equation { skeleton, .. } => skeleton.clone(),
            FinalMechanism::Graph { graph, .. } => graph.canonical_key(),
        }
    }
}

/// One record of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Query {
        iteration: usize,
        index: usize,
        input: serde_json::Value,
        observation: serde_json::Value,
    },
    Ensemble {
        iteration: usize,
        drawn: usize,
        valid: usize,
        clusters: usize,
        entropy: f64,
        agreement: f64,
    },
    Proposal {
        iteration: usize,
        primary: String,
        alternates: Vec<String>,
        regions: Vec<SearchRegion>,
        confidence: f64,
        done: bool,
        warnings: Vec<String>,
    },
    Mode {
        iteration: usize,
        mode: Mode,
        confidence: f64,
        batch: usize,
        fallback: bool,
    },
    Fit {
        iteration: usize,
        key: String,
        text: String,
        score: f64,
        complexity: usize,
        parameters: serde_json::Value,
    },
    Confidence {
        iteration: usize,
        best: String,
        value: f64,
        failed_resamples: usize,
    },
    Prompt {
        iteration: usize,
        role: String,
        attempt: usize,
        text: String,
    },
    Completion {
        iteration: usize,
        role: String,
        attempt: usize,
        text: String,
    },
    Retry {
        iteration: usize,
        role: String,
        attempt: usize,
        error: String,
    },
    Degraded {
        iteration: usize,
        stage: String,
        reason: String,
    },
    Final {
        mechanism: FinalMechanism,
        candidates: Vec<RankedHypothesis>,
        note: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
}

impl RunTrace {
    pub fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<RunTrace, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RunTrace { events })
    }

    pub fn n_queries(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Query { .. })).count()
    }

    fn audit(&mut self, iteration: usize, events: Vec<AuditEvent>) {
        for e in events {
            self.push(match e {
                AuditEvent::Prompt { role, attempt, text } => TraceEvent::Prompt { iteration, role, attempt, text },
                AuditEvent::Completion { role, attempt, text } => TraceEvent::Completion { iteration, role, attempt, text },
                AuditEvent::Retry { role, attempt, error } => TraceEvent::Retry { iteration, role, attempt, error },
                AuditEvent::Warning { message } => TraceEvent::Degraded {
                    iteration,
                    stage: "proposer".into(),
                    reason: message,
                },
            });
        }
    }

    fn proposal(&mut self, iteration: usize, p: &Proposal) {
        self.push(TraceEvent::Proposal {
            iteration,
            primary: p.primary.text.clone(),
            alternates: p.alternates.iter().map(|a| a.text.clone()).collect(),
            regions: p.search_regions.clone(),
            confidence: p.confidence,
            done: p.done,
            warnings: p.warnings.clone(),
        });
    }

    fn degraded(&mut self, iteration: usize, stage: &str, reason: impl Into<String>) {
        self.push(TraceEvent::Degraded {
            iteration,
            stage: stage.into(),
            reason: reason.into(),
        });
    }
}

/// Index of the preferred candidate: the lowest score, where every score
/// within `abs + rel * best` of it counts as tied and ties go to lower
/// complexity, then the lexicographically smaller text.
pub fn pick_best(candidates: &[RankedHypothesis], abs: f64, rel: f64) -> Option<usize> {
    let best = candidates
        .iter()
        .map(|c| c.score)
        .filter(|s| s.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let limit = best + abs + rel * best.abs();
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.score.is_finite() && c.score <= limit)
        .min_by(|(_, a), (_, b)| a.complexity.cmp(&b.complexity).then_with(|| a.text.cmp(&b.text)))
        .map(|(i, _)| i)
}

/// Candidates ordered best first: by score, then complexity, then text.
pub fn rank(mut candidates: Vec<RankedHypothesis>) -> Vec<RankedHypothesis> {
    candidates.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.complexity.cmp(&b.complexity))
            .then_with(|| a.text.cmp(&b.text))
    });
    candidates
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-3 && v.abs() < 1e5) {
        format!("{v:.4}")
    } else {
        format!("{v:.4e}")
    }
}

pub(crate) fn ranking_text(ranking: &[RankedHypothesis], limit: usize) -> String {
    let mut s = String::new();
    for r in ranking.iter().take(limit) {
        let _ = writeln!(
            s,
            "- {} | score {} | complexity {}{}",
            r.text,
            fmt_num(r.score),
            r.complexity,
            if r.failed { " | failed" } else { "" }
        );
    }
    s
}

/// Proposer output when the configured source fails: the library answer,
/// with the failure logged.
fn with_fallback<T>(
    trace: &mut RunTrace,
    iteration: usize,
    stage: &str,
    primary: Result<T, String>,
    fallback: impl FnOnce() -> Result<T, String>,
) -> Result<T, EngineError> {
    match primary {
        Ok(v) => Ok(v),
        Err(e) => {
            trace.degraded(iteration, stage, format!("{e}; using library proposer"));
            fallback().map_err(EngineError::Proposer)
        }
    }
}

/// Final pool selection. Members marked failed are set aside unless nothing
/// else remains; an arbiter's pick is accepted only when it names a pool
/// member, otherwise the deterministic rule decides and the rejection is
/// noted. Returns the winning key.
#[allow(clippy::type_complexity)]
fn choose_final(
    ranking: &[RankedHypothesis],
    proposer: &mut dyn Proposer,
    ctx: &crate::proposer::PromptContext,
    abs: f64,
    rel: f64,
    iteration: usize,
    trace: &mut RunTrace,
) -> Result<(String, Selection, Vec<RankedHypothesis>, Option<String>), EngineError> {
    let finite = |r: &&RankedHypothesis| r.score.is_finite();
    let mut candidates: Vec<RankedHypothesis> = ranking.iter().filter(finite).filter(|r| !r.failed).cloned().collect();
    if candidates.is_empty() {
        candidates = ranking.iter().filter(finite).cloned().collect();
    }
    if candidates.is_empty() {
        return Err(EngineError::EmptyPool);
    }
    let choice = proposer.arbitrate(ctx, &candidates);
    trace.audit(iteration, proposer.drain_audit());
    let mut note = None;
    match choice {
        Ok(Some(name)) => {
            let name = name.trim();
            if let Some(c) = candidates.iter().find(|c| c.text == name || c.key == name) {
                let key = c.key.clone();
                return Ok((key, Selection::Arbiter, candidates, None));
            }
            note = Some(format!("arbiter chose {name:?}, which is not in the pool; deterministic rule applied"));
        }
        Ok(None) => {}
        Err(e) => note = Some(format!("arbiter failed: {e}; deterministic rule applied")),
    }
    if let Some(n) = &note {
        trace.degraded(iteration, "final", n.clone());
    }
    let i = pick_best(&candidates, abs, rel).ok_or(EngineError::EmptyPool)?;
    Ok((candidates[i].key.clone(), Selection::Deterministic, candidates, note))
}

fn record_texts(recs: &[HypothesisRecord]) -> Vec<String> {
    recs.iter().map(|r| r.text.clone()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_mechanism: FinalMechanism,
    pub trace: RunTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub error: EngineError,
    pub trace: RunTrace,
}

/// Opens the task, iterates until the budget is spent, then selects the
/// final mechanism. Every random stream derives from `manifest.seed`.
pub fn run(manifest: &TaskManifest, proposer: &mut dyn Proposer, cfg: &EngineConfig) -> Result<RunOutcome, RunFailure> {
    let mut trace = RunTrace::default();
    let task = match open_task(manifest) {
        Ok(t) => t,
        Err(e) => return Err(RunFailure { error: e.into(), trace }),
    };
    let mut fallback = LibraryProposer::for_task(manifest);
    let result = match task {
        OpenedTask::Chem(mut o) => equation::run(&mut o, manifest, proposer, &mut fallback, cfg, &mut trace),
        OpenedTask::Equation(mut o) => equation::run(&mut o, manifest, proposer, &mut fallback, cfg, &mut trace),
        OpenedTask::Grn(mut o) => graph::run(&mut o, manifest, proposer, &mut fallback, cfg, &mut trace),
    };
    match result {
        Ok(final_mechanism) => Ok(RunOutcome { final_mechanism, trace }),
        Err(error) => Err(RunFailure { error, trace }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_boundary_is_strict() {
        assert_eq!(select_mode(0.5, 0.9), Mode::Disambiguate);
        assert_eq!(select_mode(0.95, 0.9), Mode::Refine);
        assert_eq!(select_mode(0.9, 0.9), Mode::Refine);
        assert_eq!(select_mode(0.9 - 1e-12, 0.9), Mode::Disambiguate);
    }

    fn cand(text: &str, score: f64, complexity: usize) -> RankedHypothesis {
        RankedHypothesis {
            key: text.into(),
            text: text.into(),
            score,
            complexity,
            failed: false,
        }
    }

    #[test]
    fn argmin_and_parsimony() {
        let c = vec![cand("a", 0.2, 2), cand("b", 0.01, 2), cand("c", 0.05, 2)];
        assert_eq!(pick_best(&c, 1e-4, 0.02), Some(1));
        let c = vec![cand("three", 0.010, 3), cand("two", 0.0101, 2)];
        assert_eq!(pick_best(&c, 1e-4, 0.02), Some(1));
        let c = vec![cand("x", f64::INFINITY, 1)];
        assert_eq!(pick_best(&c, 1e-4, 0.02), None);
    }
}
