//! Hypothesis sources: a deterministic library proposer and a remote
//! chat-completion client that renders the discovery prompts.

mod library;
pub mod mock;
pub mod prompts;
mod remote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ensemble::{HypothesisRecord, Origin};
use crate::grn::{Edge, Intervention, Node, SignedGraph};
use crate::oracle::VariableSpec;

pub use library::LibraryProposer;
pub use remote::{extract_json_object, RemoteProposer};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProposerError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("proposer failed after {attempts} attempts: {last_error}")]
    ProposerFailure { attempts: usize, last_error: String },
    #[error("no directed path from signal to {final_node}: {detail}")]
    PathRuleViolation { final_node: Node, detail: String },
    #[error("invalid proposer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposerKind {
    RemoteChat,
    Library,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub kind: ProposerKind,
    pub endpoint: Option<String>,
    pub model_small: String,
    pub model_large: String,
    pub temperature_small: f64,
    pub temperature_large: f64,
    pub max_attempts: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub api_key_env: String,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            kind: ProposerKind::Library,
            endpoint: None,
            model_small: "small".into(),
            model_large: "large".into(),
            temperature_small: 1.0,
            temperature_large: 0.7,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            max_in_flight: 4,
            api_key_env: "ACTIVELAB_API_KEY".into(),
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<(), ProposerError> {
        if self.kind == ProposerKind::Library {
            return Ok(());
        }
        if self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(ProposerError::Config("remote proposer requires an endpoint".into()));
        }
        if self.api_key_env.is_empty() {
            return Err(ProposerError::Config("remote proposer requires an API-key variable name".into()));
        }
        if self.max_attempts == 0 || self.max_in_flight == 0 {
            return Err(ProposerError::Config("max_attempts and max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    High,
    #[default]
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSpec {
    /// Per-variable `[lo, hi]`; unnamed variables keep their full range.
    Bounds(BTreeMap<String, (f64, f64)>),
    Interventions(Vec<Intervention>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub spec: RegionSpec,
    pub n_experiments: usize,
    pub priority: Priority,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub primary: HypothesisRecord,
    pub alternates: Vec<HypothesisRecord>,
    pub search_regions: Vec<SearchRegion>,
    pub confidence: f64,
    pub done: bool,
    pub reasoning: String,
    /// Schema clamps applied while building the proposal.
    pub warnings: Vec<String>,
}

pub const MIN_ALTERNATES: usize = 2;
pub const MAX_ALTERNATES: usize = 6;

impl Proposal {
    /// Truncates alternates beyond the maximum, recording a warning.
    pub fn enforce_alternate_cap(&mut self) {
        if self.alternates.len() > MAX_ALTERNATES {
            self.warnings.push(format!(
                "{} alternates proposed; truncated to {MAX_ALTERNATES}",
                self.alternates.len()
            ));
            self.alternates.truncate(MAX_ALTERNATES);
        }
    }

    /// Clamps box regions into `bounds`, dropping unknown variables, and
    /// records each adjustment. Intervention regions are filtered to valid
    /// interventions.
    pub fn clamp_regions(&mut self, bounds: &[VariableSpec]) {
        for (k, r) in self.search_regions.iter_mut().enumerate() {
            match &mut r.spec {
                RegionSpec::Bounds(b) => {
                    let mut out = BTreeMap::new();
                    for (name, &(lo, hi)) in b.iter() {
                        let Some(v) = bounds.iter().find(|v| &v.name == name) else {
                            self.warnings.push(format!("region {k}: unknown variable {name} dropped"));
                            continue;
                        };
                        let (a, z) = (lo.min(hi), lo.max(hi));
                        let (ca, cz) = (a.max(v.lo), z.min(v.hi));
                        if !(lo.is_finite() && hi.is_finite()) {
                            self.warnings.push(format!("region {k}: non-finite {name} bound replaced by full range"));
                            out.insert(name.clone(), (v.lo, v.hi));
                            continue;
                        }
                        if (ca, cz) != (lo, hi) {
                            self.warnings.push(format!(
                                "region {k}: {name} [{lo}, {hi}] clamped to [{ca}, {cz}]"
                            ));
                        }
                        out.insert(name.clone(), (ca, cz));
                    }
                    *b = out;
                }
                RegionSpec::Interventions(ivs) => {
                    let before = ivs.len();
                    ivs.retain(|iv| iv.validate().is_ok());
                    if ivs.len() != before {
                        self.warnings.push(format!(
                            "region {k}: {} invalid interventions dropped",
                            before - ivs.len()
                        ));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTranslation {
    pub hypothesis_id: String,
    pub rationale: String,
    pub edges: Vec<Edge>,
}

impl GraphTranslation {
    /// The signed graph, checked for admissibility and the signal-to-readout
    /// path rule.
    pub fn graph(&self) -> Result<SignedGraph, ProposerError> {
        let g = SignedGraph::from_edges(&self.edges).map_err(ProposerError::SchemaViolation)?;
        if !g.has_path(Node::Signal, Node::FINAL) {
            return Err(ProposerError::PathRuleViolation {
                final_node: Node::FINAL,
                detail: format!("edges: {g}"),
            });
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditEvent {
    Prompt { role: String, attempt: usize, text: String },
    Completion { role: String, attempt: usize, text: String },
    Retry { role: String, attempt: usize, error: String },
    Warning { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskView {
    Equation { variables: Vec<VariableSpec> },
    Graph,
}

/// One pool member as seen by a proposer, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHypothesis {
    pub key: String,
    pub text: String,
    /// Validation RMSLE (equations) or intervention loss (graphs).
    pub score: f64,
    /// Free constants or edges.
    pub complexity: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Explore,
    Disambiguate,
    Refine,
    Finalize,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Disambiguate => "disambiguate",
            Phase::Refine => "refine",
            Phase::Finalize => "finalize",
        }
    }
}

/// Read-only snapshot of the discovery state handed to a proposer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub goal: String,
    pub domain: String,
    pub task: TaskView,
    pub data_table: String,
    pub best: Option<String>,
    pub current_hypotheses: Vec<String>,
    pub memory: String,
    pub phase: Phase,
    pub confidence: f64,
    pub fit_summary: String,
    pub ensemble: Option<String>,
    pub discrimination_hints: String,
    pub budget_total: usize,
    pub budget_remaining: usize,
    pub max_experiments: usize,
    pub ranking: Vec<RankedHypothesis>,
    pub iteration: usize,
}

impl PromptContext {
    pub fn variables(&self) -> &[VariableSpec] {
        match &self.task {
            TaskView::Equation { variables } => variables,
            TaskView::Graph => &[],
        }
    }

    pub fn is_graph(&self) -> bool {
        matches!(self.task, TaskView::Graph)
    }
}

pub trait Proposer {
    /// Origin tag for ensemble samples.
    fn sample_origin(&self) -> Origin;

    fn sample_hypothesis(&mut self, ctx: &PromptContext) -> Result<HypothesisRecord, ProposerError>;

    fn sample_batch(&mut self, ctx: &PromptContext, n: usize) -> Result<Vec<HypothesisRecord>, ProposerError> {
        (0..n).map(|_| self.sample_hypothesis(ctx)).collect()
    }

    fn synthesize_proposal(&mut self, ctx: &PromptContext) -> Result<Proposal, ProposerError>;

    fn translate_graph(&mut self, id: &str, text: &str) -> Result<GraphTranslation, ProposerError>;

    /// Picks one of `candidates` by text, or `None` to defer to the
    /// deterministic rule.
    fn arbitrate(&mut self, _ctx: &PromptContext, _candidates: &[RankedHypothesis]) -> Result<Option<String>, ProposerError> {
        Ok(None)
    }

    /// Prompts, completions and retries since the last drain.
    fn drain_audit(&mut self) -> Vec<AuditEvent> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proposal_with(regions: Vec<SearchRegion>, n_alt: usize) -> Proposal {
        Proposal {
            primary: HypothesisRecord::equation("C0*C_A", Origin::LargeModel),
            alternates: (0..n_alt)
                .map(|i| HypothesisRecord::equation(&format!("C0*C_A + {i}"), Origin::LargeModel))
                .collect(),
            search_regions: regions,
            confidence: 0.5,
            done: false,
            reasoning: String::new(),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn seven_alternates_truncate_to_six() {
        let mut p = proposal_with(vec![], 7);
        p.enforce_alternate_cap();
        assert_eq!(p.alternates.len(), 6);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn out_of_bounds_region_is_clamped() {
        let region = SearchRegion {
            spec: RegionSpec::Bounds(BTreeMap::from([("C_A".to_string(), (-5.0, 10.0))])),
            n_experiments: 2,
            priority: Priority::High,
            rationale: String::new(),
        };
        let mut p = proposal_with(vec![region], 2);
        p.clamp_regions(&[VariableSpec::new("C_A", 0.0, 10.0)]);
        match &p.search_regions[0].spec {
            RegionSpec::Bounds(b) => assert_eq!(b["C_A"], (0.0, 10.0)),
            _ => unreachable!(),
        }
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn translation_path_rule() {
        let ok = GraphTranslation {
            hypothesis_id: "h1".into(),
            rationale: String::new(),
            edges: vec![Edge::new(Node::Signal, Node::A, 1), Edge::new(Node::A, Node::C, 1)],
        };
        assert_eq!(ok.graph().unwrap().canonical_key(), "signal A +;A C +");
        let bad = GraphTranslation {
            edges: vec![Edge::new(Node::Signal, Node::A, 1)],
            ..ok
        };
        assert!(matches!(bad.graph(), Err(ProposerError::PathRuleViolation { .. })));
    }
}
