use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{
    GraphTranslation, PromptContext, Proposal, Proposer, ProposerError, RegionSpec, SearchRegion, Priority,
    TaskView,
};
use crate::chem;
use crate::ensemble::{HypothesisRecord, Origin};
use crate::exprlang::ParsedHypothesis;
use crate::grn::{self, admissible_interventions, SignedGraph, MOTIF_FAMILIES};
use crate::oracle::{BenchmarkId, TaskManifest, VariableSpec};
use crate::seeding;

/// Number of equal slices each relevant variable is cut into for the
/// proposal regions.
const REGION_SLICES: usize = 3;

#[derive(Debug, Clone)]
enum Entry {
    Equation(String),
    Graph(SignedGraph),
}

impl Entry {
    fn record(&self) -> HypothesisRecord {
        match self {
            Entry::Equation(t) => HypothesisRecord::equation(t, Origin::Library),
            Entry::Graph(g) => HypothesisRecord::graph(&g.canonical_key(), g.clone(), Origin::Library),
        }
    }
}

/// Deterministic proposer over a fixed mechanism library: sampling is a
/// seeded round-robin, synthesis follows the current fit ranking.
#[derive(Debug, Clone)]
pub struct LibraryProposer {
    entries: Vec<Entry>,
    order: Vec<usize>,
    cursor: usize,
}

/// Generic candidate forms over the given variables.
pub fn generic_library(variables: &[VariableSpec]) -> Vec<String> {
    let mut out = vec!["C0".to_string()];
    for v in variables {
        let v = &v.name;
        out.push(format!("C0*{v}"));
        out.push(format!("C0*{v} + C1"));
        out.push(format!("C0*{v}**C1"));
        out.push(format!("C0*{v}/(C1 + {v})"));
        out.push(format!("C0*exp(C1*{v})"));
    }
    if variables.len() > 1 {
        let prod: Vec<&str> = variables.iter().map(|v| v.name.as_str()).collect();
        out.push(format!("C0*{}", prod.join("*")));
        let powers: Vec<String> = variables
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{}**C{}", v.name, i + 1))
            .collect();
        out.push(format!("C0*{}", powers.join("*")));
    }
    out
}

/// The fifteen catalog topologies, family-major.
pub fn catalog_graphs() -> Vec<SignedGraph> {
    MOTIF_FAMILIES
        .iter()
        .flat_map(|f| (1..=3u8).map(move |v| grn::motif_graph(f, v).expect("catalog entry")))
        .collect()
}

impl LibraryProposer {
    pub fn equations(library: Vec<String>, seed: u64) -> LibraryProposer {
        Self::with_entries(library.into_iter().map(Entry::Equation).collect(), seed)
    }

    pub fn graphs(seed: u64) -> LibraryProposer {
        Self::with_entries(catalog_graphs().into_iter().map(Entry::Graph).collect(), seed)
    }

    /// The library matching the task's benchmark, seeded from the manifest.
    pub fn for_task(m: &TaskManifest) -> LibraryProposer {
        match m.benchmark {
            BenchmarkId::Chem => Self::equations(chem::base_library(), m.seed),
            BenchmarkId::Grn => Self::graphs(m.seed),
            BenchmarkId::EquationPlugin => {
                let p = m.plugin.as_ref().expect("validated plugin manifest");
                let lib = if p.library.is_empty() {
                    generic_library(&p.variables)
                } else {
                    p.library.clone()
                };
                Self::equations(lib, m.seed)
            }
        }
    }

    fn with_entries(entries: Vec<Entry>, seed: u64) -> LibraryProposer {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut seeding::rng_for(seed, "library/order"));
        LibraryProposer {
            entries,
            order,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Library members in sampling order.
    pub fn members(&self) -> Vec<HypothesisRecord> {
        self.order.iter().map(|&i| self.entries[i].record()).collect()
    }

    fn regions(&self, ctx: &PromptContext, chosen: &[HypothesisRecord]) -> Vec<SearchRegion> {
        let n = ctx.max_experiments.max(1);
        match &ctx.task {
            TaskView::Graph => vec![SearchRegion {
                spec: RegionSpec::Interventions(admissible_interventions()),
                n_experiments: n,
                priority: Priority::High,
                rationale: "full intervention menu".into(),
            }],
            TaskView::Equation { variables } => {
                let used: BTreeSet<&str> = chosen
                    .iter()
                    .filter_map(HypothesisRecord::as_equation)
                    .flat_map(|h: &ParsedHypothesis| h.variables_used.iter().map(String::as_str))
                    .collect();
                let mut relevant: Vec<&VariableSpec> =
                    variables.iter().filter(|v| used.contains(v.name.as_str())).collect();
                if relevant.is_empty() {
                    relevant = variables.iter().collect();
                }
                (0..REGION_SLICES)
                    .map(|k| {
                        let bounds: BTreeMap<String, (f64, f64)> = relevant
                            .iter()
                            .map(|v| {
                                let w = (v.hi - v.lo) / REGION_SLICES as f64;
                                let hi = if k + 1 == REGION_SLICES { v.hi } else { v.lo + w * (k + 1) as f64 };
                                (v.name.clone(), (v.lo + w * k as f64, hi))
                            })
                            .collect();
                        SearchRegion {
                            spec: RegionSpec::Bounds(bounds),
                            n_experiments: n / REGION_SLICES + usize::from(k < n % REGION_SLICES),
                            priority: Priority::Medium,
                            rationale: format!("slice {} of {REGION_SLICES} of each relevant variable", k + 1),
                        }
                    })
                    .collect()
            }
        }
    }
}

impl Proposer for LibraryProposer {
    fn sample_origin(&self) -> Origin {
        Origin::Library
    }

    fn sample_hypothesis(&mut self, _ctx: &PromptContext) -> Result<HypothesisRecord, ProposerError> {
        if self.entries.is_empty() {
            return Err(ProposerError::ProposerFailure {
                attempts: 0,
                last_error: "empty library".into(),
            });
        }
        let e = &self.entries[self.order[self.cursor % self.order.len()]];
        self.cursor += 1;
        Ok(e.record())
    }

    fn synthesize_proposal(&mut self, ctx: &PromptContext) -> Result<Proposal, ProposerError> {
        let mut chosen: Vec<HypothesisRecord> = Vec::new();
        let mut keys: BTreeSet<String> = BTreeSet::new();
        for r in ctx.ranking.iter().filter(|r| !r.failed) {
            let rec = match &ctx.task {
                TaskView::Graph => match SignedGraph::try_from(split_key(&r.text)) {
                    Ok(g) => HypothesisRecord::graph(&r.text, g, Origin::Library),
                    Err(_) => continue,
                },
                TaskView::Equation { .. } => HypothesisRecord::equation(&r.text, Origin::Library),
            };
            if rec.valid && keys.insert(rec.key.clone()) {
                chosen.push(rec);
            }
            if chosen.len() == 3 {
                break;
            }
        }
        let failed: BTreeSet<&str> = ctx.ranking.iter().filter(|r| r.failed).map(|r| r.key.as_str()).collect();
        for rec in self.members() {
            if chosen.len() == 3 {
                break;
            }
            if !failed.contains(rec.key.as_str()) && keys.insert(rec.key.clone()) {
                chosen.push(rec);
            }
        }
        if chosen.is_empty() {
            return Err(ProposerError::ProposerFailure {
                attempts: 0,
                last_error: "every library member is marked failed".into(),
            });
        }
        let search_regions = self.regions(ctx, &chosen);
        let primary = chosen.remove(0);
        Ok(Proposal {
            primary,
            alternates: chosen,
            search_regions,
            confidence: ctx.confidence,
            done: false,
            reasoning: "ranked by validation fit".into(),
            warnings: Vec::new(),
        })
    }

    fn translate_graph(&mut self, id: &str, text: &str) -> Result<GraphTranslation, ProposerError> {
        let graph = match text.trim().parse::<usize>() {
            Ok(k) => match self.entries.get(k) {
                Some(Entry::Graph(g)) => g.clone(),
                _ => return Err(ProposerError::SchemaViolation(format!("no library graph {k}"))),
            },
            Err(_) => SignedGraph::try_from(split_key(text)).map_err(ProposerError::SchemaViolation)?,
        };
        let t = GraphTranslation {
            hypothesis_id: id.to_string(),
            rationale: "library entry".into(),
            edges: graph.edges(),
        };
        t.graph()?;
        Ok(t)
    }
}

fn split_key(text: &str) -> Vec<String> {
    text.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
