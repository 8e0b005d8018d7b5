//! Scores a final mechanism against the hidden truth of its task. Only this
//! path ever reads the truth; the discovery loop never does.

use activelab_core::chem::AssayInput;
use activelab_core::engine::FinalMechanism;
use activelab_core::exprlang::ParsedHypothesis;
use activelab_core::metrics::{self, EquationScore, GraphScore, SymbolicVerdict};
use activelab_core::oracle::{open_task, OpenedTask, TaskManifest, VariableSpec};
use activelab_core::proposer::RemoteProposer;
use activelab_core::seeding;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Held-out points drawn uniformly from the design box for RMSLE.
pub const HELD_OUT_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskScore {
    Equation {
        score: EquationScore,
        verdict: SymbolicVerdict,
    },
    Graph(GraphScore),
}

impl TaskScore {
    /// Exact recovery: RMSLE below threshold, or the identical signed graph.
    pub fn recovered(&self) -> bool {
        match self {
            TaskScore::Equation { score, .. } => score.exact,
            TaskScore::Graph(g) => g.exact_graph,
        }
    }
}

pub fn held_out_points(m: &TaskManifest, bounds: &[VariableSpec]) -> Vec<Vec<f64>> {
    let mut rng = seeding::rng_for(m.seed, &format!("eval/{}/{}", m.benchmark, m.task_id));
    (0..HELD_OUT_POINTS)
        .map(|_| bounds.iter().map(|b| rng.random_range(b.lo..=b.hi)).collect())
        .collect()
}

fn equation_score(
    m: &TaskManifest,
    bounds: &[VariableSpec],
    truth_fn: &dyn Fn(&[f64]) -> f64,
    truth: &ParsedHypothesis,
    fin: &FinalMechanism,
    judge: Option<&mut RemoteProposer>,
) -> Result<TaskScore, HarnessError> {
    let FinalMechanism::Equation { expression, constants, .. } = fin else {
        return Err(HarnessError::Mismatch("graph mechanism for an equation task".into()));
    };
    let h = ParsedHypothesis::parse(expression)?;
    let names: Vec<String> = bounds.iter().map(|b| b.name.clone()).collect();
    let f = h.compile(&names)?;
    let c: Vec<f64> = h.free_constants.iter().map(|k| constants.get(k).copied().unwrap_or(f64::NAN)).collect();
    let pts = held_out_points(m, bounds);
    let y: Vec<f64> = pts.iter().map(|x| truth_fn(x)).collect();
    let p: Vec<f64> = pts.iter().map(|x| f.eval(x, &c)).collect();
    // A prediction outside the log domain makes the law unusable there.
    let rmsle = if p.iter().all(|v| v.is_finite() && *v > -1.0) {
        metrics::rmsle(&p, &y)?
    } else {
        f64::INFINITY
    };
    let verdict = metrics::symbolic_accuracy(&h, truth, judge)?;
    Ok(TaskScore::Equation {
        score: EquationScore::new(rmsle, verdict.equivalent),
        verdict,
    })
}

pub fn evaluate(
    m: &TaskManifest,
    fin: &FinalMechanism,
    judge: Option<&mut RemoteProposer>,
) -> Result<TaskScore, HarnessError> {
    match open_task(m)? {
        OpenedTask::Chem(o) => {
            let spec = o.hidden_mechanism().spec().clone();
            let (truth, _) = spec.truth_expression();
            let bounds = activelab_core::chem::assay_bounds();
            equation_score(m, &bounds, &|x| spec.r0(&AssayInput::from_slice(x)), &truth, fin, judge)
        }
        OpenedTask::Equation(o) => {
            let plugin = o.hidden_mechanism();
            let bounds = plugin.variables().to_vec();
            equation_score(m, &bounds, &|x| plugin.value(x), plugin.expression(), fin, judge)
        }
        OpenedTask::Grn(o) => {
            let FinalMechanism::Graph { graph, .. } = fin else {
                return Err(HarnessError::Mismatch("equation mechanism for a graph task".into()));
            };
            Ok(TaskScore::Graph(metrics::graph_metrics(graph, o.hidden_mechanism().graph(), &m.family)))
        }
    }
}
