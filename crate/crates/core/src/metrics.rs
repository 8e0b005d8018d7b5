//! Evaluation metrics: RMSLE and exact recovery for equations, symbolic
//! equivalence, signed-graph edge metrics, and target-matching sample
//! efficiency.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::exprlang::{equivalent_up_to_constants, ParsedHypothesis};
use crate::grn::{self, Node, SignedGraph};
use crate::proposer::{ProposerError, RemoteProposer};

/// RMSLE below which a recovered law counts as exact.
pub const EXACT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("value {value} at position {index} is not above -1")]
    Domain { index: usize, value: f64 },
    #[error("{predictions} predictions for {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("no values to score")]
    Empty,
}

/// `sqrt(mean((ln(1 + p) - ln(1 + y))^2))`.
pub fn rmsle(predictions: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    if predictions.len() != targets.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut s = 0.0;
    for (i, (p, y)) in predictions.iter().zip(targets).enumerate() {
        for v in [*p, *y] {
            if !(v > -1.0) {
                return Err(MetricError::Domain { index: i, value: v });
            }
        }
        let d = p.ln_1p() - y.ln_1p();
        s += d * d;
    }
    Ok((s / predictions.len() as f64).sqrt())
}

pub fn exact_accuracy(rmsle: f64) -> bool {
    rmsle < EXACT_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquationScore {
    pub rmsle: f64,
    pub exact: bool,
    pub symbolic: bool,
}

impl EquationScore {
    pub fn new(rmsle: f64, symbolic: bool) -> EquationScore {
        EquationScore {
            rmsle,
            exact: exact_accuracy(rmsle),
            symbolic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Deterministic,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicVerdict {
    pub equivalent: bool,
    pub provenance: Provenance,
    /// Skeleton comparison, reported alongside a judge's answer.
    pub deterministic: bool,
}

impl SymbolicVerdict {
    pub fn judge_disagrees(&self) -> bool {
        self.provenance == Provenance::Judge && self.equivalent != self.deterministic
    }
}

/// Structural equivalence up to constant values. With a judge the verdict
/// is the judge's answer; the skeleton comparison is kept so disagreements
/// can be logged.
pub fn symbolic_accuracy(
    predicted: &ParsedHypothesis,
    truth: &ParsedHypothesis,
    judge: Option<&mut RemoteProposer>,
) -> Result<SymbolicVerdict, ProposerError> {
    let deterministic = equivalent_up_to_constants(predicted, truth);
    match judge {
        None => Ok(SymbolicVerdict {
            equivalent: deterministic,
            provenance: Provenance::Deterministic,
            deterministic,
        }),
        Some(j) => {
            let equivalent = j.judge(&truth.canonical_text(), &predicted.canonical_text())?;
            Ok(SymbolicVerdict {
                equivalent,
                provenance: Provenance::Judge,
                deterministic,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Sign agreement over edges present in both graphs.
    pub sign_accuracy: f64,
    pub exact_graph: bool,
    pub motif_match: bool,
    /// True when no edge is shared and `sign_accuracy` defaulted to 1.
    pub empty_intersection: bool,
}

/// Edge metrics of `predicted` against `truth`. Precision, recall and F1
/// use unsigned directed edges; a graph with no edges has precision 1 when
/// nothing was predicted. `motif_match` holds when `predicted` is one of the
/// catalog topologies of `family`.
pub fn graph_metrics(predicted: &SignedGraph, truth: &SignedGraph, family: &str) -> GraphScore {
    let pe: BTreeSet<(Node, Node)> = predicted.edges().iter().map(|e| (e.src, e.dst)).collect();
    let te: BTreeSet<(Node, Node)> = truth.edges().iter().map(|e| (e.src, e.dst)).collect();
    let shared: Vec<&(Node, Node)> = pe.intersection(&te).collect();
    let tp = shared.len() as f64;
    let precision = if pe.is_empty() { f64::from(te.is_empty()) } else { tp / pe.len() as f64 };
    let recall = if te.is_empty() { f64::from(pe.is_empty()) } else { tp / te.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let agree = shared
        .iter()
        .filter(|(s, d)| predicted.sign(*s, *d) == truth.sign(*s, *d))
        .count();
    let empty_intersection = shared.is_empty();
    let sign_accuracy = if empty_intersection { 1.0 } else { agree as f64 / tp };
    let motif_match = (1..=3u8).any(|v| grn::motif_graph(family, v).is_some_and(|g| &g == predicted));
    GraphScore {
        precision,
        recall,
        f1,
        sign_accuracy,
        exact_graph: predicted == truth,
        motif_match,
        empty_intersection,
    }
}

/// Budget grid point and the score reached there.
pub type CurvePoint = (f64, f64);

/// First budget at which the running best of `curve` reaches `target`,
/// interpolating linearly between the grid points around the crossing.
/// Lower scores are better when `lower_is_better`.
pub fn budget_to_target(curve: &[CurvePoint], target: f64, lower_is_better: bool) -> Option<f64> {
    let mut pts: Vec<CurvePoint> = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let better = |a: f64, b: f64| if lower_is_better { a < b } else { a > b };
    let reached = |s: f64| if lower_is_better { s <= target } else { s >= target };
    let mut best: Option<f64> = None;
    let mut prev: Option<CurvePoint> = None;
    for (b, s) in pts {
        if s.is_nan() {
            continue;
        }
        let s = match best {
            Some(m) if !better(s, m) => m,
            _ => s,
        };
        best = Some(s);
        if reached(s) {
            return Some(match prev {
                Some((b0, s0)) if s0 != s && s0.is_finite() => b0 + (b - b0) * (target - s0) / (s - s0),
                _ => b,
            });
        }
        prev = Some((b, s));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SampleEfficiency {
    /// Method budget over reference budget.
    Ratio(f64),
    /// The method never reached the target on its grid.
    MethodUnreached,
    /// Only the reference failed to reach the target.
    ReferenceUnreached,
}

impl SampleEfficiency {
    /// Ratio with the unreached cases mapped to infinity (method) and zero
    /// (reference).
    pub fn as_f64(&self) -> f64 {
        match self {
            SampleEfficiency::Ratio(r) => *r,
            SampleEfficiency::MethodUnreached => f64::INFINITY,
            SampleEfficiency::ReferenceUnreached => 0.0,
        }
    }
}

impl fmt::Display for SampleEfficiency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleEfficiency::Ratio(r) => write!(f, "{r:.3}"),
            SampleEfficiency::MethodUnreached => f.write_str("inf"),
            SampleEfficiency::ReferenceUnreached => f.write_str("0 (reference unreached)"),
        }
    }
}

pub fn sample_efficiency(
    curve_method: &[CurvePoint],
    curve_reference: &[CurvePoint],
    target: f64,
    lower_is_better: bool,
) -> SampleEfficiency {
    match (
        budget_to_target(curve_method, target, lower_is_better),
        budget_to_target(curve_reference, target, lower_is_better),
    ) {
        (None, _) => SampleEfficiency::MethodUnreached,
        (Some(_), None) => SampleEfficiency::ReferenceUnreached,
        (Some(m), Some(r)) => SampleEfficiency::Ratio(m / r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grn::Edge;

    #[test]
    fn rmsle_hand_values() {
        assert_eq!(rmsle(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((rmsle(&[0.0], &[e - 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(exact_accuracy(0.005));
        assert!(!exact_accuracy(0.01));
        assert!(matches!(rmsle(&[-1.0], &[0.0]), Err(MetricError::Domain { index: 0, .. })));
        assert!(matches!(rmsle(&[1.0], &[]), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn symbolic_deterministic() {
        let mm = ParsedHypothesis::parse("C0*C_A/(C1 + C_A)").unwrap();
        let renamed = ParsedHypothesis::parse("alpha*C_A/(C_A + beta)").unwrap();
        let si = ParsedHypothesis::parse("C0*C_A/(C1 + C_A + C_A**2/C2)").unwrap();
        let v = symbolic_accuracy(&mm, &renamed, None).unwrap();
        assert!(v.equivalent && v.provenance == Provenance::Deterministic);
        assert!(!symbolic_accuracy(&si, &mm, None).unwrap().equivalent);
    }

    fn g(edges: &[(Node, Node, i8)]) -> SignedGraph {
        SignedGraph::from_edges(&edges.iter().map(|&(s, d, k)| Edge::new(s, d, k)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn graph_metric_examples() {
        use Node::*;
        let truth = g(&[(Signal, A, 1), (A, B, 1), (B, C, 1)]);
        let s = graph_metrics(&truth, &truth, "activation_chain");
        assert_eq!((s.precision, s.recall, s.f1, s.sign_accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(s.exact_graph && s.motif_match);

        let two_plus_spurious = g(&[(Signal, A, 1), (A, B, 1), (A, C, 1)]);
        let s = graph_metrics(&two_plus_spurious, &truth, "activation_chain");
        for v in [s.precision, s.recall, s.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }

        let flipped = g(&[(Signal, A, 1), (A, B, -1), (B, C, 1)]);
        let s = graph_metrics(&flipped, &truth, "activation_chain");
        assert_eq!(s.f1, 1.0);
        assert!((s.sign_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(!s.exact_graph);

        let disjoint = g(&[(Signal, C, 1)]);
        let s = graph_metrics(&disjoint, &truth, "activation_chain");
        assert!(s.empty_intersection && s.sign_accuracy == 1.0 && s.f1 == 0.0);
    }

    #[test]
    fn efficiency_ratio_and_marker() {
        let method = [(20.0, 0.0), (40.0, 0.0), (60.0, 1.0)];
        let reference = [(20.0, 1.0), (40.0, 1.0), (60.0, 1.0)];
        assert_eq!(sample_efficiency(&method, &reference, 1.0, false), SampleEfficiency::Ratio(3.0));
        let never = [(20.0, 0.0), (60.0, 0.5)];
        assert_eq!(sample_efficiency(&never, &reference, 1.0, false), SampleEfficiency::MethodUnreached);
        assert_eq!(SampleEfficiency::MethodUnreached.to_string(), "inf");
        // running best on an RMSLE curve with interpolation at the crossing
        let rm = [(10.0, 0.5), (20.0, 0.005), (30.0, 0.2)];
        let b = budget_to_target(&rm, 0.01, true).unwrap();
        assert!((b - (10.0 + 10.0 * (0.01 - 0.5) / (0.005 - 0.5))).abs() < 1e-12);
    }
}
