//! Numerical refinement: constant fitting for equation hypotheses, dynamics
//! fitting for graph hypotheses, and bootstrap confidence.

mod bootstrap;
mod graph;
mod lm;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::exprlang::ExprError;
use crate::seeding;

pub use bootstrap::{bootstrap_confidence, confidence_from_predictions, BootstrapReport, CONFIDENCE_EPS};
pub use graph::{fit_graph, graph_loss_terms, prior_dynamics, GraphData, GraphFitOptions, GraphFitResult, FIT_MAX_STEPS, LOG_FLOOR};
pub use lm::{fit_constants, residual_jacobian, FitOptions, FitResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("model predictions are predominantly non-finite")]
    NonFiniteModel,
    #[error("insufficient data: {have} points, {need} required")]
    InsufficientData { have: usize, need: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Scalar-response observations over named input variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub variables: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(variables: Vec<String>) -> Dataset {
        Dataset {
            variables,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        self.x.push(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            variables: self.variables.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Train/validation index partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

pub const VALIDATION_FRACTION: f64 = 0.2;

/// Seeded 80/20 partition of `n` points. The validation part is left empty
/// when holding it out would leave fewer than `min_train` training points.
pub fn split_indices(n: usize, min_train: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng_for(seed, "split");
    idx.shuffle(&mut rng);
    let n_val = (VALIDATION_FRACTION * n as f64).round() as usize;
    if n_val == 0 || n - n_val < min_train.max(1) {
        idx.sort_unstable();
        return Split {
            train: idx,
            validation: Vec::new(),
        };
    }
    let mut validation = idx.split_off(n - n_val);
    idx.sort_unstable();
    validation.sort_unstable();
    Split {
        train: idx,
        validation,
    }
}

/// Root mean squared `log1p` error; infinite if any prediction is
/// non-finite or at most -1.
pub(crate) fn log1p_rmsle(pred: &[f64], obs: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for (p, o) in pred.iter().zip(obs) {
        if !p.is_finite() || *p <= -1.0 {
            return f64::INFINITY;
        }
        let d = p.ln_1p() - o.ln_1p();
        s += d * d;
    }
    (s / pred.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = split_indices(20, 2, 1);
        assert_eq!(s.train.len(), 16);
        assert_eq!(s.validation.len(), 4);
        let s = split_indices(3, 3, 1);
        assert_eq!(s.train.len(), 3);
        assert!(s.validation.is_empty());
        assert_eq!(split_indices(20, 2, 1), split_indices(20, 2, 1));
    }
}
