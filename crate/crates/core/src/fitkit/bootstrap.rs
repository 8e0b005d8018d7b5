use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding;

pub const CONFIDENCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    /// One row per successful resample, one column per validation point.
    pub predictions: Vec<Vec<f64>>,
    pub failures: usize,
    pub confidence: f64,
}

/// `1 − mean_i std_b(ŷ_i) / (|mean_b(ŷ_i)| + ε)`, clipped to `[0, 1]`, with
/// population standard deviation over resamples.
pub fn confidence_from_predictions(rows: &[Vec<f64>]) -> f64 {
    let Some(first) = rows.first() else {
        return 0.0;
    };
    let n_points = first.len();
    if n_points == 0 {
        return 0.0;
    }
    let b = rows.len() as f64;
    let mut cv_sum = 0.0;
    for i in 0..n_points {
        let mean = rows.iter().map(|r| r[i]).sum::<f64>() / b;
        let var = rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / b;
        cv_sum += var.sqrt() / (mean.abs() + CONFIDENCE_EPS);
    }
    let c = 1.0 - cv_sum / n_points as f64;
    if c.is_nan() {
        0.0
    } else {
        c.clamp(0.0, 1.0)
    }
}

/// Refits on `n_resamples` bootstrap resamples of `0..train_len`. `fitter`
/// receives the resampled training indices and returns predictions on a
/// fixed validation set; errors and non-finite predictions count as failed
/// resamples, and more than half failing yields confidence 0.
pub fn bootstrap_confidence<E>(
    mut fitter: impl FnMut(&[usize]) -> Result<Vec<f64>, E>,
    train_len: usize,
    n_resamples: usize,
    seed: u64,
) -> BootstrapReport {
    let mut rng = seeding::rng_for(seed, "bootstrap");
    let mut predictions = Vec::with_capacity(n_resamples);
    let mut failures = 0;
    for _ in 0..n_resamples {
        let idx: Vec<usize> = (0..train_len).map(|_| rng.random_range(0..train_len.max(1))).collect();
        match fitter(&idx) {
            Ok(p) if p.iter().all(|v| v.is_finite()) => predictions.push(p),
            _ => failures += 1,
        }
    }
    let confidence = if failures * 2 > n_resamples || predictions.is_empty() {
        0.0
    } else {
        confidence_from_predictions(&predictions)
    };
    BootstrapReport {
        predictions,
        failures,
        confidence,
    }
}
