//! Gaussian-process surrogate with a squared-exponential kernel, used by the
//! `bo` baseline to pick the point of maximum posterior variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub const LENGTH_SCALES: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];
/// Signal variances as multiples of the sample variance of the targets.
pub const SIGNAL_SCALES: [f64; 3] = [0.5, 1.0, 2.0];
/// Noise variances as multiples of the signal variance.
pub const NOISE_SCALES: [f64; 3] = [1e-6, 1e-3, 1e-2];

fn se(a: &[f64], b: &[f64], l: f64, sf2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sf2 * (-0.5 * d2 / (l * l)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

pub struct Gp {
    x: Vec<Vec<f64>>,
    hyper: Hyper,
    chol: Option<Cholesky<f64, Dyn>>,
}

fn gram(x: &[Vec<f64>], h: &Hyper) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        se(&x[i], &x[j], h.length_scale, h.signal_var) + if i == j { h.noise_var } else { 0.0 }
    })
}

/// Log marginal likelihood of centred targets, or `None` when the Gram
/// matrix is not positive definite.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], h: &Hyper) -> Option<f64> {
    let chol = gram(x, h).cholesky()?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Some(-0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

impl Gp {
    /// Picks hyperparameters on the fixed grid by marginal likelihood.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Gp {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let var = (yc.iter().map(|v| v * v).sum::<f64>() / n).max(1e-12);
        let mut best: Option<(f64, Hyper)> = None;
        for &l in &LENGTH_SCALES {
            for &s in &SIGNAL_SCALES {
                for &e in &NOISE_SCALES {
                    let h = Hyper {
                        length_scale: l,
                        signal_var: s * var,
                        noise_var: e * s * var,
                    };
                    let ll = if x.is_empty() { Some(0.0) } else { log_marginal_likelihood(x, &yc, &h) };
                    if let Some(ll) = ll.filter(|v| v.is_finite()) {
                        if best.is_none_or(|(b, _)| ll > b) {
                            best = Some((ll, h));
                        }
                    }
                }
            }
        }
        let hyper = best.map(|(_, h)| h).unwrap_or(Hyper {
            length_scale: 0.2,
            signal_var: var,
            noise_var: 1e-2 * var,
        });
        let chol = if x.is_empty() { None } else { gram(x, &hyper).cholesky() };
        Gp {
            x: x.to_vec(),
            hyper,
            chol,
        }
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper
    }

    pub fn variance(&self, q: &[f64]) -> f64 {
        let prior = self.hyper.signal_var;
        let Some(chol) = &self.chol else { return prior };
        let k = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| se(xi, q, self.hyper.length_scale, self.hyper.signal_var)),
        );
        let v = chol.l().solve_lower_triangular(&k).expect("triangular factor is invertible");
        (prior - v.dot(&v)).max(0.0)
    }
}
