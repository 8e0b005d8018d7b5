use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{log1p_rmsle, split_indices, Dataset, FitError, Split};
use crate::exprlang::{CompiledExpr, ParsedHypothesis};
use crate::seeding;

/// Residual assigned to a point whose prediction is non-finite, so a start
/// with a few bad points can still make progress.
const NON_FINITE_PENALTY: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Extra starting points tried before the random ones.
    #[serde(default)]
    pub hints: Vec<Vec<f64>>,
    /// Reuse this partition instead of drawing one.
    #[serde(default)]
    pub split: Option<Split>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 8,
            max_iter: 150,
            seed: 0,
            hints: Vec::new(),
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub fitted_constants: BTreeMap<String, f64>,
    /// Constants in first-appearance order.
    pub constant_values: Vec<f64>,
    pub train_loss: f64,
    pub validation_rmsle: f64,
    pub r_squared: f64,
    pub converged: bool,
    pub n_function_evals: usize,
    pub split: Split,
}

struct Problem<'a> {
    f: CompiledExpr,
    data: &'a Dataset,
    rows: &'a [usize],
}

impl Problem<'_> {
    fn cost(&self, c: &[f64], evals: &mut usize) -> (f64, usize) {
        *evals += 1;
        let mut s = 0.0;
        let mut bad = 0;
        for &i in self.rows {
            let p = self.f.eval(&self.data.x[i], c);
            let r = if p.is_finite() && p > -1.0 {
                p.ln_1p() - self.data.y[i].ln_1p()
            } else {
                bad += 1;
                NON_FINITE_PENALTY
            };
            s += r * r;
        }
        (s, bad)
    }

    /// Normal equations `JᵀJ`, `Jᵀr` and the cost at `c`.
    fn normal(&self, c: &[f64], evals: &mut usize) -> (DMatrix<f64>, DVector<f64>, f64) {
        *evals += 1;
        let n = c.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut g = vec![0.0; n];
        let mut cost = 0.0;
        for &i in self.rows {
            let p = self.f.eval_grad(&self.data.x[i], c, &mut g);
            if !(p.is_finite() && p > -1.0) || g.iter().any(|v| !v.is_finite()) {
                cost += NON_FINITE_PENALTY * NON_FINITE_PENALTY;
                continue;
            }
            let r = p.ln_1p() - self.data.y[i].ln_1p();
            cost += r * r;
            let w = 1.0 / (1.0 + p);
            for j in 0..n {
                let gj = g[j] * w;
                b[j] += gj * r;
                for k in 0..=j {
                    a[(j, k)] += gj * g[k] * w;
                }
            }
        }
        for j in 0..n {
            for k in 0..j {
                a[(k, j)] = a[(j, k)];
            }
        }
        (a, b, cost)
    }

    /// Damped least squares from `c0`. Returns the final constants, cost and
    /// whether a stopping criterion was met before the iteration cap.
    fn levenberg_marquardt(&self, c0: Vec<f64>, max_iter: usize, evals: &mut usize) -> (Vec<f64>, f64, bool) {
        let n = c0.len();
        let mut c = c0;
        let (mut a, mut b, mut cost) = self.normal(&c, evals);
        if n == 0 {
            return (c, cost, true);
        }
        let mut lambda = 1e-3;
        for _ in 0..max_iter {
            if cost < 1e-28 || b.amax() < 1e-15 {
                return (c, cost, true);
            }
            let mut accepted = false;
            while lambda <= 1e16 {
                let mut m = a.clone();
                for j in 0..n {
                    m[(j, j)] += lambda * a[(j, j)].max(1e-12);
                }
                let Some(delta) = m.cholesky().map(|ch| ch.solve(&-&b)) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = c.iter().zip(delta.iter()).map(|(x, d)| x + d).collect();
                let (tc, _) = self.cost(&trial, evals);
                if tc.is_finite() && tc < cost {
                    let improvement = cost - tc;
                    let step = delta
                        .iter()
                        .zip(&trial)
                        .fold(0.0f64, |m, (d, x)| m.max(d.abs() / x.abs().max(1e-12)));
                    c = trial;
                    lambda = (lambda / 10.0).max(1e-15);
                    (a, b, cost) = self.normal(&c, evals);
                    if improvement <= 1e-14 * cost.max(1e-300) && step < 1e-10 {
                        return (c, cost, true);
                    }
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // no descent direction at any damping: stationary point
                return (c, cost, true);
            }
        }
        (c, cost, false)
    }
}

/// Residual vector `log1p(ŷ) − log1p(y)` over `rows` and its Jacobian with
/// respect to the constants.
pub fn residual_jacobian(
    f: &CompiledExpr,
    data: &Dataset,
    rows: &[usize],
    c: &[f64],
) -> (Vec<f64>, DMatrix<f64>) {
    let n = c.len();
    let mut jac = DMatrix::zeros(rows.len(), n);
    let mut r = Vec::with_capacity(rows.len());
    let mut g = vec![0.0; n];
    for (k, &i) in rows.iter().enumerate() {
        let p = f.eval_grad(&data.x[i], c, &mut g);
        r.push(p.ln_1p() - data.y[i].ln_1p());
        for j in 0..n {
            jac[(k, j)] = g[j] / (1.0 + p);
        }
    }
    (r, jac)
}

/// Multi-start damped least squares on `log1p` residuals over the training
/// part of a seeded 80/20 split; the best start is scored on the held-out part.
pub fn fit_constants(h: &ParsedHypothesis, data: &Dataset, opts: &FitOptions) -> Result<FitResult, FitError> {
    let n_consts = h.free_constants.len();
    if data.len() < n_consts.max(1) {
        return Err(FitError::InsufficientData {
            have: data.len(),
            need: n_consts.max(1),
        });
    }
    let f = h.compile(&data.variables)?;
    let split = opts
        .split
        .clone()
        .unwrap_or_else(|| split_indices(data.len(), n_consts, opts.seed));
    let problem = Problem {
        f,
        data,
        rows: &split.train,
    };
    let mut rng = seeding::rng_for(opts.seed, "fit/starts");
    let mut starts: Vec<Vec<f64>> = opts
        .hints
        .iter()
        .filter(|v| v.len() == n_consts && v.iter().all(|x| x.is_finite()))
        .cloned()
        .collect();
    for _ in 0..opts.n_starts {
        starts.push((0..n_consts).map(|_| seeding::log_uniform(&mut rng, 1e-3, 1e3)).collect());
    }
    let mut evals = 0usize;
    let half = split.train.len() / 2;
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for s in starts {
        let (_, bad) = problem.cost(&s, &mut evals);
        if bad > half {
            continue;
        }
        let (c, cost, conv) = problem.levenberg_marquardt(s, opts.max_iter, &mut evals);
        if !cost.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| cost < b.1) {
            best = Some((c, cost, conv));
        }
    }
    let (c, _, converged) = best.ok_or(FitError::NonFiniteModel)?;
    let (train_loss, bad) = problem.cost(&c, &mut evals);
    if bad > half {
        return Err(FitError::NonFiniteModel);
    }
    let predict = |rows: &[usize]| -> Vec<f64> { rows.iter().map(|&i| problem.f.eval(&data.x[i], &c)).collect() };
    let obs = |rows: &[usize]| -> Vec<f64> { rows.iter().map(|&i| data.y[i]).collect() };
    let val_rows = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };
    let validation_rmsle = log1p_rmsle(&predict(val_rows), &obs(val_rows));
    let train_obs: Vec<f64> = obs(&split.train).iter().map(|v| v.ln_1p()).collect();
    let mean = train_obs.iter().sum::<f64>() / train_obs.len() as f64;
    let ss_tot: f64 = train_obs.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - train_loss / ss_tot
    } else if train_loss == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(FitResult {
        fitted_constants: h.free_constants.iter().cloned().zip(c.iter().copied()).collect(),
        constant_values: c.clone(),
        train_loss,
        validation_rmsle,
        r_squared,
        converged: converged && c.iter().all(|v| v.is_finite()),
        n_function_evals: evals,
        split,
    })
}
