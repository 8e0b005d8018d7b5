use nalgebra::{DMatrix, DVector, Vector4};
use serde::{Deserialize, Serialize};

use super::FitError;
use crate::grn::{
    hill_gate, steady_state_within, EdgeKinetics, GrnDynamics, GrnModel, GrnObservation, Intervention,
    SignedGraph,
};
use crate::oracle::OracleError;
use crate::seeding;

/// Added to levels before taking logs in graph losses.
pub const LOG_FLOOR: f64 = 1e-9;

/// Integration step budget for candidate dynamics. Parameter settings that
/// oscillate or settle more slowly than this are treated as non-convergent
/// instead of being integrated to the oracle's much larger limit.
pub const FIT_MAX_STEPS: usize = 20_000;

pub type GraphData = [(Intervention, GrnObservation)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFitOptions {
    pub max_iter: usize,
    pub seed: u64,
    /// Seeded random starts in addition to the default (or warm) start.
    pub extra_starts: usize,
    #[serde(default)]
    pub warm_start: Option<GrnDynamics>,
}

impl Default for GraphFitOptions {
    fn default() -> Self {
        GraphFitOptions {
            max_iter: 800,
            seed: 0,
            extra_starts: 1,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFitResult {
    pub graph: SignedGraph,
    pub dynamics: GrnDynamics,
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_evals: usize,
}

impl GraphFitResult {
    /// Steady state predicted by the fitted model, integrated from its own
    /// baseline as the oracle does, within [`FIT_MAX_STEPS`].
    pub fn predict(&self, iv: &Intervention) -> Result<GrnObservation, OracleError> {
        steady_state_within(&self.graph, &self.dynamics, iv, FIT_MAX_STEPS)
    }

    /// Mean squared log-residual of the fitted model on `data`.
    pub fn loss_on(&self, data: &GraphData) -> f64 {
        let mut s = 0.0;
        for (iv, obs) in data {
            let Ok(p) = self.predict(iv) else {
                return f64::INFINITY;
            };
            for i in 0..4 {
                let d = (p.expression[i] + LOG_FLOOR).ln() - (obs.expression[i].max(0.0) + LOG_FLOOR).ln();
                s += d * d;
            }
        }
        s / (4 * data.len().max(1)) as f64
    }
}

/// Maps a log-parameter vector to dynamics. Layout: ln b (4), ln β (4), then
/// per edge ln K and ln(n − 1), then ln s₀. Degradation is fixed at 1: the
/// steady state is invariant under a common rescaling of b, β and γ, so γ
/// carries no information in steady-state data.
struct Layout {
    graph: SignedGraph,
}

impl Layout {
    fn n_params(&self) -> usize {
        8 + 2 * self.graph.len() + 1
    }

    fn dynamics(&self, th: &[f64]) -> GrnDynamics {
        let mut basal = [0.0; 4];
        let mut beta = [0.0; 4];
        for i in 0..4 {
            basal[i] = th[i].exp();
            beta[i] = th[4 + i].exp();
        }
        let edges = self
            .graph
            .edges()
            .iter()
            .enumerate()
            .map(|(k, e)| EdgeKinetics {
                src: e.src,
                dst: e.dst,
                threshold: th[8 + 2 * k].exp(),
                hill: 1.0 + th[9 + 2 * k].exp(),
            })
            .collect();
        GrnDynamics {
            basal,
            degradation: [1.0; 4],
            max_production: beta,
            edges,
            signal: th[self.n_params() - 1].exp(),
        }
    }

    fn encode(&self, d: &GrnDynamics) -> Vec<f64> {
        let mut th = Vec::with_capacity(self.n_params());
        // fold degradation into production so steady states are preserved
        for i in 0..4 {
            th.push((d.basal[i] / d.degradation[i]).max(1e-12).ln());
        }
        for i in 0..4 {
            th.push((d.max_production[i] / d.degradation[i]).max(1e-12).ln());
        }
        for e in self.graph.edges() {
            let k = d.edges.iter().find(|k| k.src == e.src && k.dst == e.dst);
            let (t, n) = k.map_or((1.0, 2.0), |k| (k.threshold, k.hill));
            th.push(t.max(1e-12).ln());
            th.push((n - 1.0).max(1e-6).ln());
        }
        th.push(d.signal.max(1e-12).ln());
        th
    }

    fn default_start(&self) -> Vec<f64> {
        let mut th = vec![0.2f64.ln(); 4];
        th.extend([4.0f64.ln(); 4]);
        for _ in 0..self.graph.len() {
            th.push(0.0);
            th.push(0.0);
        }
        th.push(3.0f64.ln());
        th
    }

    fn random_start(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let mut th = Vec::with_capacity(self.n_params());
        for _ in 0..4 {
            th.push(seeding::log_uniform(rng, 0.05, 0.6).ln());
        }
        for _ in 0..4 {
            th.push(seeding::log_uniform(rng, 1.0, 15.0).ln());
        }
        for _ in 0..self.graph.len() {
            th.push(seeding::log_uniform(rng, 0.5, 3.0).ln());
            th.push(seeding::log_uniform(rng, 0.1, 4.0).ln());
        }
        th.push(seeding::log_uniform(rng, 2.0, 5.0).ln());
        th
    }
}

struct Objective<'a> {
    layout: Layout,
    data: &'a GraphData,
    evals: usize,
}

struct Eval {
    loss: f64,
    grad: Vec<f64>,
    states: Vec<[f64; 4]>,
}

impl Objective<'_> {
    /// Solves every steady state by Newton continuation from `warm`, falling
    /// back to integration from the model's baseline.
    fn solve(&self, model: &GrnModel, warm: Option<&[[f64; 4]]>) -> Option<Vec<[f64; 4]>> {
        let mut baseline: Option<[f64; 4]> = None;
        let mut out = Vec::with_capacity(self.data.len());
        for (k, (iv, _)) in self.data.iter().enumerate() {
            let c = model.conditions(iv);
            if let Some(x) = warm.and_then(|w| model.newton(&c, w[k], 1e-12, 30)) {
                out.push(x);
                continue;
            }
            if baseline.is_none() {
                baseline = Some(model.baseline_within(FIT_MAX_STEPS).ok()?);
            }
            let x = model.steady_within(&c, baseline.expect("set"), FIT_MAX_STEPS).ok()?;
            out.push(model.newton(&c, x, 1e-12, 30).unwrap_or(x));
        }
        Some(out)
    }

    fn evaluate(&mut self, th: &[f64], warm: Option<&[[f64; 4]]>) -> Option<Eval> {
        self.evals += 1;
        if th.iter().any(|v| !v.is_finite() || v.abs() > 50.0) {
            return None;
        }
        let dyns = self.layout.dynamics(th);
        let model = GrnModel::new(&self.layout.graph, &dyns).ok()?;
        let states = self.solve(&model, warm)?;
        let np = self.layout.n_params();
        let scale = 1.0 / (4 * self.data.len()) as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; np];
        for ((iv, obs), x) in self.data.iter().zip(&states) {
            let c = model.conditions(iv);
            let mut v = Vector4::zeros();
            for i in 0..4 {
                let r = (x[i] + LOG_FLOOR).ln() - (obs.expression[i].max(0.0) + LOG_FLOOR).ln();
                loss += r * r * scale;
                v[i] = 2.0 * r * scale / (x[i] + LOG_FLOOR);
            }
            let jx = model.jacobian(x, &c);
            let w = jx.transpose().lu().solve(&v)?;
            let fth = param_jacobian(&model, x, &c, iv);
            for p in 0..np {
                let mut d = 0.0;
                for i in 0..4 {
                    d -= w[i] * fth[(i, p)];
                }
                grad[p] += d;
            }
        }
        loss.is_finite().then_some(Eval { loss, grad, states })
    }
}

/// ∂F/∂θ at state `x` (rows: genes, columns: log-parameters).
fn param_jacobian(model: &GrnModel, x: &[f64; 4], c: &crate::grn::Conditions, iv: &Intervention) -> DMatrix<f64> {
    let ne = model.edges.len();
    let np = 8 + 2 * ne + 1;
    let mut j = DMatrix::zeros(4, np);
    let signal_set = iv
        .actions
        .iter()
        .any(|a| matches!(a.action, crate::grn::Action::SetSignal(_)));
    let src_val = |s: usize| if s == 0 { c.signal } else { x[s - 1] };
    let gates: Vec<f64> = model
        .edges
        .iter()
        .map(|e| hill_gate(src_val(e.src), e.threshold, e.hill, e.sign).0)
        .collect();
    let mut prod = [1.0; 4];
    for (e, g) in model.edges.iter().zip(&gates) {
        prod[e.dst] *= g;
    }
    for i in 0..4 {
        j[(i, i)] = model.basal[i];
        j[(i, 4 + i)] = model.max_production[i] * c.gain[i] * prod[i];
    }
    for (k, e) in model.edges.iter().enumerate() {
        let i = e.dst;
        let mut others = model.max_production[i] * c.gain[i];
        for (m, f) in model.edges.iter().enumerate() {
            if m != k && f.dst == i {
                others *= gates[m];
            }
        }
        let xs = src_val(e.src).max(0.0);
        if xs > 0.0 {
            let r = (xs / e.threshold).powf(e.hill);
            let dh_dr = if e.sign > 0 { 1.0 } else { -1.0 } / ((1.0 + r) * (1.0 + r));
            j[(i, 8 + 2 * k)] += others * dh_dr * (-e.hill * r);
            j[(i, 9 + 2 * k)] += others * dh_dr * r * (xs / e.threshold).ln() * (e.hill - 1.0);
        }
        if e.src == 0 && !signal_set {
            let (_, dg) = hill_gate(c.signal, e.threshold, e.hill, e.sign);
            j[(i, np - 1)] += others * dg * c.signal;
        }
    }
    j
}

fn bfgs(obj: &mut Objective, th0: Vec<f64>, max_iter: usize) -> Option<(Vec<f64>, f64, bool, usize)> {
    let mut th = th0;
    let mut cur = obj.evaluate(&th, None)?;
    let n = th.len();
    let mut h = DMatrix::<f64>::identity(n, n);
    let gnorm = cur.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gnorm > 1.0 {
        h /= gnorm;
    }
    let mut first = true;
    for it in 0..max_iter {
        let g = DVector::from_vec(cur.grad.clone());
        if g.amax() < 1e-10 || cur.loss < 1e-16 {
            return Some((th, cur.loss, true, it));
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let trial: Vec<f64> = th.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            if let Some(e) = obj.evaluate(&trial, Some(&cur.states)) {
                if e.loss <= cur.loss + 1e-4 * alpha * slope {
                    next = Some((trial, e));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, e)) = next else {
            return Some((th, cur.loss, g.amax() < 1e-6, it));
        };
        let s = DVector::from_iterator(n, trial.iter().zip(&th).map(|(a, b)| a - b));
        let y = DVector::from_vec(e.grad.clone()) - &g;
        let sy = s.dot(&y);
        let decrease = cur.loss - e.loss;
        th = trial;
        let prev_loss = cur.loss;
        cur = e;
        if sy > 1e-14 {
            if first {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * ((1.0 + rho * yhy) * rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if decrease <= 1e-15 * prev_loss.max(1e-300) && cur.grad.iter().all(|v| v.abs() < 1e-6) {
            return Some((th, cur.loss, true, it + 1));
        }
    }
    Some((th, cur.loss, false, max_iter))
}

/// Quasi-Newton fit of the dynamics of a fixed topology to steady-state
/// observations, on the mean squared log-residual. Gradients come from
/// implicit differentiation of the fixed-point equations.
pub fn fit_graph(g: &SignedGraph, data: &GraphData, opts: &GraphFitOptions) -> Result<GraphFitResult, FitError> {
    if data.len() < 2 {
        return Err(FitError::InsufficientData {
            have: data.len(),
            need: 2,
        });
    }
    let layout = Layout { graph: g.clone() };
    let mut starts = vec![match &opts.warm_start {
        Some(d) => layout.encode(d),
        None => layout.default_start(),
    }];
    let mut rng = seeding::rng_for(opts.seed, &format!("graph-fit/{}", g.canonical_key()));
    for _ in 0..opts.extra_starts {
        starts.push(layout.random_start(&mut rng));
    }
    let mut obj = Objective {
        layout,
        data,
        evals: 0,
    };
    let mut best: Option<(Vec<f64>, f64, bool, usize)> = None;
    let mut iterations = 0;
    for s in starts {
        if let Some(r) = bfgs(&mut obj, s, opts.max_iter) {
            iterations += r.3;
            if best.as_ref().is_none_or(|b| r.1 < b.1) {
                best = Some(r);
            }
        }
    }
    let (th, loss, converged, _) = best.ok_or(FitError::NonFiniteModel)?;
    Ok(GraphFitResult {
        graph: g.clone(),
        dynamics: obj.layout.dynamics(&th),
        loss,
        converged,
        iterations,
        n_evals: obj.evals,
    })
}

/// Dynamics at the default starting point of the fit, used to predict with a
/// topology before any data exist.
pub fn prior_dynamics(g: &SignedGraph) -> GrnDynamics {
    let layout = Layout { graph: g.clone() };
    layout.dynamics(&layout.default_start())
}

/// Per-datum contributions to the mean squared log-residual (summed over
/// genes, not divided), for diagnostics.
pub fn graph_loss_terms(fit: &GraphFitResult, data: &GraphData) -> Vec<f64> {
    data.iter()
        .map(|(iv, obs)| match fit.predict(iv) {
            Ok(p) => (0..4)
                .map(|i| {
                    let d = (p.expression[i] + LOG_FLOOR).ln() - (obs.expression[i].max(0.0) + LOG_FLOOR).ln();
                    d * d
                })
                .sum(),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grn::{admissible_interventions, instantiate, steady_state, Action, Node};
    use crate::oracle::Difficulty;

    fn dataset(family: &str, variant: u8, diff: Difficulty, seed: u64, n: usize) -> (SignedGraph, GrnDynamics, Vec<(Intervention, GrnObservation)>) {
        let (g, d) = instantiate(family, variant, diff, seed).unwrap();
        let ivs = admissible_interventions();
        let data = ivs
            .iter()
            .step_by(ivs.len() / n)
            .take(n)
            .map(|iv| (iv.clone(), steady_state(&g, &d, iv).unwrap()))
            .collect();
        (g, d, data)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (g, _, data) = dataset("incoherent_ffl", 1, Difficulty::Medium, 3, 10);
        let layout = Layout { graph: g.clone() };
        let mut rng = seeding::rng_for(5, "t");
        let th = layout.random_start(&mut rng);
        let mut obj = Objective { layout, data: &data, evals: 0 };
        let e = obj.evaluate(&th, None).unwrap();
        for p in 0..th.len() {
            let (mut hi, mut lo) = (th.clone(), th.clone());
            hi[p] += 1e-6;
            lo[p] -= 1e-6;
            let fh = obj.evaluate(&hi, Some(&e.states)).unwrap().loss;
            let fl = obj.evaluate(&lo, Some(&e.states)).unwrap().loss;
            let fd = (fh - fl) / 2e-6;
            assert!((fd - e.grad[p]).abs() <= 1e-4 * fd.abs().max(1e-3), "p={p} fd={fd} g={}", e.grad[p]);
        }
    }

    #[test]
    fn refit_on_true_topology() {
        let (g, _, data) = dataset("activation_chain", 1, Difficulty::Easy, 2, 10);
        let r = fit_graph(&g, &data, &GraphFitOptions::default()).unwrap();
        assert!(r.loss < 1e-6, "loss {}", r.loss);
        let empty = fit_graph(&SignedGraph::empty(), &data, &GraphFitOptions::default()).unwrap();
        assert!(empty.loss > r.loss);
    }

    #[test]
    fn needs_two_points() {
        let g = SignedGraph::empty();
        let iv = Intervention::single(Node::A, Action::KnockUp(5.0));
        let obs = GrnObservation { expression: [1.0; 4] };
        assert_eq!(
            fit_graph(&g, &[(iv, obs)], &GraphFitOptions::default()),
            Err(FitError::InsufficientData { have: 1, need: 2 })
        );
    }
}
