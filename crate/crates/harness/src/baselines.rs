//! Non-LLM comparison methods: uniform random design, bootstrap-uncertainty
//! sampling around the running best fit, and a Gaussian-process variance
//! search. Each spends the whole budget, then fits the task's mechanism
//! library and keeps the best-scoring member.

use std::collections::BTreeSet;

use activelab_core::engine::acquire::{
    disagreement, grn_disagreement, intervention_features, normalize, select_diverse,
};
use activelab_core::engine::{
    pick_best, rank, EngineConfig, EngineError, FinalMechanism, RunFailure, RunOutcome, RunTrace, Selection,
    TraceEvent,
};
use activelab_core::exprlang::{CompiledExpr, ParsedHypothesis};
use activelab_core::fitkit::{
    fit_constants, fit_graph, Dataset, FitOptions, FitResult, GraphFitOptions, GraphFitResult, Split,
};
use activelab_core::grn::{admissible_interventions, GrnMechanism, GrnObservation, Intervention, SignedGraph};
use activelab_core::oracle::{open_task, BudgetedOracle, EquationTask, OpenedTask, TaskManifest, VariableSpec};
use activelab_core::proposer::{LibraryProposer, RankedHypothesis};
use activelab_core::seeding::{derive_seed, rng_for};
use rand::Rng;

use crate::gp::Gp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Random,
    Uncertainty,
    Bo,
}

/// Uniform points queried before the uncertainty policy has a fit to use.
pub const INIT_POINTS: usize = 5;
/// Interventions queried before the uncertainty policy has a fit to use.
pub const INIT_INTERVENTIONS: usize = 2;
pub const CANDIDATES: usize = 256;
const BOOT_RESAMPLES: usize = 10;
const BOOT_MAX_ITER: usize = 60;
const GRAPH_BOOT_RESAMPLES: usize = 6;
const GRAPH_BOOT_MAX_ITER: usize = 150;
const LOG_FLOOR: f64 = 1e-12;

pub fn run_baseline(m: &TaskManifest, policy: Policy, cfg: &EngineConfig) -> Result<RunOutcome, RunFailure> {
    let mut trace = RunTrace::default();
    let task = match open_task(m) {
        Ok(t) => t,
        Err(e) => return Err(RunFailure { error: e.into(), trace }),
    };
    let result = match task {
        OpenedTask::Chem(mut o) => run_equation(&mut o, m, policy, cfg, &mut trace),
        OpenedTask::Equation(mut o) => run_equation(&mut o, m, policy, cfg, &mut trace),
        OpenedTask::Grn(mut o) => run_graph(&mut o, m, policy, cfg, &mut trace),
    };
    match result {
        Ok(final_mechanism) => Ok(RunOutcome { final_mechanism, trace }),
        Err(error) => Err(RunFailure { error, trace }),
    }
}

struct EqCandidate {
    key: String,
    text: String,
    hyp: ParsedHypothesis,
    compiled: CompiledExpr,
    fit: Option<FitResult>,
}

impl EqCandidate {
    fn score(&self) -> f64 {
        self.fit.as_ref().map_or(f64::INFINITY, |f| f.validation_rmsle)
    }
}

fn equation_library(m: &TaskManifest, names: &[String]) -> Vec<EqCandidate> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in LibraryProposer::for_task(m).members() {
        let Some(h) = r.as_equation() else { continue };
        let Ok(compiled) = h.compile(names) else { continue };
        if seen.insert(r.key.clone()) {
            out.push(EqCandidate {
                key: r.key.clone(),
                text: r.text.clone(),
                hyp: h.clone(),
                compiled,
                fit: None,
            });
        }
    }
    out
}

fn fit_equations(
    lib: &mut [EqCandidate],
    data: &Dataset,
    seed: u64,
    cfg: &EngineConfig,
    iteration: usize,
    trace: &mut RunTrace,
) -> Vec<RankedHypothesis> {
    let mut ranked = Vec::with_capacity(lib.len());
    for c in lib.iter_mut() {
        let opts = FitOptions {
            n_starts: cfg.fit_starts,
            seed,
            hints: c.fit.iter().map(|f| f.constant_values.clone()).collect(),
            ..FitOptions::default()
        };
        c.fit = fit_constants(&c.hyp, data, &opts).ok();
        let score = c.score();
        trace.push(TraceEvent::Fit {
            iteration,
            key: c.key.clone(),
            text: c.text.clone(),
            score,
            complexity: c.hyp.free_constants.len(),
            parameters: serde_json::json!(c.fit.as_ref().map(|f| &f.fitted_constants)),
        });
        ranked.push(RankedHypothesis {
            key: c.key.clone(),
            text: c.text.clone(),
            score,
            complexity: c.hyp.free_constants.len(),
            failed: false,
        });
    }
    rank(ranked)
}

fn uniform_points(bounds: &[VariableSpec], n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| bounds.iter().map(|b| rng.random_range(b.lo..=b.hi)).collect())
        .collect()
}

/// Bootstrap refits of `c` around its current constants.
fn bootstrap_constants(c: &EqCandidate, data: &Dataset, seed: u64) -> Vec<Vec<f64>> {
    let Some(fit) = &c.fit else { return Vec::new() };
    let mut rng = rng_for(seed, "resample");
    let n = data.len();
    let mut out = Vec::with_capacity(BOOT_RESAMPLES);
    for _ in 0..BOOT_RESAMPLES {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sub = data.subset(&idx);
        let opts = FitOptions {
            n_starts: 0,
            max_iter: BOOT_MAX_ITER,
            seed,
            hints: vec![fit.constant_values.clone()],
            split: Some(Split {
                train: (0..n).collect(),
                validation: Vec::new(),
            }),
        };
        if let Ok(f) = fit_constants(&c.hyp, &sub, &opts) {
            if f.constant_values.iter().all(|v| v.is_finite()) {
                out.push(f.constant_values);
            }
        }
    }
    out
}

fn run_equation<T: EquationTask>(
    task: &mut T,
    m: &TaskManifest,
    policy: Policy,
    cfg: &EngineConfig,
    trace: &mut RunTrace,
) -> Result<FinalMechanism, EngineError> {
    let bounds = task.variables().to_vec();
    let names: Vec<String> = bounds.iter().map(|b| b.name.clone()).collect();
    let mut lib = equation_library(m, &names);
    let mut data = Dataset::new(names.clone());
    let mut rng = rng_for(m.seed, "baseline/points");
    let mut t = 0;
    while task.remaining() > 0 {
        let remaining = task.remaining();
        let points = match policy {
            Policy::Random => uniform_points(&bounds, 1, &mut rng),
            Policy::Uncertainty if data.len() < INIT_POINTS => uniform_points(&bounds, 1, &mut rng),
            Policy::Uncertainty => {
                let ranking = fit_equations(&mut lib, &data, derive_seed(m.seed, &format!("fit/{t}")), cfg, t, trace);
                let cands = uniform_points(&bounds, CANDIDATES, &mut rng);
                let n = cfg.equation_batch.min(remaining).max(1);
                let best = pick_best(&ranking, cfg.tie_abs, cfg.tie_rel_equation)
                    .and_then(|i| lib.iter().position(|c| c.key == ranking[i].key));
                let boot = best
                    .map(|b| bootstrap_constants(&lib[b], &data, derive_seed(m.seed, &format!("boot/{t}"))))
                    .unwrap_or_default();
                let scores: Vec<f64> = match best {
                    Some(b) if boot.len() >= 2 => cands
                        .iter()
                        .map(|x| {
                            let p: Vec<f64> = boot.iter().map(|c| lib[b].compiled.eval(x, c)).collect();
                            disagreement(&p)
                        })
                        .collect(),
                    _ => vec![0.0; cands.len()],
                };
                if scores.iter().all(|s| *s == 0.0) {
                    cands.into_iter().take(n).collect()
                } else {
                    let feats: Vec<Vec<f64>> = cands.iter().map(|x| normalize(x, &bounds)).collect();
                    select_diverse(&feats, &scores, n).into_iter().map(|i| cands[i].clone()).collect()
                }
            }
            Policy::Bo => {
                let feats: Vec<Vec<f64>> = data.x.iter().map(|x| normalize(x, &bounds)).collect();
                let y: Vec<f64> = data.y.iter().map(|v| v.max(LOG_FLOOR).log10()).collect();
                let gp = Gp::fit(&feats, &y);
                let cands = uniform_points(&bounds, CANDIDATES, &mut rng);
                let mut best = (0, f64::NEG_INFINITY);
                for (i, x) in cands.iter().enumerate() {
                    let v = gp.variance(&normalize(x, &bounds));
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                vec![cands[best.0].clone()]
            }
        };
        for x in points {
            let y = task.query_point(&x)?;
            let input: serde_json::Map<String, serde_json::Value> =
                names.iter().cloned().zip(x.iter().map(|v| serde_json::json!(v))).collect();
            trace.push(TraceEvent::Query {
                iteration: t,
                index: data.len(),
                input: input.into(),
                observation: serde_json::json!(y),
            });
            data.push(x, y);
        }
        t += 1;
    }
    let ranking = fit_equations(&mut lib, &data, derive_seed(m.seed, "final"), cfg, t, trace);
    let i = pick_best(&ranking, cfg.tie_abs, cfg.tie_rel_equation).ok_or(EngineError::EmptyPool)?;
    let c = lib.iter().find(|c| c.key == ranking[i].key).expect("ranked keys come from the library");
    let fit = c.fit.as_ref().ok_or(EngineError::EmptyPool)?;
    let opts = FitOptions {
        n_starts: cfg.fit_starts,
        seed: derive_seed(m.seed, "final/refit"),
        hints: vec![fit.constant_values.clone()],
        split: Some(Split {
            train: (0..data.len()).collect(),
            validation: Vec::new(),
        }),
        ..FitOptions::default()
    };
    let constants = fit_constants(&c.hyp, &data, &opts)
        .map(|f| f.fitted_constants)
        .unwrap_or_else(|_| fit.fitted_constants.clone());
    let mechanism = FinalMechanism::Equation {
        expression: c.text.clone(),
        skeleton: c.key.clone(),
        instantiated: c.hyp.instantiate(&constants),
        constants,
        score: c.score(),
        complexity: c.hyp.free_constants.len(),
        selection: Selection::Deterministic,
    };
    trace.push(TraceEvent::Final {
        mechanism: mechanism.clone(),
        candidates: ranking,
        note: None,
    });
    Ok(mechanism)
}

struct GraphCandidate {
    key: String,
    graph: SignedGraph,
    fit: Option<GraphFitResult>,
}

impl GraphCandidate {
    fn score(&self) -> f64 {
        self.fit.as_ref().map_or(f64::INFINITY, |f| f.loss)
    }
}

fn graph_library(m: &TaskManifest) -> Vec<GraphCandidate> {
    let mut seen = BTreeSet::new();
    LibraryProposer::for_task(m)
        .members()
        .into_iter()
        .filter_map(|r| {
            let g = r.as_graph()?.clone();
            seen.insert(r.key.clone()).then(|| GraphCandidate {
                key: r.key.clone(),
                graph: g,
                fit: None,
            })
        })
        .collect()
}

fn fit_graphs(
    lib: &mut [GraphCandidate],
    data: &[(Intervention, GrnObservation)],
    seed: u64,
    cfg: &EngineConfig,
    iteration: usize,
    trace: &mut RunTrace,
) -> Vec<RankedHypothesis> {
    let mut ranked = Vec::with_capacity(lib.len());
    for c in lib.iter_mut() {
        let opts = GraphFitOptions {
            max_iter: cfg.graph_fit_iters,
            seed,
            extra_starts: usize::from(c.fit.is_none()),
            warm_start: c.fit.as_ref().map(|f| f.dynamics.clone()),
        };
        if let Ok(f) = fit_graph(&c.graph, data, &opts) {
            c.fit = Some(f);
        }
        let score = c.score();
        trace.push(TraceEvent::Fit {
            iteration,
            key: c.key.clone(),
            text: c.key.clone(),
            score,
            complexity: c.graph.len(),
            parameters: serde_json::json!(c.fit.as_ref().map(|f| &f.dynamics)),
        });
        ranked.push(RankedHypothesis {
            key: c.key.clone(),
            text: c.key.clone(),
            score,
            complexity: c.graph.len(),
            failed: false,
        });
    }
    rank(ranked)
}

fn mean_log_level(o: &GrnObservation) -> f64 {
    o.expression.iter().map(|v| v.max(LOG_FLOOR).log10()).sum::<f64>() / 4.0
}

fn run_graph(
    task: &mut BudgetedOracle<GrnMechanism>,
    m: &TaskManifest,
    policy: Policy,
    cfg: &EngineConfig,
    trace: &mut RunTrace,
) -> Result<FinalMechanism, EngineError> {
    let menu: Vec<Intervention> = admissible_interventions().iter().map(Intervention::canonical).collect();
    let mut lib = graph_library(m);
    let mut data: Vec<(Intervention, GrnObservation)> = Vec::new();
    let mut rng = rng_for(m.seed, "baseline/interventions");
    let mut t = 0;
    while task.remaining() > 0 {
        let remaining = task.remaining();
        let fresh: Vec<usize> = (0..menu.len()).filter(|&i| !data.iter().any(|(iv, _)| *iv == menu[i])).collect();
        let open: Vec<usize> = if fresh.is_empty() { (0..menu.len()).collect() } else { fresh };
        let picks: Vec<usize> = match policy {
            Policy::Random => vec![rng.random_range(0..menu.len())],
            Policy::Uncertainty if data.len() < INIT_INTERVENTIONS => vec![open[rng.random_range(0..open.len())]],
            Policy::Uncertainty => {
                let ranking = fit_graphs(&mut lib, &data, derive_seed(m.seed, &format!("fit/{t}")), cfg, t, trace);
                let n = cfg.graph_batch.min(remaining).max(1);
                let best = pick_best(&ranking, cfg.tie_abs, cfg.tie_rel_graph)
                    .and_then(|i| lib.iter().position(|c| c.key == ranking[i].key));
                let mut sets: Vec<Vec<Option<[f64; 4]>>> = Vec::new();
                if let Some(fit) = best.and_then(|b| lib[b].fit.as_ref()) {
                    let mut brng = rng_for(m.seed, &format!("boot/{t}"));
                    for _ in 0..GRAPH_BOOT_RESAMPLES {
                        let sub: Vec<_> = (0..data.len()).map(|_| data[brng.random_range(0..data.len())].clone()).collect();
                        let opts = GraphFitOptions {
                            max_iter: GRAPH_BOOT_MAX_ITER,
                            seed: derive_seed(m.seed, &format!("boot/{t}")),
                            extra_starts: 0,
                            warm_start: Some(fit.dynamics.clone()),
                        };
                        if let Ok(f) = fit_graph(&fit.graph, &sub, &opts) {
                            sets.push(open.iter().map(|&i| f.predict(&menu[i]).ok().map(|o| o.expression)).collect());
                        }
                    }
                }
                let scores: Vec<f64> = (0..open.len())
                    .map(|j| grn_disagreement(&sets.iter().filter_map(|s| s[j]).collect::<Vec<_>>()))
                    .collect();
                if scores.iter().all(|s| *s == 0.0) {
                    (0..n.min(open.len())).map(|_| open[rng.random_range(0..open.len())]).collect()
                } else {
                    let feats: Vec<Vec<f64>> = open.iter().map(|&i| intervention_features(&menu[i])).collect();
                    select_diverse(&feats, &scores, n).into_iter().map(|j| open[j]).collect()
                }
            }
            Policy::Bo => {
                let feats: Vec<Vec<f64>> = data.iter().map(|(iv, _)| intervention_features(iv)).collect();
                let y: Vec<f64> = data.iter().map(|(_, o)| mean_log_level(o)).collect();
                let gp = Gp::fit(&feats, &y);
                let mut best = (open[0], f64::NEG_INFINITY);
                for &i in &open {
                    let v = gp.variance(&intervention_features(&menu[i]));
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                vec![best.0]
            }
        };
        for i in picks {
            let iv = menu[i].clone();
            let obs = task.query(&iv)?;
            trace.push(TraceEvent::Query {
                iteration: t,
                index: data.len(),
                input: serde_json::to_value(&iv).expect("interventions serialize"),
                observation: serde_json::to_value(&obs).expect("observations serialize"),
            });
            data.push((iv, obs));
        }
        t += 1;
    }
    let ranking = fit_graphs(&mut lib, &data, derive_seed(m.seed, "final"), cfg, t, trace);
    let i = pick_best(&ranking, cfg.tie_abs, cfg.tie_rel_graph).ok_or(EngineError::EmptyPool)?;
    let c = lib.iter().find(|c| c.key == ranking[i].key).expect("ranked keys come from the library");
    let fit = c.fit.as_ref().ok_or(EngineError::EmptyPool)?;
    let mechanism = FinalMechanism::Graph {
        graph: c.graph.clone(),
        dynamics: fit.dynamics.clone(),
        score: fit.loss,
        complexity: c.graph.len(),
        selection: Selection::Deterministic,
    };
    trace.push(TraceEvent::Final {
        mechanism: mechanism.clone(),
        candidates: ranking,
        note: None,
    });
    Ok(mechanism)
}
