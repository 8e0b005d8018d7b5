//! The discovery loop over signed regulatory graphs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::acquire::{grn_disagreement, intervention_features, select_diverse, space_filling};
use super::memory::{MemoryLedger, Scored};
use super::{
    choose_final, fmt_num, rank, ranking_text, record_texts, select_mode, with_fallback, EngineConfig, EngineError,
    FinalMechanism, Mode, RunTrace, TraceEvent,
};
use crate::ensemble::{grow, validate_graph, HypothesisRecord};
use crate::fitkit::{bootstrap_confidence, fit_graph, prior_dynamics, FitError, FIT_MAX_STEPS, GraphFitOptions, GraphFitResult};
use crate::grn::{
    admissible_interventions, steady_state_within, GrnDynamics, GrnObservation, Intervention, SignedGraph,
};
use crate::oracle::{BudgetedOracle, TaskManifest};
use crate::grn::GrnMechanism;
use crate::proposer::{LibraryProposer, Phase, PromptContext, Proposer, RankedHypothesis, RegionSpec, TaskView};
use crate::seeding::derive_seed;

const GOAL: &str = "Identify the signed regulatory graph among signal, A, B, C and R that explains the \
steady-state responses to interventions, using as few experiments as possible.";

const DOMAIN: &str = "Gene-regulatory circuit with an external signal and four genes A, B, C, R. \
Each experiment applies at most two actions (knock up or knock down a gene, or set the signal level) \
and measures the steady-state expression of A, B, C and R. C is the readout gene.";

/// Optimizer iterations for each bootstrap refit, which starts at the
/// current optimum.
const BOOTSTRAP_MAX_ITER: usize = 150;

struct Entry {
    text: String,
    graph: SignedGraph,
    fit: Option<GraphFitResult>,
}

impl Entry {
    fn score(&self) -> f64 {
        self.fit.as_ref().map_or(f64::INFINITY, |f| f.loss)
    }

    fn dynamics(&self) -> GrnDynamics {
        self.fit
            .as_ref()
            .map_or_else(|| prior_dynamics(&self.graph), |f| f.dynamics.clone())
    }
}

struct State {
    data: Vec<(Intervention, GrnObservation)>,
    pool: BTreeMap<String, Entry>,
    memory: MemoryLedger,
    confidence: f64,
    ranking: Vec<RankedHypothesis>,
    best: Option<String>,
    /// Dynamics of the best graph refitted on each bootstrap resample.
    boot: Vec<GrnDynamics>,
    last_acquisition: String,
}

impl State {
    fn admit(&mut self, rec: &HypothesisRecord) {
        if !rec.valid || self.pool.contains_key(&rec.key) {
            return;
        }
        let Some(g) = rec.as_graph() else { return };
        self.pool.insert(
            rec.key.clone(),
            Entry {
                text: rec.text.clone(),
                graph: g.clone(),
                fit: None,
            },
        );
    }

    fn excluded(&self, key: &str, cfg: &EngineConfig) -> bool {
        cfg.memory && self.memory.is_failed(key)
    }

    fn data_table(&self, cfg: &EngineConfig) -> String {
        let n = self.data.len();
        let mut s = String::from("# | intervention | A | B | C | R\n");
        if n == 0 {
            s.push_str("(no experiments yet)\n");
        }
        for i in n.saturating_sub(cfg.table_recent + cfg.table_disagreement)..n {
            let (iv, obs) = &self.data[i];
            let levels: Vec<String> = obs.expression.iter().map(|v| fmt_num(*v)).collect();
            let _ = writeln!(s, "{i} | {} | {}", iv.describe(), levels.join(" | "));
        }
        s
    }

    fn context(&self, t: usize, phase: Phase, budget: (usize, usize), max_exp: usize, cfg: &EngineConfig) -> PromptContext {
        PromptContext {
            goal: GOAL.into(),
            domain: DOMAIN.into(),
            task: TaskView::Graph,
            data_table: self.data_table(cfg),
            best: self
                .memory
                .best
                .as_ref()
                .map(|b| b.text.clone())
                .or_else(|| self.ranking.first().map(|r| r.text.clone())),
            current_hypotheses: self.ranking.iter().map(|r| r.text.clone()).collect(),
            memory: if cfg.memory { self.memory.summary_text() } else { String::new() },
            phase,
            confidence: self.confidence,
            fit_summary: ranking_text(&self.ranking, 10),
            ensemble: None,
            discrimination_hints: self.last_acquisition.clone(),
            budget_total: budget.0,
            budget_remaining: budget.1,
            max_experiments: max_exp,
            ranking: self.ranking.clone(),
            iteration: t,
        }
    }

    fn fit_pool(&mut self, t: usize, seed: u64, cfg: &EngineConfig, trace: &mut RunTrace) -> Vec<Scored> {
        let mut scored = Vec::with_capacity(self.pool.len());
        for (key, e) in self.pool.iter_mut() {
            let opts = GraphFitOptions {
                max_iter: cfg.graph_fit_iters,
                seed,
                extra_starts: usize::from(e.fit.is_none()),
                warm_start: e.fit.as_ref().map(|f| f.dynamics.clone()),
            };
            if let Ok(f) = fit_graph(&e.graph, &self.data, &opts) {
                e.fit = Some(f);
            }
            let score = e.score();
            trace.push(TraceEvent::Fit {
                iteration: t,
                key: key.clone(),
                text: e.text.clone(),
                score,
                complexity: e.graph.len(),
                parameters: serde_json::json!(e.fit.as_ref().map(|f| &f.dynamics)),
            });
            scored.push(Scored {
                key: key.clone(),
                text: e.text.clone(),
                score,
                complexity: e.graph.len(),
            });
        }
        scored
    }

    fn ranked(&self, scored: &[Scored], cfg: &EngineConfig) -> Vec<RankedHypothesis> {
        rank(
            scored
                .iter()
                .map(|s| RankedHypothesis {
                    key: s.key.clone(),
                    text: s.text.clone(),
                    score: s.score,
                    complexity: s.complexity,
                    failed: self.excluded(&s.key, cfg),
                })
                .collect(),
        )
    }

    fn refine(&mut self, t: usize, base_seed: u64, cfg: &EngineConfig, trace: &mut RunTrace) {
        let scored = self.fit_pool(t, derive_seed(base_seed, &format!("refine/{t}")), cfg, trace);
        let ranking = self.ranked(&scored, cfg);
        let eligible: Vec<RankedHypothesis> = ranking.iter().filter(|r| !r.failed).cloned().collect();
        let best = super::pick_best(&eligible, cfg.tie_abs, cfg.tie_rel_graph).map(|i| eligible[i].key.clone());
        self.boot.clear();
        self.confidence = 0.0;
        if let Some(key) = &best {
            let (confidence, failures, boot) = self.bootstrap(key, derive_seed(base_seed, &format!("bootstrap/{t}")), cfg);
            self.confidence = confidence;
            self.boot = boot;
            trace.push(TraceEvent::Confidence {
                iteration: t,
                best: self.pool[key].text.clone(),
                value: confidence,
                failed_resamples: failures,
            });
        }
        if cfg.memory {
            let latest = self.data.len().saturating_sub(1);
            self.memory
                .update(t, &scored, best.as_deref(), self.confidence, cfg.tau_conf, latest);
        }
        self.ranking = self.ranked(&scored, cfg);
        self.best = best;
    }

    /// Refits the best graph's dynamics on resamples of the observations,
    /// starting from its current fit, and predicts every observed
    /// intervention.
    fn bootstrap(&self, key: &str, seed: u64, cfg: &EngineConfig) -> (f64, usize, Vec<GrnDynamics>) {
        let e = &self.pool[key];
        let Some(fit) = &e.fit else { return (0.0, cfg.n_resamples, Vec::new()) };
        let mut dynamics = Vec::new();
        let report = bootstrap_confidence(
            |idx: &[usize]| {
                let sub: Vec<(Intervention, GrnObservation)> = idx.iter().map(|&i| self.data[i].clone()).collect();
                let opts = GraphFitOptions {
                    max_iter: BOOTSTRAP_MAX_ITER,
                    seed,
                    extra_starts: 0,
                    warm_start: Some(fit.dynamics.clone()),
                };
                let f = fit_graph(&e.graph, &sub, &opts)?;
                let mut p = Vec::with_capacity(4 * self.data.len());
                for (iv, _) in &self.data {
                    match f.predict(iv) {
                        Ok(o) => p.extend_from_slice(&o.expression),
                        Err(_) => p.extend_from_slice(&[f64::NAN; 4]),
                    }
                }
                if p.iter().all(|v| v.is_finite()) {
                    dynamics.push(f.dynamics);
                }
                Ok::<_, FitError>(p)
            },
            self.data.len(),
            cfg.n_resamples,
            seed,
        );
        (report.confidence, report.failures, dynamics)
    }
}

/// Interventions named by the proposal regions, in first-mention order and
/// without repeats. Already-queried interventions are left out while
/// unqueried ones remain.
fn candidate_interventions(regions: &[crate::proposer::SearchRegion], queried: &[Intervention]) -> (Vec<Intervention>, bool) {
    let mut named: Vec<Intervention> = Vec::new();
    for r in regions {
        if let RegionSpec::Interventions(ivs) = &r.spec {
            for iv in ivs {
                let c = iv.canonical();
                if !named.contains(&c) {
                    named.push(c);
                }
            }
        }
    }
    let from_regions = !named.is_empty();
    if !from_regions {
        named = admissible_interventions().iter().map(Intervention::canonical).collect();
    }
    let fresh: Vec<Intervention> = named.iter().filter(|iv| !queried.contains(iv)).cloned().collect();
    (if fresh.is_empty() { named } else { fresh }, from_regions)
}

fn predictions(g: &SignedGraph, d: &GrnDynamics, candidates: &[Intervention]) -> Vec<Option<[f64; 4]>> {
    candidates
        .iter()
        .map(|iv| steady_state_within(g, d, iv, FIT_MAX_STEPS).ok().map(|o| o.expression))
        .collect()
}

/// Per-candidate disagreement across prediction sets; a set that failed at a
/// candidate is left out there.
fn score_sets(sets: &[Vec<Option<[f64; 4]>>], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let r: Vec<[f64; 4]> = sets.iter().filter_map(|s| s[i]).collect();
            grn_disagreement(&r)
        })
        .collect()
}

pub(super) fn run(
    task: &mut BudgetedOracle<GrnMechanism>,
    manifest: &TaskManifest,
    proposer: &mut dyn Proposer,
    fallback: &mut LibraryProposer,
    cfg: &EngineConfig,
    trace: &mut RunTrace,
) -> Result<FinalMechanism, EngineError> {
    let budget = task.budget();
    let mut st = State {
        data: Vec::new(),
        pool: BTreeMap::new(),
        memory: MemoryLedger::default(),
        confidence: 0.0,
        ranking: Vec::new(),
        best: None,
        boot: Vec::new(),
        last_acquisition: String::new(),
    };
    let mut prev_mode: Option<Mode> = None;
    let mut t = 0;
    while task.remaining() > 0 {
        let mode = if cfg.gating {
            select_mode(st.confidence, cfg.tau_conf)
        } else {
            Mode::Disambiguate
        };
        let phase = match (t, mode) {
            (0, _) => Phase::Explore,
            (_, Mode::Refine) => Phase::Refine,
            _ => Phase::Disambiguate,
        };
        let max_exp = cfg.graph_batch.min(task.remaining());
        let mut ctx = st.context(t, phase, (budget, task.remaining()), max_exp, cfg);

        let mut filter = |batch: Vec<HypothesisRecord>| -> Vec<HypothesisRecord> { batch.into_iter().map(validate_graph).collect() };
        let primary = grow(|b| proposer.sample_batch(&ctx, b), &mut filter, &cfg.ensemble).map_err(|e| e.to_string());
        trace.audit(t, proposer.drain_audit());
        let dist = with_fallback(trace, t, "ensemble", primary, || {
            grow(|b| fallback.sample_batch(&ctx, b), &mut filter, &cfg.ensemble).map_err(|e| e.to_string())
        })?;
        trace.push(TraceEvent::Ensemble {
            iteration: t,
            drawn: dist.drawn,
            valid: dist.n_valid(),
            clusters: dist.clusters.len(),
            entropy: dist.entropy,
            agreement: dist.agreement,
        });
        ctx.ensemble = Some(dist.summary_text());
        ctx.current_hypotheses = record_texts(&dist.representative_records().cloned().collect::<Vec<_>>());

        let primary = proposer.synthesize_proposal(&ctx).map_err(|e| e.to_string());
        trace.audit(t, proposer.drain_audit());
        let mut proposal =
            with_fallback(trace, t, "proposal", primary, || fallback.synthesize_proposal(&ctx).map_err(|e| e.to_string()))?;
        proposal.enforce_alternate_cap();
        proposal.clamp_regions(&[]);
        trace.proposal(t, &proposal);
        proposal.primary = validate_graph(proposal.primary);
        proposal.alternates = std::mem::take(&mut proposal.alternates)
            .into_iter()
            .map(validate_graph)
            .collect();

        for r in dist.records.iter().chain(std::iter::once(&proposal.primary)).chain(&proposal.alternates) {
            st.admit(r);
        }
        let mut committee: Vec<String> = Vec::new();
        for r in std::iter::once(&proposal.primary)
            .chain(&proposal.alternates)
            .chain(dist.representative_records())
        {
            if r.valid && st.pool.contains_key(&r.key) && !committee.contains(&r.key) && !st.excluded(&r.key, cfg) {
                committee.push(r.key.clone());
            }
        }

        let queried: Vec<Intervention> = st.data.iter().map(|(iv, _)| iv.canonical()).collect();
        let (candidates, from_regions) = candidate_interventions(&proposal.search_regions, &queried);
        if !from_regions {
            trace.degraded(t, "acquire", "proposal named no interventions; using the full menu");
        }
        let requested: usize = proposal.search_regions.iter().map(|r| r.n_experiments).sum();
        let n = requested.max(1).min(max_exp);
        let features: Vec<Vec<f64>> = candidates.iter().map(intervention_features).collect();
        let scores: Option<Vec<f64>> = match mode {
            Mode::Disambiguate if committee.len() >= 2 => {
                let sets: Vec<_> = committee
                    .iter()
                    .map(|k| {
                        let e = &st.pool[k];
                        predictions(&e.graph, &e.dynamics(), &candidates)
                    })
                    .collect();
                Some(score_sets(&sets, candidates.len()))
            }
            Mode::Refine if st.boot.len() >= 2 => st.best.as_ref().and_then(|k| st.pool.get(k)).map(|e| {
                let sets: Vec<_> = st.boot.iter().map(|d| predictions(&e.graph, d, &candidates)).collect();
                score_sets(&sets, candidates.len())
            }),
            _ => None,
        };
        let space_fill = scores.as_ref().is_none_or(|s| s.iter().all(|v| *v == 0.0));
        let picks = match &scores {
            Some(s) if !space_fill => select_diverse(&features, s, n),
            _ => {
                let existing: Vec<Vec<f64>> = queried.iter().map(intervention_features).collect();
                space_filling(&features, &existing, n)
            }
        };
        st.last_acquisition = match &scores {
            Some(s) if !space_fill => {
                let top = picks.iter().map(|&i| s[i]).fold(0.0, f64::max);
                format!(
                    "Previous batch ({} mode): largest log-response variance among selected interventions {}.",
                    if mode == Mode::Refine { "refine" } else { "disambiguate" },
                    fmt_num(top)
                )
            }
            _ => "Previous batch was space-filling: the hypotheses did not yet disagree anywhere.".into(),
        };
        trace.push(TraceEvent::Mode {
            iteration: t,
            mode,
            confidence: st.confidence,
            batch: picks.len(),
            fallback: space_fill,
        });
        for &i in &picks {
            let iv = candidates[i].clone();
            let obs = task.query(&iv)?;
            trace.push(TraceEvent::Query {
                iteration: t,
                index: st.data.len(),
                input: serde_json::to_value(&iv).expect("interventions serialize"),
                observation: serde_json::to_value(&obs).expect("observations serialize"),
            });
            st.data.push((iv, obs));
        }

        let switched = mode == Mode::Refine && prev_mode != Some(Mode::Refine);
        if (t + 1) % cfg.refine_every.max(1) == 0 || switched {
            st.refine(t, manifest.seed, cfg, trace);
        }
        prev_mode = Some(mode);
        t += 1;
    }

    let scored = st.fit_pool(t, derive_seed(manifest.seed, "final"), cfg, trace);
    st.ranking = st.ranked(&scored, cfg);
    let ctx = st.context(t, Phase::Finalize, (budget, 0), 0, cfg);
    let (winner, selection, candidates, note) =
        choose_final(&st.ranking, proposer, &ctx, cfg.tie_abs, cfg.tie_rel_graph, t, trace)?;
    let e = &st.pool[&winner];
    let fit = e.fit.as_ref().ok_or(EngineError::EmptyPool)?;
    let mechanism = FinalMechanism::Graph {
        graph: e.graph.clone(),
        dynamics: fit.dynamics.clone(),
        score: fit.loss,
        complexity: e.graph.len(),
        selection,
    };
    trace.push(TraceEvent::Final {
        mechanism: mechanism.clone(),
        candidates,
        note,
    });
    Ok(mechanism)
}
