//! The discovery loop over scalar-response tasks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::acquire::{disagreement, normalize, resolve_boxes, sample_boxes, select_diverse, space_filling};
use super::memory::{MemoryLedger, Scored};
use super::{
    choose_final, fmt_num, rank, ranking_text, record_texts, select_mode, with_fallback, EngineConfig, EngineError,
    FinalMechanism, Mode, RunTrace, TraceEvent,
};
use crate::ensemble::{grow, validate_equation, HypothesisRecord};
use crate::exprlang::{CompiledExpr, ParsedHypothesis};
use crate::fitkit::{bootstrap_confidence, fit_constants, Dataset, FitError, FitOptions, FitResult, Split};
use crate::oracle::{EquationTask, TaskManifest, VariableSpec};
use crate::proposer::{
    LibraryProposer, Phase, PromptContext, Proposal, Proposer, RankedHypothesis, RegionSpec, TaskView,
};
use crate::seeding::{derive_seed, rng_for};

const GOAL: &str = "Identify the closed-form law that maps the controllable inputs to the measured response, \
using as few experiments as possible.";

/// Iterations allowed for each bootstrap refit, which starts at the current
/// optimum.
const BOOTSTRAP_MAX_ITER: usize = 60;

struct Entry {
    text: String,
    hyp: ParsedHypothesis,
    compiled: CompiledExpr,
    fit: Option<FitResult>,
}

impl Entry {
    fn score(&self) -> f64 {
        self.fit.as_ref().map_or(f64::INFINITY, |f| f.validation_rmsle)
    }
}

/// Quick-fit outcome per hypothesis text for the current iteration.
type QuickCache = BTreeMap<String, Result<Option<FitResult>, String>>;

struct State {
    bounds: Vec<VariableSpec>,
    data: Dataset,
    pool: BTreeMap<String, Entry>,
    memory: MemoryLedger,
    confidence: f64,
    ranking: Vec<RankedHypothesis>,
    best: Option<String>,
    /// Constants of the best mechanism refitted on each bootstrap resample.
    boot: Vec<Vec<f64>>,
    last_acquisition: String,
}

impl State {
    fn names(&self) -> &[String] {
        &self.data.variables
    }

    fn validate(&self, rec: HypothesisRecord, seed: u64, cache: &mut QuickCache) -> HypothesisRecord {
        if let Some(c) = cache.get(&rec.text) {
            return match c {
                Ok(_) => rec,
                Err(reason) => rec.reject(reason.clone()),
            };
        }
        let hint = self
            .pool
            .get(&rec.key)
            .filter(|e| e.text == rec.text)
            .and_then(|e| e.fit.as_ref())
            .map(|f| f.constant_values.clone());
        let (rec, fit) = validate_equation(rec, &self.data, &self.bounds, seed, hint);
        let outcome = if rec.valid {
            Ok(fit)
        } else {
            Err(rec.rejection.clone().unwrap_or_default())
        };
        cache.insert(rec.text.clone(), outcome);
        rec
    }

    fn admit(&mut self, rec: &HypothesisRecord) {
        if !rec.valid || self.pool.contains_key(&rec.key) {
            return;
        }
        let Some(h) = rec.as_equation() else { return };
        let Ok(compiled) = h.compile(&self.data.variables) else { return };
        self.pool.insert(
            rec.key.clone(),
            Entry {
                text: rec.text.clone(),
                hyp: h.clone(),
                compiled,
                fit: None,
            },
        );
    }

    fn excluded(&self, key: &str, cfg: &EngineConfig) -> bool {
        cfg.memory && self.memory.is_failed(key)
    }

    /// Fitted members of the current committee, one per structure.
    fn committee(&self, recs: &[&HypothesisRecord], cache: &QuickCache, cfg: &EngineConfig) -> Vec<(CompiledExpr, Vec<f64>)> {
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for r in recs {
            if !r.valid || seen.contains(&r.key) || self.excluded(&r.key, cfg) {
                continue;
            }
            seen.push(r.key.clone());
            let quick = match cache.get(&r.text) {
                Some(Ok(Some(f))) => Some(f.constant_values.clone()),
                _ => None,
            };
            let pooled = self
                .pool
                .get(&r.key)
                .filter(|e| e.text == r.text)
                .and_then(|e| e.fit.as_ref())
                .map(|f| f.constant_values.clone());
            let (Some(h), Some(c)) = (r.as_equation(), quick.or(pooled)) else { continue };
            if let Ok(f) = h.compile(self.names()) {
                out.push((f, c));
            }
        }
        out
    }

    fn data_table(&self, cfg: &EngineConfig) -> String {
        let n = self.data.len();
        let mut rows: Vec<usize> = (n.saturating_sub(cfg.table_recent)..n).collect();
        let fitted: Vec<(&CompiledExpr, &[f64])> = self
            .pool
            .values()
            .filter_map(|e| e.fit.as_ref().map(|f| (&e.compiled, f.constant_values.as_slice())))
            .collect();
        if fitted.len() >= 2 {
            let mut older: Vec<(usize, f64)> = (0..n.saturating_sub(cfg.table_recent))
                .map(|i| {
                    let p: Vec<f64> = fitted.iter().map(|(f, c)| f.eval(&self.data.x[i], c)).collect();
                    (i, disagreement(&p))
                })
                .collect();
            older.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            rows.extend(older.iter().take(cfg.table_disagreement).map(|p| p.0));
            rows.sort_unstable();
        }
        let mut s = format!("# | {} | response\n", self.names().join(" | "));
        for i in rows {
            let xs: Vec<String> = self.data.x[i].iter().map(|v| fmt_num(*v)).collect();
            let _ = writeln!(s, "{i} | {} | {}", xs.join(" | "), fmt_num(self.data.y[i]));
        }
        if n == 0 {
            s.push_str("(no experiments yet)\n");
        }
        s
    }

    fn context(&self, t: usize, phase: Phase, domain: &str, budget: (usize, usize), max_exp: usize, cfg: &EngineConfig) -> PromptContext {
        PromptContext {
            goal: GOAL.into(),
            domain: domain.into(),
            task: TaskView::Equation {
                variables: self.bounds.clone(),
            },
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

    /// Refits every pool member on the current data and returns the scores
    /// in pool order.
    fn fit_pool(&mut self, t: usize, seed: u64, cfg: &EngineConfig, trace: &mut RunTrace) -> Vec<Scored> {
        let mut scored = Vec::with_capacity(self.pool.len());
        for (key, e) in self.pool.iter_mut() {
            let opts = FitOptions {
                n_starts: cfg.fit_starts,
                seed,
                hints: e.fit.iter().map(|f| f.constant_values.clone()).collect(),
                ..FitOptions::default()
            };
            e.fit = fit_constants(&e.hyp, &self.data, &opts).ok();
            let score = e.score();
            trace.push(TraceEvent::Fit {
                iteration: t,
                key: key.clone(),
                text: e.text.clone(),
                score,
                complexity: e.hyp.free_constants.len(),
                parameters: serde_json::json!(e.fit.as_ref().map(|f| &f.fitted_constants)),
            });
            scored.push(Scored {
                key: key.clone(),
                text: e.text.clone(),
                score,
                complexity: e.hyp.free_constants.len(),
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
        let best = super::pick_best(&eligible, cfg.tie_abs, cfg.tie_rel_equation).map(|i| eligible[i].key.clone());
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

    /// Refits the best mechanism on resamples of its training rows, starting
    /// from its current constants, and predicts the validation rows.
    fn bootstrap(&self, key: &str, seed: u64, cfg: &EngineConfig) -> (f64, usize, Vec<Vec<f64>>) {
        let e = &self.pool[key];
        let Some(fit) = &e.fit else { return (0.0, cfg.n_resamples, Vec::new()) };
        let split = &fit.split;
        let eval_rows = if split.validation.is_empty() {
            &split.train
        } else {
            &split.validation
        };
        let mut constants = Vec::new();
        let report = bootstrap_confidence(
            |idx: &[usize]| {
                let rows: Vec<usize> = idx.iter().map(|&i| split.train[i]).collect();
                let sub = self.data.subset(&rows);
                let opts = FitOptions {
                    n_starts: 0,
                    max_iter: BOOTSTRAP_MAX_ITER,
                    seed,
                    hints: vec![fit.constant_values.clone()],
                    split: Some(Split {
                        train: (0..sub.len()).collect(),
                        validation: Vec::new(),
                    }),
                };
                let f = fit_constants(&e.hyp, &sub, &opts)?;
                let p: Vec<f64> = eval_rows
                    .iter()
                    .map(|&i| e.compiled.eval(&self.data.x[i], &f.constant_values))
                    .collect();
                if p.iter().all(|v| v.is_finite()) {
                    constants.push(f.constant_values);
                }
                Ok::<_, FitError>(p)
            },
            split.train.len(),
            cfg.n_resamples,
            seed,
        );
        (report.confidence, report.failures, constants)
    }
}

pub(super) fn run<T: EquationTask>(
    task: &mut T,
    manifest: &TaskManifest,
    proposer: &mut dyn Proposer,
    fallback: &mut LibraryProposer,
    cfg: &EngineConfig,
    trace: &mut RunTrace,
) -> Result<FinalMechanism, EngineError> {
    let bounds = task.variables().to_vec();
    let names: Vec<String> = bounds.iter().map(|b| b.name.clone()).collect();
    let domain = task.domain_description();
    let budget = task.budget();
    let mut st = State {
        bounds: bounds.clone(),
        data: Dataset::new(names),
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
        let max_exp = cfg.equation_batch.min(task.remaining());
        let mut ctx = st.context(t, phase, &domain, (budget, task.remaining()), max_exp, cfg);

        let quick_seed = derive_seed(manifest.seed, &format!("quick/{t}"));
        let mut cache = QuickCache::new();
        let dist = {
            let st_ref = &st;
            let cache_ref = &mut cache;
            let mut filter = |batch: Vec<HypothesisRecord>| -> Vec<HypothesisRecord> {
                batch.into_iter().map(|r| st_ref.validate(r, quick_seed, cache_ref)).collect()
            };
            let primary = grow(|b| proposer.sample_batch(&ctx, b), &mut filter, &cfg.ensemble).map_err(|e| e.to_string());
            trace.audit(t, proposer.drain_audit());
            with_fallback(trace, t, "ensemble", primary, || {
                grow(|b| fallback.sample_batch(&ctx, b), &mut filter, &cfg.ensemble).map_err(|e| e.to_string())
            })?
        };
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
        let mut proposal: Proposal =
            with_fallback(trace, t, "proposal", primary, || fallback.synthesize_proposal(&ctx).map_err(|e| e.to_string()))?;
        proposal.enforce_alternate_cap();
        proposal.clamp_regions(&bounds);
        trace.proposal(t, &proposal);
        proposal.primary = st.validate(proposal.primary, quick_seed, &mut cache);
        proposal.alternates = std::mem::take(&mut proposal.alternates)
            .into_iter()
            .map(|r| st.validate(r, quick_seed, &mut cache))
            .collect();

        let members: Vec<&HypothesisRecord> = std::iter::once(&proposal.primary)
            .chain(&proposal.alternates)
            .chain(dist.representative_records())
            .collect();
        let committee = st.committee(&members, &cache, cfg);
        for r in dist.records.iter().chain(std::iter::once(&proposal.primary)).chain(&proposal.alternates) {
            st.admit(r);
        }

        let requested: usize = proposal.search_regions.iter().map(|r| r.n_experiments).sum();
        let n = requested.max(1).min(max_exp);
        let mut rng = rng_for(manifest.seed, &format!("acquire/{t}"));
        let boxes = match resolve_boxes(&proposal.search_regions, &bounds) {
            Ok(b) => b,
            Err(e) => {
                if proposal.search_regions.iter().any(|r| matches!(r.spec, RegionSpec::Bounds(_))) {
                    trace.degraded(t, "acquire", format!("{e}; sampling the full design box"));
                }
                vec![bounds.iter().map(|b| (b.lo, b.hi)).collect()]
            }
        };
        let candidates = sample_boxes(&boxes, cfg.candidates_per_region, &mut rng);
        let features: Vec<Vec<f64>> = candidates.iter().map(|x| normalize(x, &bounds)).collect();
        let scores: Option<Vec<f64>> = match mode {
            Mode::Disambiguate if committee.len() >= 2 => Some(
                candidates
                    .iter()
                    .map(|x| disagreement(&committee.iter().map(|(f, c)| f.eval(x, c)).collect::<Vec<_>>()))
                    .collect(),
            ),
            Mode::Refine if st.boot.len() >= 2 => {
                let e = st.best.as_ref().and_then(|k| st.pool.get(k));
                e.map(|e| {
                    candidates
                        .iter()
                        .map(|x| disagreement(&st.boot.iter().map(|c| e.compiled.eval(x, c)).collect::<Vec<_>>()))
                        .collect()
                })
            }
            _ => None,
        };
        let space_fill = scores.as_ref().is_none_or(|s| s.iter().all(|v| *v == 0.0));
        let picks = match &scores {
            Some(s) if !space_fill => select_diverse(&features, s, n),
            _ => {
                let existing: Vec<Vec<f64>> = st.data.x.iter().map(|x| normalize(x, &bounds)).collect();
                space_filling(&features, &existing, n)
            }
        };
        st.last_acquisition = match &scores {
            Some(s) if !space_fill => {
                let top = picks.iter().map(|&i| s[i]).fold(0.0, f64::max);
                format!(
                    "Previous batch ({} mode): largest log10 prediction spread among selected inputs {}.",
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
            let x = &candidates[i];
            let y = task.query_point(x)?;
            let input: serde_json::Map<String, serde_json::Value> = st
                .names()
                .iter()
                .zip(x)
                .map(|(k, v)| (k.clone(), serde_json::json!(v)))
                .collect();
            trace.push(TraceEvent::Query {
                iteration: t,
                index: st.data.len(),
                input: input.into(),
                observation: serde_json::json!(y),
            });
            st.data.push(x.clone(), y);
        }

        let switched = mode == Mode::Refine && prev_mode != Some(Mode::Refine);
        if (t + 1) % cfg.refine_every.max(1) == 0 || switched {
            st.refine(t, manifest.seed, cfg, trace);
        }
        prev_mode = Some(mode);
        t += 1;
    }

    finalize(&mut st, t, manifest, proposer, &domain, budget, cfg, trace)
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    st: &mut State,
    t: usize,
    manifest: &TaskManifest,
    proposer: &mut dyn Proposer,
    domain: &str,
    budget: usize,
    cfg: &EngineConfig,
    trace: &mut RunTrace,
) -> Result<FinalMechanism, EngineError> {
    let scored = st.fit_pool(t, derive_seed(manifest.seed, "final"), cfg, trace);
    st.ranking = st.ranked(&scored, cfg);
    let ctx = st.context(t, Phase::Finalize, domain, (budget, 0), 0, cfg);
    let (winner, selection, candidates, note) =
        choose_final(&st.ranking, proposer, &ctx, cfg.tie_abs, cfg.tie_rel_equation, t, trace)?;
    let e = &st.pool[&winner];
    let fit = e.fit.as_ref().ok_or(EngineError::EmptyPool)?;
    let all = Split {
        train: (0..st.data.len()).collect(),
        validation: Vec::new(),
    };
    let opts = FitOptions {
        n_starts: cfg.fit_starts,
        seed: derive_seed(manifest.seed, "final/refit"),
        hints: vec![fit.constant_values.clone()],
        split: Some(all),
        ..FitOptions::default()
    };
    let constants = match fit_constants(&e.hyp, &st.data, &opts) {
        Ok(f) => f.fitted_constants,
        Err(_) => fit.fitted_constants.clone(),
    };
    let mechanism = FinalMechanism::Equation {
        expression: e.text.clone(),
        skeleton: winner.clone(),
        instantiated: e.hyp.instantiate(&constants),
        constants,
        score: e.score(),
        complexity: e.hyp.free_constants.len(),
        selection,
    };
    trace.push(TraceEvent::Final {
        mechanism: mechanism.clone(),
        candidates,
        note,
    });
    Ok(mechanism)
}
