//! Aggregate tables (mean ± std across seeds per tier and overall), budget
//! curves, and sample-efficiency ratios against the random baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use activelab_core::metrics::{sample_efficiency, CurvePoint, SampleEfficiency, EXACT_THRESHOLD};
use activelab_core::oracle::{BenchmarkId, Difficulty};
use serde::Serialize;

use crate::methods::Method;
use crate::results::{self, ResultRow, Status};
use crate::HarnessError;

pub const REPORT_FILE: &str = "report.txt";
pub const CURVES_FILE: &str = "curves.tsv";
pub const EFFICIENCY_FILE: &str = "efficiency.tsv";

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        let (a, b) = (s[n / 2 - 1], s[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    }
}

/// One aggregate line. `tier` is `None` for the overall row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub benchmark: BenchmarkId,
    pub method: Method,
    pub budget: usize,
    pub noise_sigma: f64,
    pub tier: Option<Difficulty>,
    pub n_seeds: usize,
    pub n_rows: usize,
    pub n_failed: usize,
    /// Exact recovery rate.
    pub recovery: (f64, f64),
    /// Symbolic accuracy (equations) or mean edge F1 (graphs).
    pub secondary: (f64, f64),
    /// Median RMSLE (equations) or mean sign accuracy (graphs).
    pub tertiary: (f64, f64),
}

type GroupKey = (BenchmarkId, Method, usize, u64, Option<Difficulty>);

/// Per-seed rates averaged across seeds, so the std is a between-seed
/// spread. Rows are put in canonical order first so the result does not
/// depend on input order.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<AggregateRow>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let mut sorted = rows.to_vec();
    results::sort_rows(&mut sorted);
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<&ResultRow>>> = BTreeMap::new();
    for r in &sorted {
        for tier in [Some(r.tier), None] {
            groups
                .entry((r.benchmark, r.method, r.budget, r.noise_sigma.to_bits(), tier))
                .or_default()
                .entry(r.seed)
                .or_default()
                .push(r);
        }
    }
    let mut out = Vec::new();
    for ((benchmark, method, budget, noise, tier), by_seed) in groups {
        let graph = benchmark == BenchmarkId::Grn;
        let (mut rec, mut sec, mut ter) = (Vec::new(), Vec::new(), Vec::new());
        let (mut n_rows, mut n_failed) = (0, 0);
        for rs in by_seed.values() {
            n_rows += rs.len();
            n_failed += rs.iter().filter(|r| r.status == Status::Failed).count();
            let n = rs.len() as f64;
            rec.push(rs.iter().filter(|r| r.recovered()).count() as f64 / n);
            if graph {
                sec.push(rs.iter().map(|r| r.f1.unwrap_or(0.0)).sum::<f64>() / n);
                ter.push(rs.iter().map(|r| r.sign_accuracy.unwrap_or(0.0)).sum::<f64>() / n);
            } else {
                sec.push(rs.iter().filter(|r| r.symbolic == Some(true)).count() as f64 / n);
                let e: Vec<f64> = rs.iter().map(|r| r.rmsle.unwrap_or(f64::INFINITY)).collect();
                ter.push(median(&e));
            }
        }
        out.push(AggregateRow {
            benchmark,
            method,
            budget,
            noise_sigma: f64::from_bits(noise),
            tier,
            n_seeds: by_seed.len(),
            n_rows,
            n_failed,
            recovery: mean_std(&rec),
            secondary: mean_std(&sec),
            tertiary: mean_std(&ter),
        });
    }
    Ok(out)
}

/// Sample-efficiency of `method` against `reference` on one benchmark tier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub benchmark: BenchmarkId,
    pub method: Method,
    pub reference: Method,
    pub noise_sigma: f64,
    pub tier: Option<Difficulty>,
    /// (task, seed) pairs with curves for both methods.
    pub pairs: usize,
    pub method_reached: usize,
    pub reference_reached: usize,
    /// Median of the per-pair budget ratios; unreached pairs enter as
    /// infinity (method) or zero (reference only).
    pub median_ratio: f64,
}

/// Score whose target defines recovery: RMSLE for equations (lower is
/// better), exact-graph indicator for graphs.
fn curve_value(r: &ResultRow) -> f64 {
    match r.benchmark {
        BenchmarkId::Grn => f64::from(u8::from(r.recovered())),
        _ if r.status == Status::Ok => r.rmsle.unwrap_or(f64::INFINITY),
        _ => f64::INFINITY,
    }
}

/// Per-(task, seed) budget curves of one method.
pub fn curves_by_task(rows: &[ResultRow], method: Method) -> BTreeMap<(BenchmarkId, String, u64, u64), Vec<CurvePoint>> {
    let mut out: BTreeMap<_, Vec<CurvePoint>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method == method) {
        out.entry((r.benchmark, r.task_id.clone(), r.seed, r.noise_sigma.to_bits()))
            .or_default()
            .push((r.budget as f64, curve_value(r)));
    }
    for c in out.values_mut() {
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

pub fn pair_efficiencies(
    rows: &[ResultRow],
    method: Method,
    reference: Method,
) -> Vec<((BenchmarkId, String, u64, u64), Difficulty, SampleEfficiency)> {
    let tiers: BTreeMap<(BenchmarkId, String), Difficulty> =
        rows.iter().map(|r| ((r.benchmark, r.task_id.clone()), r.tier)).collect();
    let mine = curves_by_task(rows, method);
    let theirs = curves_by_task(rows, reference);
    let mut out = Vec::new();
    for (key, curve) in &mine {
        let Some(ref_curve) = theirs.get(key) else { continue };
        let (target, lower) = match key.0 {
            BenchmarkId::Grn => (1.0, false),
            _ => (EXACT_THRESHOLD, true),
        };
        let tier = tiers[&(key.0, key.1.clone())];
        out.push((key.clone(), tier, sample_efficiency(curve, ref_curve, target, lower)));
    }
    out
}

pub fn efficiency(rows: &[ResultRow], reference: Method) -> Vec<EfficiencyRow> {
    let methods: std::collections::BTreeSet<Method> =
        rows.iter().map(|r| r.method).filter(|m| *m != reference).collect();
    let mut out = Vec::new();
    for method in methods {
        let pairs = pair_efficiencies(rows, method, reference);
        let mut groups: BTreeMap<(BenchmarkId, u64, Option<Difficulty>), Vec<SampleEfficiency>> = BTreeMap::new();
        for ((b, _, _, noise), tier, e) in pairs {
            for t in [Some(tier), None] {
                groups.entry((b, noise, t)).or_default().push(e);
            }
        }
        for ((benchmark, noise, tier), es) in groups {
            let ratios: Vec<f64> = es.iter().map(SampleEfficiency::as_f64).collect();
            out.push(EfficiencyRow {
                benchmark,
                method,
                reference,
                noise_sigma: f64::from_bits(noise),
                tier,
                pairs: es.len(),
                method_reached: es.iter().filter(|e| !matches!(e, SampleEfficiency::MethodUnreached)).count(),
                reference_reached: es.iter().filter(|e| matches!(e, SampleEfficiency::Ratio(_))).count(),
                median_ratio: median(&ratios),
            });
        }
    }
    out
}

fn tier_label(t: Option<Difficulty>) -> &'static str {
    t.map_or("overall", Difficulty::as_str)
}

fn pm((m, s): (f64, f64), pct: bool) -> String {
    if pct {
        format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
    } else {
        format!("{m:.3e} ± {s:.1e}")
    }
}

pub fn render(aggs: &[AggregateRow], effs: &[EfficiencyRow]) -> String {
    let mut s = String::new();
    let mut last: Option<BenchmarkId> = None;
    for a in aggs {
        if last != Some(a.benchmark) {
            let (h2, h3) = if a.benchmark == BenchmarkId::Grn {
                ("edge F1 (%)", "sign acc (%)")
            } else {
                ("symbolic (%)", "median RMSLE")
            };
            let _ = writeln!(s, "\n== {} ==", a.benchmark);
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>6} {:<8} {:>5} {:>6} {:>16} {:>16} {:>20}",
                "method", "budget", "noise", "tier", "seeds", "failed", "exact (%)", h2, h3
            );
            last = Some(a.benchmark);
        }
        let graph = a.benchmark == BenchmarkId::Grn;
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>6} {:<8} {:>5} {:>6} {:>16} {:>16} {:>20}",
            a.method.as_str(),
            a.budget,
            a.noise_sigma,
            tier_label(a.tier),
            a.n_seeds,
            a.n_failed,
            pm(a.recovery, true),
            pm(a.secondary, true),
            pm(a.tertiary, graph),
        );
    }
    if !effs.is_empty() {
        let _ = writeln!(s, "\n== sample efficiency (budget to exact recovery, method / reference) ==");
        let _ = writeln!(
            s,
            "{:<16} {:<20} {:<12} {:>6} {:<8} {:>6} {:>8} {:>8} {:>12}",
            "benchmark", "method", "reference", "noise", "tier", "pairs", "reached", "ref", "median ratio"
        );
        for e in effs {
            let _ = writeln!(
                s,
                "{:<16} {:<20} {:<12} {:>6} {:<8} {:>6} {:>8} {:>8} {:>12.3}",
                e.benchmark.as_str(),
                e.method.as_str(),
                e.reference.as_str(),
                e.noise_sigma,
                tier_label(e.tier),
                e.pairs,
                e.method_reached,
                e.reference_reached,
                e.median_ratio,
            );
        }
    }
    s
}

fn write_tsv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `results.tsv` from `dir` and writes the report, curve and
/// efficiency files next to it.
pub fn report(dir: &Path) -> Result<String, HarnessError> {
    let rows = results::read_results(&dir.join(results::RESULTS_FILE))?;
    let aggs = aggregate(&rows)?;
    let effs = if rows.iter().any(|r| r.method == Method::Random) {
        efficiency(&rows, Method::Random)
    } else {
        Vec::new()
    };
    let text = render(&aggs, &effs);
    std::fs::write(dir.join(REPORT_FILE), &text)?;
    write_tsv(
        &dir.join(CURVES_FILE),
        &["benchmark", "method", "tier", "noise_sigma", "budget", "recovery_mean", "recovery_std", "secondary_mean"],
        aggs.iter().map(|a| {
            vec![
                a.benchmark.to_string(),
                a.method.to_string(),
                tier_label(a.tier).to_string(),
                a.noise_sigma.to_string(),
                a.budget.to_string(),
                a.recovery.0.to_string(),
                a.recovery.1.to_string(),
                a.secondary.0.to_string(),
            ]
        }),
    )?;
    write_tsv(
        &dir.join(EFFICIENCY_FILE),
        &["benchmark", "method", "reference", "noise_sigma", "tier", "pairs", "method_reached", "reference_reached", "median_ratio"],
        effs.iter().map(|e| {
            vec![
                e.benchmark.to_string(),
                e.method.to_string(),
                e.reference.to_string(),
                e.noise_sigma.to_string(),
                tier_label(e.tier).to_string(),
                e.pairs.to_string(),
                e.method_reached.to_string(),
                e.reference_reached.to_string(),
                e.median_ratio.to_string(),
            ]
        }),
    )?;
    Ok(text)
}
