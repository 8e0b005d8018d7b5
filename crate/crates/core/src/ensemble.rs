//! Adaptive hypothesis ensembles: batched sampling, validity filtering,
//! structural clustering and an entropy-change stopping rule.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exprlang::ParsedHypothesis;
use crate::fitkit::{fit_constants, Dataset, FitOptions, FitResult};
use crate::grn::{Node, SignedGraph};
use crate::oracle::VariableSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    SmallModel,
    LargeModel,
    Library,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedForm {
    Equation(ParsedHypothesis),
    Graph(SignedGraph),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisRecord {
    pub text: String,
    pub parsed: Option<ParsedForm>,
    pub origin: Origin,
    pub valid: bool,
    /// Skeleton (equations) or canonical signed-edge string (graphs); empty
    /// when the text did not parse.
    pub key: String,
    pub rejection: Option<String>,
}

impl HypothesisRecord {
    /// Parses `text` as an expression. Parse failures produce an invalid record.
    pub fn equation(text: &str, origin: Origin) -> HypothesisRecord {
        match ParsedHypothesis::parse(text) {
            Ok(h) => HypothesisRecord {
                text: text.to_string(),
                key: h.skeleton().as_str().to_string(),
                parsed: Some(ParsedForm::Equation(h)),
                origin,
                valid: true,
                rejection: None,
            },
            Err(e) => HypothesisRecord::invalid(text, origin, e.to_string()),
        }
    }

    pub fn graph(text: &str, graph: SignedGraph, origin: Origin) -> HypothesisRecord {
        HypothesisRecord {
            text: text.to_string(),
            key: graph.canonical_key(),
            parsed: Some(ParsedForm::Graph(graph)),
            origin,
            valid: true,
            rejection: None,
        }
    }

    pub fn invalid(text: &str, origin: Origin, reason: String) -> HypothesisRecord {
        HypothesisRecord {
            text: text.to_string(),
            parsed: None,
            origin,
            valid: false,
            key: String::new(),
            rejection: Some(reason),
        }
    }

    pub fn reject(mut self, reason: impl Into<String>) -> HypothesisRecord {
        self.valid = false;
        self.rejection = Some(reason.into());
        self
    }

    pub fn as_equation(&self) -> Option<&ParsedHypothesis> {
        match &self.parsed {
            Some(ParsedForm::Equation(h)) => Some(h),
            _ => None,
        }
    }

    pub fn as_graph(&self) -> Option<&SignedGraph> {
        match &self.parsed {
            Some(ParsedForm::Graph(g)) => Some(g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError<E> {
    #[error("entropy of an empty distribution")]
    EmptyDistribution,
    #[error("no valid hypotheses after {0} samples")]
    EmptyEnsemble(usize),
    #[error("proposer failure: {0}")]
    ProposerFailure(E),
}

/// Shannon entropy in bits of the distribution proportional to `sizes`.
pub fn shannon_entropy(sizes: &[usize]) -> Result<f64, EnsembleError<std::convert::Infallible>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(EnsembleError::EmptyDistribution);
    }
    let n = total as f64;
    let h = sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisDistribution {
    pub records: Vec<HypothesisRecord>,
    pub clusters: BTreeMap<String, Vec<usize>>,
    pub cluster_sizes: Vec<usize>,
    pub entropy: f64,
    pub agreement: f64,
    /// Index of one record per cluster, in cluster-key order.
    pub representatives: Vec<usize>,
    /// Number of records drawn from the sampler.
    pub drawn: usize,
}

impl HypothesisDistribution {
    pub fn from_records(mut records: Vec<HypothesisRecord>) -> HypothesisDistribution {
        records.sort_by(|a, b| (!a.valid, &a.key, &a.text).cmp(&(!b.valid, &b.key, &b.text)));
        let mut clusters: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.valid {
                clusters.entry(r.key.clone()).or_default().push(i);
            }
        }
        let cluster_sizes: Vec<usize> = clusters.values().map(|v| v.len()).collect();
        let total: usize = cluster_sizes.iter().sum();
        let entropy = shannon_entropy(&cluster_sizes).unwrap_or(0.0);
        let agreement = if total == 0 {
            0.0
        } else {
            *cluster_sizes.iter().max().expect("non-empty") as f64 / total as f64
        };
        // records are sorted by (key, text), so the first member has the
        // lexicographically smallest text
        let representatives = clusters.values().map(|m| m[0]).collect();
        let drawn = records.len();
        HypothesisDistribution {
            records,
            clusters,
            cluster_sizes,
            entropy,
            agreement,
            representatives,
            drawn,
        }
    }

    pub fn n_valid(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn representative_records(&self) -> impl Iterator<Item = &HypothesisRecord> {
        self.representatives.iter().map(|&i| &self.records[i])
    }

    /// Plain-text summary: counts, unique structures and one representative
    /// per cluster, largest clusters first.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "samples: {} (valid {}), unique structures: {}, entropy: {:.3} bits, agreement: {:.2}",
            self.drawn,
            self.n_valid(),
            self.clusters.len(),
            self.entropy,
            self.agreement
        );
        let mut order: Vec<(usize, usize)> = self
            .representatives
            .iter()
            .zip(&self.cluster_sizes)
            .map(|(&r, &n)| (n, r))
            .collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (n, r) in order {
            let _ = writeln!(s, "- [{n}] {}", self.records[r].text);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowConfig {
    pub k: usize,
    pub k_max: usize,
    pub tau_h: f64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        GrowConfig {
            k: 5,
            k_max: 20,
            tau_h: 0.1,
        }
    }
}

/// Batched sampling until the entropy of the accumulated cluster
/// distribution changes by less than `tau_h` between batches, or `k_max`
/// records have been drawn. `sample(b)` returns `b` records; `filter` marks
/// validity.
pub fn grow<E>(
    mut sample: impl FnMut(usize) -> Result<Vec<HypothesisRecord>, E>,
    mut filter: impl FnMut(Vec<HypothesisRecord>) -> Vec<HypothesisRecord>,
    cfg: &GrowConfig,
) -> Result<HypothesisDistribution, EnsembleError<E>> {
    let mut records: Vec<HypothesisRecord> = Vec::new();
    let mut h_prev: Option<f64> = None;
    while records.len() < cfg.k_max {
        let b = cfg.k.min(cfg.k_max - records.len());
        let batch = sample(b).map_err(EnsembleError::ProposerFailure)?;
        if batch.is_empty() {
            break;
        }
        records.extend(filter(batch));
        let n_valid = records.iter().filter(|r| r.valid).count();
        if n_valid < cfg.k {
            continue;
        }
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records.iter().filter(|r| r.valid) {
            *sizes.entry(r.key.as_str()).or_default() += 1;
        }
        let h = shannon_entropy(&sizes.values().copied().collect::<Vec<_>>()).unwrap_or(0.0);
        if h_prev.is_some_and(|p| (h - p).abs() < cfg.tau_h) {
            break;
        }
        h_prev = Some(h);
    }
    let dist = HypothesisDistribution::from_records(records);
    if dist.n_valid() == 0 {
        return Err(EnsembleError::EmptyEnsemble(dist.drawn));
    }
    Ok(dist)
}

/// Fraction of finite predictions above which a hypothesis counts as executable.
const MIN_FINITE_FRACTION: f64 = 0.5;

/// Checks one equation record against the observed data: it must bind to the
/// task variables and, after a quick two-start constant fit, predict finite
/// values on more than half the observed inputs. With no data the check runs
/// at the centre of the design box with every constant set to 1.
pub fn validate_equation(
    rec: HypothesisRecord,
    data: &Dataset,
    bounds: &[VariableSpec],
    seed: u64,
    hint: Option<Vec<f64>>,
) -> (HypothesisRecord, Option<FitResult>) {
    let Some(h) = rec.as_equation().cloned() else {
        return (rec, None);
    };
    let names: Vec<String> = bounds.iter().map(|b| b.name.clone()).collect();
    if let Err(e) = h.bind_check(&names) {
        return (rec.reject(e.to_string()), None);
    }
    let compiled = match h.compile(&names) {
        Ok(c) => c,
        Err(e) => return (rec.reject(e.to_string()), None),
    };
    let nc = h.free_constants.len();
    if data.len() <= nc || data.is_empty() {
        let ones = vec![1.0; nc];
        let inputs: Vec<Vec<f64>> = if data.is_empty() {
            vec![bounds.iter().map(|b| 0.5 * (b.lo + b.hi)).collect()]
        } else {
            data.x.clone()
        };
        let finite = inputs.iter().filter(|x| compiled.eval(x, &ones).is_finite()).count();
        if finite as f64 > MIN_FINITE_FRACTION * inputs.len() as f64 {
            return (rec, None);
        }
        return (rec.reject("predominantly non-finite predictions"), None);
    }
    let opts = FitOptions {
        n_starts: 2,
        max_iter: 60,
        seed,
        hints: hint.into_iter().collect(),
        split: None,
    };
    match fit_constants(&h, data, &opts) {
        Ok(fit) => {
            let finite = data
                .x
                .iter()
                .filter(|x| compiled.eval(x, &fit.constant_values).is_finite())
                .count();
            if finite as f64 > MIN_FINITE_FRACTION * data.len() as f64 {
                (rec, Some(fit))
            } else {
                (rec.reject("predominantly non-finite predictions"), None)
            }
        }
        Err(e) => (rec.reject(e.to_string()), None),
    }
}

/// Records that survive [`validate_equation`].
pub fn filter_valid(batch: Vec<HypothesisRecord>, data: &Dataset, bounds: &[VariableSpec], seed: u64) -> Vec<HypothesisRecord> {
    batch
        .into_iter()
        .map(|r| validate_equation(r, data, bounds, seed, None).0)
        .filter(|r| r.valid)
        .collect()
}

/// Graph records must be admissible and route the signal to the readout node.
pub fn validate_graph(rec: HypothesisRecord) -> HypothesisRecord {
    match rec.as_graph() {
        Some(g) if g.has_path(Node::Signal, Node::FINAL) => rec,
        Some(_) => rec.reject(format!("no directed path from signal to {}", Node::FINAL)),
        None => rec,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_hand_values() {
        assert_eq!(shannon_entropy(&[5]).unwrap(), 0.0);
        assert!((shannon_entropy(&[3, 2]).unwrap() - 0.9709505944546686).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[1, 1, 1, 1]).unwrap(), 2.0);
        assert!(shannon_entropy(&[]).is_err());
    }

    fn same(_: usize) -> HypothesisRecord {
        HypothesisRecord::equation("C0*x/(C1+x)", Origin::Library)
    }

    #[test]
    fn identical_skeletons_stop_after_second_batch() {
        let mut calls = 0;
        let d = grow::<()>(
            |b| {
                calls += 1;
                Ok((0..b).map(same).collect())
            },
            |v| v,
            &GrowConfig::default(),
        )
        .unwrap();
        assert_eq!(d.drawn, 10);
        assert_eq!(calls, 2);
        assert_eq!(d.entropy, 0.0);
        assert_eq!(d.agreement, 1.0);
    }

    #[test]
    fn unique_skeletons_run_to_cap() {
        let mut n = 0;
        let d = grow::<()>(
            |b| {
                Ok((0..b)
                    .map(|_| {
                        n += 1;
                        let body = vec!["x"; n].join("*");
                        HypothesisRecord::equation(&format!("C0*{body}"), Origin::Library)
                    })
                    .collect())
            },
            |v| v,
            &GrowConfig::default(),
        )
        .unwrap();
        assert_eq!(d.drawn, 20);
        assert!((d.entropy - 20f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn invalid_first_batch_keeps_sampling() {
        let mut calls = 0;
        let d = grow::<()>(
            |b| {
                calls += 1;
                Ok((0..b)
                    .map(|_| {
                        if calls == 1 {
                            HypothesisRecord::equation("pow(x, 2)", Origin::Library)
                        } else {
                            same(0)
                        }
                    })
                    .collect())
            },
            |v| v,
            &GrowConfig::default(),
        )
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(d.n_valid(), 10);
        assert_eq!(d.drawn, 15);
    }

    #[test]
    fn all_invalid_is_empty_ensemble() {
        let r = grow::<()>(
            |b| Ok((0..b).map(|_| HypothesisRecord::equation("((", Origin::Library)).collect()),
            |v| v,
            &GrowConfig::default(),
        );
        assert_eq!(r.unwrap_err(), EnsembleError::EmptyEnsemble(20));
    }

    fn ca_data() -> Dataset {
        let mut d = Dataset::new(vec!["C_A".into()]);
        for i in 0..10 {
            d.push(vec![i as f64], 1.0 + i as f64);
        }
        d
    }

    #[test]
    fn filter_examples() {
        let bounds = [VariableSpec::new("C_A", 0.0, 10.0)];
        let batch: Vec<HypothesisRecord> = ["C0*C_A", "C0 + C_A", "((", "C0*C_A/(C1+C_A)", "C0"]
            .iter()
            .map(|t| HypothesisRecord::equation(t, Origin::Library))
            .collect();
        assert_eq!(filter_valid(batch, &ca_data(), &bounds, 1).len(), 4);
        let kept = filter_valid(vec![HypothesisRecord::equation("log(C_A)", Origin::Library)], &ca_data(), &bounds, 1);
        assert_eq!(kept.len(), 1);
        let kept = filter_valid(vec![HypothesisRecord::equation("1/(C_A - C_A)", Origin::Library)], &ca_data(), &bounds, 1);
        assert!(kept.is_empty());
        let kept = filter_valid(vec![HypothesisRecord::equation("C0*S", Origin::Library)], &ca_data(), &bounds, 1);
        assert!(kept.is_empty());
    }
}
