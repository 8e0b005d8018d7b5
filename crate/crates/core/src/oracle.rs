//! Budgeted query interface shared by every benchmark domain.
//!
//! An oracle owns one hidden mechanism, a query budget, the ordered query log
//! and a seeded noise stream. The noise stream advances exactly once per
//! successful query, so replaying a logged input sequence against a freshly
//! opened oracle reproduces the logged observations bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chem::{self, ChemMechanism};
use crate::exprlang::{CompiledExpr, ExprError, ParsedHypothesis};
use crate::grn::{self, GrnMechanism};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("query budget exhausted")]
    BudgetExhausted,
    #[error("input out of bounds: {dimension} = {value} not in [{lo}, {hi}]")]
    InputOutOfBounds {
        dimension: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("unknown family `{0}`")]
    UnknownFamily(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("steady state not reached: residual {residual:e} after {steps} steps")]
    NonConvergence { residual: f64, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkId {
    Chem,
    Grn,
    EquationPlugin,
}

impl BenchmarkId {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkId::Chem => "chem",
            BenchmarkId::Grn => "grn",
            BenchmarkId::EquationPlugin => "equation-plugin",
        }
    }
}

impl FromStr for BenchmarkId {
    type Err = OracleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chem" => Ok(BenchmarkId::Chem),
            "grn" => Ok(BenchmarkId::Grn),
            "equation-plugin" => Ok(BenchmarkId::EquationPlugin),
            other => Err(OracleError::UnknownBenchmark(other.to_string())),
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty `{other}`")),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named, closed design interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl VariableSpec {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        VariableSpec {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn check(&self, value: f64) -> Result<(), OracleError> {
        if value >= self.lo && value <= self.hi {
            Ok(())
        } else {
            Err(OracleError::InputOutOfBounds {
                dimension: self.name.clone(),
                value,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

/// User-supplied closed-form law for the equation plugin benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    pub expression: String,
    pub constants: BTreeMap<String, f64>,
    pub variables: Vec<VariableSpec>,
    /// Candidate forms for the library proposer; a generic set is used when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub library: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub benchmark: BenchmarkId,
    pub task_id: String,
    pub family: String,
    pub difficulty: Difficulty,
    pub variant: u8,
    pub seed: u64,
    pub budget: usize,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin: Option<PluginSpec>,
}

impl TaskManifest {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.budget == 0 {
            return Err(OracleError::MalformedManifest("budget must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(OracleError::MalformedManifest(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        if self.task_id.is_empty() {
            return Err(OracleError::MalformedManifest("empty task_id".into()));
        }
        if self.benchmark == BenchmarkId::EquationPlugin && self.plugin.is_none() {
            return Err(OracleError::MalformedManifest(
                "equation-plugin task without a plugin section".into(),
            ));
        }
        Ok(())
    }

    /// Parses one manifest record, mapping an unrecognized benchmark id to
    /// [`OracleError::UnknownBenchmark`].
    pub fn from_json(line: &str) -> Result<TaskManifest, OracleError> {
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| OracleError::MalformedManifest(e.to_string()))?;
        if let Some(b) = value.get("benchmark").and_then(|b| b.as_str()) {
            b.parse::<BenchmarkId>()?;
        }
        serde_json::from_value(value).map_err(|e| OracleError::MalformedManifest(e.to_string()))
    }

    pub(crate) fn noise_label(&self) -> String {
        format!("noise/{}/{}", self.benchmark, self.task_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord<I, O> {
    pub index: usize,
    pub input: I,
    pub observation: O,
}

/// A hidden system that answers one query at a time.
pub trait Mechanism {
    type Input: Clone + fmt::Debug + Serialize;
    type Output: Clone + fmt::Debug + Serialize;

    /// Noiseless response; rejects out-of-domain inputs.
    fn respond(&self, input: &Self::Input) -> Result<Self::Output, OracleError>;

    /// Applies observation noise, drawing from `rng` a fixed number of times.
    fn add_noise(&self, out: Self::Output, sigma: f64, rng: &mut ChaCha8Rng) -> Self::Output;
}

/// `value · (1 + sigma·z)` with `z ~ N(0, 1)` drawn from `rng`.
pub fn apply_noise(value: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    if sigma == 0.0 {
        return value;
    }
    value * (1.0 + sigma * z)
}

#[derive(Debug, Clone)]
pub struct BudgetedOracle<M: Mechanism> {
    mechanism: M,
    budget: usize,
    noise_sigma: f64,
    log: Vec<QueryRecord<M::Input, M::Output>>,
    rng: ChaCha8Rng,
}

impl<M: Mechanism> BudgetedOracle<M> {
    pub fn new(mechanism: M, budget: usize, noise_sigma: f64, noise_seed: u64, label: &str) -> Self {
        BudgetedOracle {
            mechanism,
            budget,
            noise_sigma,
            log: Vec::new(),
            rng: seeding::rng_for(noise_seed, label),
        }
    }

    pub fn query(&mut self, input: &M::Input) -> Result<M::Output, OracleError> {
        if self.remaining() == 0 {
            return Err(OracleError::BudgetExhausted);
        }
        let clean = self.mechanism.respond(input)?;
        let observed = self.mechanism.add_noise(clean, self.noise_sigma, &mut self.rng);
        self.log.push(QueryRecord {
            index: self.log.len(),
            input: input.clone(),
            observation: observed.clone(),
        });
        Ok(observed)
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.log.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn query_log(&self) -> &[QueryRecord<M::Input, M::Output>] {
        &self.log
    }

    /// The hidden mechanism. For scoring and tests only; discovery code never
    /// calls this.
    pub fn hidden_mechanism(&self) -> &M {
        &self.mechanism
    }
}

/// Scalar-response view used by the equation discovery loop.
pub trait EquationTask {
    fn variables(&self) -> &[VariableSpec];
    fn query_point(&mut self, x: &[f64]) -> Result<f64, OracleError>;
    fn remaining(&self) -> usize;
    fn budget(&self) -> usize;
    /// Short natural-language description of the system for prompts.
    fn domain_description(&self) -> String;
}

/// Closed-form law hidden behind the budgeted interface.
#[derive(Debug, Clone)]
pub struct EquationPlugin {
    expression: ParsedHypothesis,
    compiled: CompiledExpr,
    constants: Vec<f64>,
    variables: Vec<VariableSpec>,
}

impl EquationPlugin {
    pub fn expression(&self) -> &ParsedHypothesis {
        &self.expression
    }

    pub fn constants(&self) -> BTreeMap<String, f64> {
        self.expression
            .free_constants
            .iter()
            .cloned()
            .zip(self.constants.iter().copied())
            .collect()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.compiled.eval(x, &self.constants)
    }
}

impl Mechanism for EquationPlugin {
    type Input = Vec<f64>;
    type Output = f64;

    fn respond(&self, input: &Vec<f64>) -> Result<f64, OracleError> {
        if input.len() != self.variables.len() {
            return Err(OracleError::MalformedManifest(format!(
                "expected {} inputs, got {}",
                self.variables.len(),
                input.len()
            )));
        }
        for (spec, v) in self.variables.iter().zip(input) {
            spec.check(*v)?;
        }
        Ok(self.value(input))
    }

    fn add_noise(&self, out: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
        apply_noise(out, sigma, rng)
    }
}

/// Builds oracles for a user-supplied law.
#[derive(Debug, Clone)]
pub struct PluginFactory {
    plugin: EquationPlugin,
}

impl PluginFactory {
    pub fn open(&self, budget: usize, noise_sigma: f64, seed: u64) -> BudgetedOracle<EquationPlugin> {
        BudgetedOracle::new(self.plugin.clone(), budget, noise_sigma, seed, "noise/equation-plugin")
    }
}

pub fn equation_plugin_oracle(
    expression: &ParsedHypothesis,
    hidden_constants: &BTreeMap<String, f64>,
    bounds: &[VariableSpec],
) -> Result<PluginFactory, OracleError> {
    let names: Vec<String> = bounds.iter().map(|b| b.name.clone()).collect();
    expression.bind_check(&names)?;
    let constants = expression
        .free_constants
        .iter()
        .map(|c| {
            hidden_constants
                .get(c)
                .copied()
                .ok_or_else(|| OracleError::Expr(ExprError::UnboundName(c.clone())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let compiled = expression.compile(&names)?;
    Ok(PluginFactory {
        plugin: EquationPlugin {
            expression: expression.clone(),
            compiled,
            constants,
            variables: bounds.to_vec(),
        },
    })
}

impl EquationTask for BudgetedOracle<EquationPlugin> {
    fn variables(&self) -> &[VariableSpec] {
        &self.hidden_mechanism().variables
    }

    fn query_point(&mut self, x: &[f64]) -> Result<f64, OracleError> {
        self.query(&x.to_vec())
    }

    fn remaining(&self) -> usize {
        BudgetedOracle::remaining(self)
    }

    fn budget(&self) -> usize {
        BudgetedOracle::budget(self)
    }

    fn domain_description(&self) -> String {
        let vars: Vec<String> = self
            .variables()
            .iter()
            .map(|v| format!("{} in [{}, {}]", v.name, v.lo, v.hi))
            .collect();
        format!(
            "Black-box scalar law of the inputs {}. Each query evaluates the hidden law once.",
            vars.join(", ")
        )
    }
}

/// An opened task of any registered benchmark.
#[derive(Debug, Clone)]
pub enum OpenedTask {
    Chem(BudgetedOracle<ChemMechanism>),
    Grn(BudgetedOracle<GrnMechanism>),
    Equation(BudgetedOracle<EquationPlugin>),
}

pub fn open_task(m: &TaskManifest) -> Result<OpenedTask, OracleError> {
    m.validate()?;
    let label = m.noise_label();
    Ok(match m.benchmark {
        BenchmarkId::Chem => {
            let spec = chem::instantiate(&m.family, m.difficulty, m.seed)?;
            OpenedTask::Chem(BudgetedOracle::new(
                ChemMechanism::new(spec),
                m.budget,
                m.noise_sigma,
                m.seed,
                &label,
            ))
        }
        BenchmarkId::Grn => {
            let (graph, dynamics) = grn::instantiate(&m.family, m.variant, m.difficulty, m.seed)?;
            OpenedTask::Grn(BudgetedOracle::new(
                GrnMechanism::new(graph, dynamics)?,
                m.budget,
                m.noise_sigma,
                m.seed,
                &label,
            ))
        }
        BenchmarkId::EquationPlugin => {
            let plugin = m.plugin.as_ref().expect("validated");
            let expr = ParsedHypothesis::parse(&plugin.expression)?;
            let factory = equation_plugin_oracle(&expr, &plugin.constants, &plugin.variables)?;
            OpenedTask::Equation(BudgetedOracle::new(
                factory.plugin,
                m.budget,
                m.noise_sigma,
                m.seed,
                &label,
            ))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plugin_manifest(budget: usize, noise: f64) -> TaskManifest {
        TaskManifest {
            benchmark: BenchmarkId::EquationPlugin,
            task_id: "mm-plugin".into(),
            family: "plugin".into(),
            difficulty: Difficulty::Easy,
            variant: 0,
            seed: 11,
            budget,
            noise_sigma: noise,
            plugin: Some(PluginSpec {
                expression: "C0*x/(C1+x)".into(),
                constants: [("C0".to_string(), 2.0), ("C1".to_string(), 1.0)].into(),
                variables: vec![VariableSpec::new("x", 0.0, 10.0)],
                library: vec![],
            }),
        }
    }

    fn open_plugin(m: &TaskManifest) -> BudgetedOracle<EquationPlugin> {
        match open_task(m).unwrap() {
            OpenedTask::Equation(o) => o,
            _ => unreachable!(),
        }
    }

    #[test]
    fn plugin_hand_value_and_bounds() {
        let mut o = open_plugin(&plugin_manifest(5, 0.0));
        assert_eq!(o.query_point(&[1.0]).unwrap(), 1.0);
        assert!(matches!(
            o.query_point(&[11.0]),
            Err(OracleError::InputOutOfBounds { ref dimension, .. }) if dimension == "x"
        ));
        // rejected queries do not consume budget
        assert_eq!(o.remaining(), 4);
    }

    #[test]
    fn budget_accounting() {
        let mut o = open_plugin(&plugin_manifest(2, 0.0));
        o.query_point(&[1.0]).unwrap();
        o.query_point(&[2.0]).unwrap();
        assert_eq!(o.query_point(&[3.0]), Err(OracleError::BudgetExhausted));
        assert_eq!(o.query_log().len() + o.remaining(), o.budget());
        let idx: Vec<usize> = o.query_log().iter().map(|r| r.index).collect();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn zero_budget_is_malformed() {
        let m = plugin_manifest(0, 0.0);
        assert!(matches!(open_task(&m), Err(OracleError::MalformedManifest(_))));
    }

    #[test]
    fn unknown_benchmark_in_manifest_line() {
        let m = plugin_manifest(3, 0.0);
        let line = serde_json::to_string(&m).unwrap().replace("equation-plugin", "newton");
        assert_eq!(
            TaskManifest::from_json(&line),
            Err(OracleError::UnknownBenchmark("newton".into()))
        );
    }

    #[test]
    fn zero_noise_repeats_exactly() {
        let mut o = open_plugin(&plugin_manifest(4, 0.0));
        let a = o.query_point(&[3.0]).unwrap();
        let b = o.query_point(&[3.0]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn noisy_query_matches_seeded_stream() {
        let m = plugin_manifest(3, 0.1);
        let mut o = open_plugin(&m);
        let mut stream = seeding::rng_for(m.seed, &m.noise_label());
        for x in [1.0, 4.0, 9.0] {
            let clean = 2.0 * x / (1.0 + x);
            let z: f64 = StandardNormal.sample(&mut stream);
            let expected = clean * (1.0 + 0.1 * z);
            assert_eq!(o.query_point(&[x]).unwrap(), expected);
        }
    }

    #[test]
    fn replay_reproduces_log() {
        let m = plugin_manifest(6, 0.2);
        let mut a = open_plugin(&m);
        for x in [0.5, 1.5, 1.5, 7.0, 2.0] {
            a.query_point(&[x]).unwrap();
        }
        let mut b = open_plugin(&m);
        for rec in a.query_log() {
            let y = b.query(&rec.input).unwrap();
            assert_eq!(y.to_bits(), rec.observation.to_bits());
        }
    }

    #[test]
    fn apply_noise_edge_cases() {
        let mut rng = seeding::rng_for(3, "t");
        assert_eq!(apply_noise(5.0, 0.0, &mut rng), 5.0);
        assert_eq!(apply_noise(0.0, 0.3, &mut rng), 0.0);
    }

    #[test]
    fn noise_empirical_std() {
        let mut rng = seeding::rng_for(99, "mc");
        let draws: Vec<f64> = (0..10_000).map(|_| apply_noise(1.0, 0.1, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn plugin_factory_requires_bound_constants() {
        let e = ParsedHypothesis::parse("C0*x/(C1+x)").unwrap();
        let consts: BTreeMap<String, f64> = [("C0".to_string(), 2.0)].into();
        let err = equation_plugin_oracle(&e, &consts, &[VariableSpec::new("x", 0.0, 1.0)]).unwrap_err();
        assert_eq!(err, OracleError::Expr(ExprError::UnboundName("C1".into())));
        let err = equation_plugin_oracle(&e, &consts, &[VariableSpec::new("y", 0.0, 1.0)]).unwrap_err();
        assert_eq!(err, OracleError::Expr(ExprError::UnboundName("x".into())));
    }

    #[test]
    fn identical_factories_give_identical_streams() {
        let e = ParsedHypothesis::parse("C0*x/(C1+x)").unwrap();
        let consts: BTreeMap<String, f64> = [("C0".to_string(), 2.0), ("C1".to_string(), 1.0)].into();
        let bounds = [VariableSpec::new("x", 0.0, 10.0)];
        let f1 = equation_plugin_oracle(&e, &consts, &bounds).unwrap();
        let f2 = equation_plugin_oracle(&e, &consts, &bounds).unwrap();
        let (mut a, mut b) = (f1.open(5, 0.1, 4), f2.open(5, 0.1, 4));
        for x in [1.0, 2.0, 3.0] {
            assert_eq!(a.query_point(&[x]).unwrap().to_bits(), b.query_point(&[x]).unwrap().to_bits());
        }
    }
}
