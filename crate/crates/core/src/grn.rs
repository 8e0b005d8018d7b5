//! Gene-regulatory-network simulator: signed graphs over five fixed nodes with
//! multiplicative Hill-gate dynamics, observed at steady state after an
//! intervention.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix4, Vector4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::oracle::{apply_noise, BudgetedOracle, Difficulty, Mechanism, OracleError};
use crate::seeding;

pub const CATALOG_VERSION: u32 = 1;

/// Integration step for steady-state search.
pub const RK4_STEP: f64 = 0.05;
pub const MAX_STEPS: usize = 1_000_000;
pub const STEADY_TOL: f64 = 1e-8;
pub const RESIDUAL_LIMIT: f64 = 1e-6;

pub const DEFAULT_KNOCK_UP: f64 = 5.0;
pub const DEFAULT_KNOCK_DOWN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    #[serde(rename = "signal")]
    Signal,
    A,
    B,
    C,
    R,
}

impl Node {
    pub const ALL: [Node; 5] = [Node::Signal, Node::A, Node::B, Node::C, Node::R];
    /// Observed nodes, in the order used by [`GrnObservation::expression`].
    pub const GENES: [Node; 4] = [Node::A, Node::B, Node::C, Node::R];
    /// Readout node that every hypothesis must connect to the signal.
    pub const FINAL: Node = Node::C;

    pub fn name(self) -> &'static str {
        match self {
            Node::Signal => "signal",
            Node::A => "A",
            Node::B => "B",
            Node::C => "C",
            Node::R => "R",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position among the observed nodes; `None` for the signal.
    pub fn gene_index(self) -> Option<usize> {
        match self {
            Node::Signal => None,
            n => Some(n as usize - 1),
        }
    }
}

impl FromStr for Node {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "signal" | "s" | "S" => Ok(Node::Signal),
            "A" => Ok(Node::A),
            "B" => Ok(Node::B),
            "C" => Ok(Node::C),
            "R" => Ok(Node::R),
            other => Err(format!("unknown node `{other}`")),
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: Node,
    pub dst: Node,
    pub sign: i8,
}

impl Edge {
    pub fn new(src: Node, dst: Node, sign: i8) -> Edge {
        Edge { src, dst, sign }
    }

    pub fn is_admissible(&self) -> bool {
        self.src != self.dst && self.dst != Node::Signal && (self.sign == 1 || self.sign == -1)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.src, self.dst, if self.sign > 0 { "+" } else { "-" })
    }
}

/// All `(src, dst)` pairs an edge may occupy.
pub fn admissible_pairs() -> Vec<(Node, Node)> {
    let mut out = Vec::new();
    for src in Node::ALL {
        for dst in Node::GENES {
            if src != dst {
                out.push((src, dst));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct SignedGraph {
    edges: BTreeMap<(Node, Node), i8>,
}

impl SignedGraph {
    pub fn empty() -> SignedGraph {
        SignedGraph::default()
    }

    pub fn from_edges(edges: &[Edge]) -> Result<SignedGraph, String> {
        let mut g = SignedGraph::empty();
        for e in edges {
            g.insert(*e)?;
        }
        Ok(g)
    }

    pub fn insert(&mut self, e: Edge) -> Result<(), String> {
        if !e.is_admissible() {
            return Err(format!("inadmissible edge `{e}`"));
        }
        match self.edges.get(&(e.src, e.dst)) {
            Some(s) if *s != e.sign => Err(format!("conflicting signs for {} -> {}", e.src, e.dst)),
            _ => {
                self.edges.insert((e.src, e.dst), e.sign);
                Ok(())
            }
        }
    }

    /// Edges in canonical `(src, dst)` order.
    pub fn edges(&self) -> Vec<Edge> {
        self.edges.iter().map(|(&(s, d), &sign)| Edge::new(s, d, sign)).collect()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn sign(&self, src: Node, dst: Node) -> Option<i8> {
        self.edges.get(&(src, dst)).copied()
    }

    /// Canonical text key: sorted `src dst sign` triples joined by `;`.
    pub fn canonical_key(&self) -> String {
        self.edges().iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";")
    }

    pub fn has_path(&self, from: Node, to: Node) -> bool {
        let mut seen = [false; 5];
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if std::mem::replace(&mut seen[n.index()], true) {
                continue;
            }
            for (&(s, d), _) in &self.edges {
                if s == n && !seen[d.index()] {
                    stack.push(d);
                }
            }
        }
        false
    }
}

impl fmt::Display for SignedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_key())
    }
}

impl TryFrom<Vec<String>> for SignedGraph {
    type Error = String;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        let mut g = SignedGraph::empty();
        for t in v {
            let parts: Vec<&str> = t.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(format!("malformed edge `{t}`"));
            }
            let sign = match parts[2] {
                "+" | "+1" | "1" => 1,
                "-" | "-1" => -1,
                other => return Err(format!("malformed sign `{other}`")),
            };
            g.insert(Edge::new(parts[0].parse()?, parts[1].parse()?, sign))?;
        }
        Ok(g)
    }
}

impl From<SignedGraph> for Vec<String> {
    fn from(g: SignedGraph) -> Vec<String> {
        g.edges().iter().map(|e| e.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeKinetics {
    pub src: Node,
    pub dst: Node,
    pub threshold: f64,
    pub hill: f64,
}

/// Per-gene rates indexed like [`Node::GENES`], per-edge kinetics in
/// canonical edge order, and the baseline signal level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrnDynamics {
    pub basal: [f64; 4],
    pub degradation: [f64; 4],
    pub max_production: [f64; 4],
    pub edges: Vec<EdgeKinetics>,
    pub signal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "factor")]
pub enum Action {
    KnockUp(f64),
    KnockDown(f64),
    SetSignal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeAction {
    pub node: Node,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Intervention {
    pub actions: Vec<NodeAction>,
}

impl Intervention {
    pub const MAX_ACTIONS: usize = 2;

    pub fn none() -> Intervention {
        Intervention::default()
    }

    pub fn single(node: Node, action: Action) -> Intervention {
        Intervention {
            actions: vec![NodeAction { node, action }],
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: String| Err(OracleError::InvalidIntervention(m));
        if self.actions.len() > Self::MAX_ACTIONS {
            return bad(format!("{} actions; at most {} allowed", self.actions.len(), Self::MAX_ACTIONS));
        }
        for (i, a) in self.actions.iter().enumerate() {
            if self.actions[..i].iter().any(|b| b.node == a.node) {
                return bad(format!("node {} targeted twice", a.node));
            }
            match a.action {
                Action::KnockUp(f) if !(f > 1.0 && f.is_finite()) => {
                    return bad(format!("knock_up factor {f} must exceed 1"))
                }
                Action::KnockDown(f) if !(0.0..1.0).contains(&f) => {
                    return bad(format!("knock_down factor {f} must lie in [0, 1)"))
                }
                Action::SetSignal(l) if !(l >= 0.0 && l.is_finite()) => {
                    return bad(format!("signal level {l} must be non-negative"))
                }
                Action::SetSignal(_) if a.node != Node::Signal => {
                    return bad(format!("set_signal applied to {}", a.node))
                }
                Action::KnockUp(_) | Action::KnockDown(_) if a.node == Node::Signal => {
                    return bad("knock actions apply to genes, not the signal".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Canonical form: actions sorted by node.
    pub fn canonical(&self) -> Intervention {
        let mut actions = self.actions.clone();
        actions.sort_by_key(|a| a.node);
        Intervention { actions }
    }

    pub fn describe(&self) -> String {
        if self.actions.is_empty() {
            return "none".into();
        }
        self.actions
            .iter()
            .map(|a| match a.action {
                Action::KnockUp(f) => format!("knock_up({}, {})", a.node, f),
                Action::KnockDown(f) => format!("knock_down({}, {})", a.node, f),
                Action::SetSignal(l) => format!("set_signal({})", l),
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

/// The finite experiment menu: no action, every single action with default
/// factors (plus signal levels 0.1 and 10), and every pair on distinct nodes.
pub fn admissible_interventions() -> Vec<Intervention> {
    let mut singles: Vec<NodeAction> = Vec::new();
    for g in Node::GENES {
        singles.push(NodeAction { node: g, action: Action::KnockUp(DEFAULT_KNOCK_UP) });
        singles.push(NodeAction { node: g, action: Action::KnockDown(DEFAULT_KNOCK_DOWN) });
    }
    singles.push(NodeAction { node: Node::Signal, action: Action::SetSignal(0.1) });
    singles.push(NodeAction { node: Node::Signal, action: Action::SetSignal(10.0) });
    let mut out = vec![Intervention::none()];
    out.extend(singles.iter().map(|a| Intervention { actions: vec![*a] }));
    for i in 0..singles.len() {
        for j in i + 1..singles.len() {
            if singles[i].node != singles[j].node {
                out.push(Intervention {
                    actions: vec![singles[i], singles[j]],
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrnObservation {
    /// Steady-state levels of A, B, C, R.
    pub expression: [f64; 4],
}

impl GrnObservation {
    pub fn level(&self, n: Node) -> Option<f64> {
        n.gene_index().map(|i| self.expression[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifDescriptor {
    pub family: String,
    pub variant: u8,
    pub difficulty: Difficulty,
    pub graph: SignedGraph,
}

pub const MOTIF_FAMILIES: [&str; 5] = [
    "activation_chain",
    "coherent_ffl",
    "incoherent_ffl",
    "negative_feedback",
    "toggle_switch",
];

/// Catalog topology for a family variant (1-based).
pub fn motif_graph(family: &str, variant: u8) -> Option<SignedGraph> {
    use Node::*;
    let e = |s, d, sign| Edge::new(s, d, sign);
    let edges: Vec<Edge> = match (family, variant) {
        ("activation_chain", 1) => vec![e(Signal, A, 1), e(A, B, 1), e(B, C, 1)],
        ("activation_chain", 2) => vec![e(Signal, A, 1), e(A, C, 1)],
        ("activation_chain", 3) => vec![e(Signal, B, 1), e(B, A, 1), e(A, C, 1)],
        ("coherent_ffl", 1) => vec![e(Signal, A, 1), e(A, B, 1), e(B, C, 1), e(A, C, 1)],
        ("coherent_ffl", 2) => vec![e(Signal, A, 1), e(A, C, 1), e(Signal, C, 1)],
        ("coherent_ffl", 3) => vec![e(Signal, A, 1), e(A, R, 1), e(R, C, 1), e(A, C, 1)],
        ("incoherent_ffl", 1) => vec![e(Signal, A, 1), e(A, B, 1), e(A, C, 1), e(B, C, -1)],
        ("incoherent_ffl", 2) => vec![e(Signal, A, 1), e(A, B, -1), e(B, C, 1), e(A, C, 1)],
        ("incoherent_ffl", 3) => vec![e(Signal, A, 1), e(A, R, 1), e(R, C, -1), e(A, C, 1)],
        ("negative_feedback", 1) => vec![e(Signal, A, 1), e(A, C, 1), e(C, B, 1), e(B, A, -1)],
        ("negative_feedback", 2) => vec![e(Signal, A, 1), e(A, B, 1), e(B, C, 1), e(C, A, -1)],
        ("negative_feedback", 3) => vec![e(Signal, A, 1), e(A, C, 1), e(C, R, 1), e(R, A, -1)],
        ("toggle_switch", 1) => vec![e(Signal, A, 1), e(A, B, -1), e(B, A, -1), e(A, C, 1)],
        ("toggle_switch", 2) => vec![e(Signal, A, 1), e(A, B, -1), e(B, A, -1), e(B, C, -1)],
        ("toggle_switch", 3) => vec![e(Signal, B, -1), e(A, B, -1), e(B, A, -1), e(A, C, 1)],
        _ => return None,
    };
    Some(SignedGraph::from_edges(&edges).expect("catalog graphs are admissible"))
}

pub fn motif_catalog() -> Vec<MotifDescriptor> {
    let mut out = Vec::with_capacity(45);
    for family in MOTIF_FAMILIES {
        for difficulty in Difficulty::ALL {
            for variant in 1..=3u8 {
                out.push(MotifDescriptor {
                    family: family.to_string(),
                    variant,
                    difficulty,
                    graph: motif_graph(family, variant).expect("catalog entry"),
                });
            }
        }
    }
    out
}

pub fn catalog_document() -> serde_json::Value {
    let graphs: Vec<serde_json::Value> = MOTIF_FAMILIES
        .iter()
        .flat_map(|f| {
            (1..=3u8).map(move |v| {
                serde_json::json!({ "family": f, "variant": v, "graph": motif_graph(f, v) })
            })
        })
        .collect();
    serde_json::json!({
        "version": CATALOG_VERSION,
        "benchmark": "grn",
        "difficulties": {
            "easy": {"hill": [1.0, 1.5]},
            "medium": {"hill": [1.5, 3.0]},
            "hard": {"hill": [3.0, 6.0]},
        },
        "ranges": {
            "basal": [0.05, 0.2],
            "max_production": [1.0, 5.0],
            "degradation": [0.3, 1.0],
            "threshold": [0.5, 3.0],
            "signal": [2.0, 5.0],
        },
        "max_redraws": MAX_REDRAWS,
        "graphs": graphs,
    })
}

pub fn hill_range(d: Difficulty) -> (f64, f64) {
    match d {
        Difficulty::Easy => (1.0, 1.5),
        Difficulty::Medium => (1.5, 3.0),
        Difficulty::Hard => (3.0, 6.0),
    }
}

/// Redraws allowed when a sampled instance has no steady state somewhere on
/// the experiment menu.
pub const MAX_REDRAWS: u32 = 64;

/// Draws the hidden dynamics of a catalog graph. Strong feedback loops can
/// oscillate instead of settling; such draws are rejected and redrawn from a
/// derived stream until the baseline and every admissible intervention reach
/// a steady state.
pub fn instantiate(
    family: &str,
    variant: u8,
    difficulty: Difficulty,
    seed: u64,
) -> Result<(SignedGraph, GrnDynamics), OracleError> {
    let graph = motif_graph(family, variant)
        .ok_or_else(|| OracleError::UnknownFamily(format!("{family} v{variant}")))?;
    let label = format!("grn/{family}/{variant}/{difficulty}");
    let mut last = None;
    for attempt in 0..=MAX_REDRAWS {
        let mut rng = if attempt == 0 {
            seeding::rng_for(seed, &label)
        } else {
            seeding::rng_for(seed, &format!("{label}/redraw{attempt}"))
        };
        let dynamics = draw_dynamics(&graph, difficulty, &mut rng);
        match settles(&graph, &dynamics) {
            Ok(()) => return Ok((graph, dynamics)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one draw"))
}

fn draw_dynamics(graph: &SignedGraph, difficulty: Difficulty, rng: &mut ChaCha8Rng) -> GrnDynamics {
    let mut draw4 = |lo, hi| {
        let mut a = [0.0; 4];
        for v in a.iter_mut() {
            *v = seeding::log_uniform(rng, lo, hi);
        }
        a
    };
    let basal = draw4(0.05, 0.2);
    let max_production = draw4(1.0, 5.0);
    let degradation = draw4(0.3, 1.0);
    let (nlo, nhi) = hill_range(difficulty);
    let edges = graph
        .edges()
        .iter()
        .map(|e| EdgeKinetics {
            src: e.src,
            dst: e.dst,
            threshold: seeding::log_uniform(rng, 0.5, 3.0),
            hill: seeding::log_uniform(rng, nlo, nhi),
        })
        .collect();
    let signal = seeding::log_uniform(rng, 2.0, 5.0);
    GrnDynamics {
        basal,
        degradation,
        max_production,
        edges,
        signal,
    }
}

/// Step cap for the redraw check. The oracle integrates the same
/// trajectories with a larger cap, so an accepted draw always settles there.
const SETTLE_STEPS: usize = 100_000;

fn settles(graph: &SignedGraph, dynamics: &GrnDynamics) -> Result<(), OracleError> {
    let model = GrnModel::new(graph, dynamics)?;
    let base = model.baseline_within(SETTLE_STEPS)?;
    for iv in admissible_interventions().iter().filter(|iv| !iv.actions.is_empty()) {
        model.steady_within(&model.conditions(iv), base, SETTLE_STEPS)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelEdge {
    /// Source node index (0 = signal).
    pub src: usize,
    /// Target gene index.
    pub dst: usize,
    pub sign: i8,
    pub threshold: f64,
    pub hill: f64,
}

/// Experimental conditions derived from an intervention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    pub signal: f64,
    pub gain: [f64; 4],
}

/// Flat numeric form of a graph plus dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct GrnModel {
    pub basal: [f64; 4],
    pub max_production: [f64; 4],
    pub degradation: [f64; 4],
    pub edges: Vec<ModelEdge>,
    pub signal: f64,
}

/// Hill gate value and derivative with respect to the source level.
#[inline]
pub fn hill_gate(x: f64, k: f64, n: f64, sign: i8) -> (f64, f64) {
    let x = x.max(0.0);
    if x == 0.0 {
        let slope = if n == 1.0 { 1.0 / k } else { 0.0 };
        return if sign > 0 { (0.0, slope) } else { (1.0, -slope) };
    }
    let r = (x / k).powf(n);
    let denom = 1.0 + r;
    let d = n * r / (x * denom * denom);
    if sign > 0 {
        (r / denom, d)
    } else {
        (1.0 / denom, -d)
    }
}

impl GrnModel {
    pub fn new(graph: &SignedGraph, dynamics: &GrnDynamics) -> Result<GrnModel, OracleError> {
        let edges = graph.edges();
        if edges.len() != dynamics.edges.len()
            || edges.iter().zip(&dynamics.edges).any(|(e, k)| e.src != k.src || e.dst != k.dst)
        {
            return Err(OracleError::MalformedManifest(
                "dynamics edge list does not match the graph".into(),
            ));
        }
        Ok(GrnModel {
            basal: dynamics.basal,
            max_production: dynamics.max_production,
            degradation: dynamics.degradation,
            edges: edges
                .iter()
                .zip(&dynamics.edges)
                .map(|(e, k)| ModelEdge {
                    src: e.src.index(),
                    dst: e.dst.gene_index().expect("admissible"),
                    sign: e.sign,
                    threshold: k.threshold,
                    hill: k.hill,
                })
                .collect(),
            signal: dynamics.signal,
        })
    }

    pub fn conditions(&self, iv: &Intervention) -> Conditions {
        let mut c = Conditions {
            signal: self.signal,
            gain: [1.0; 4],
        };
        for a in &iv.actions {
            match a.action {
                Action::SetSignal(l) => c.signal = l,
                Action::KnockUp(f) | Action::KnockDown(f) => {
                    if let Some(i) = a.node.gene_index() {
                        c.gain[i] = f;
                    }
                }
            }
        }
        c
    }

    #[inline]
    fn source(x: &[f64; 4], signal: f64, src: usize) -> f64 {
        if src == 0 {
            signal
        } else {
            x[src - 1]
        }
    }

    pub fn rhs(&self, x: &[f64; 4], c: &Conditions) -> [f64; 4] {
        let mut gate = [1.0; 4];
        for e in &self.edges {
            gate[e.dst] *= hill_gate(Self::source(x, c.signal, e.src), e.threshold, e.hill, e.sign).0;
        }
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = self.basal[i] + self.max_production[i] * c.gain[i] * gate[i]
                - self.degradation[i] * x[i];
        }
        out
    }

    /// Jacobian of the right-hand side with respect to the state.
    pub fn jacobian(&self, x: &[f64; 4], c: &Conditions) -> Matrix4<f64> {
        let mut j = Matrix4::zeros();
        for i in 0..4 {
            j[(i, i)] = -self.degradation[i];
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.src == 0 {
                continue;
            }
            let (_, dg) = hill_gate(x[e.src - 1], e.threshold, e.hill, e.sign);
            if dg == 0.0 {
                continue;
            }
            // product of the other gates on the same target
            let mut others = self.max_production[e.dst] * c.gain[e.dst];
            for (m, f) in self.edges.iter().enumerate() {
                if m != k && f.dst == e.dst {
                    others *= hill_gate(Self::source(x, c.signal, f.src), f.threshold, f.hill, f.sign).0;
                }
            }
            j[(e.dst, e.src - 1)] += others * dg;
        }
        j
    }

    pub fn residual(&self, x: &[f64; 4], c: &Conditions) -> f64 {
        self.rhs(x, c).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn initial_state(&self) -> [f64; 4] {
        let mut x = [0.0; 4];
        for i in 0..4 {
            x[i] = self.basal[i] / self.degradation[i];
        }
        x
    }

    /// Classic fourth-order integration from `x0` until the largest
    /// derivative falls below `tol` or `max_steps` is hit. Returns the state,
    /// the final residual and the number of steps taken.
    pub fn integrate(&self, c: &Conditions, x0: [f64; 4], tol: f64, max_steps: usize) -> ([f64; 4], f64, usize) {
        let h = RK4_STEP;
        let mut x = x0;
        let add = |x: &[f64; 4], k: &[f64; 4], s: f64| {
            let mut o = *x;
            for i in 0..4 {
                o[i] += s * k[i];
            }
            o
        };
        for step in 0..max_steps {
            let k1 = self.rhs(&x, c);
            let res = k1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if res < tol || !res.is_finite() {
                return (x, res, step);
            }
            let k2 = self.rhs(&add(&x, &k1, h / 2.0), c);
            let k3 = self.rhs(&add(&x, &k2, h / 2.0), c);
            let k4 = self.rhs(&add(&x, &k3, h), c);
            for i in 0..4 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let res = self.residual(&x, c);
        (x, res, max_steps)
    }

    /// Newton iteration on the fixed-point equations from `x0`. Returns
    /// `None` if it fails to reach `tol` or leaves the non-negative orthant.
    pub fn newton(&self, c: &Conditions, x0: [f64; 4], tol: f64, max_iter: usize) -> Option<[f64; 4]> {
        let mut x = x0;
        for _ in 0..max_iter {
            let f = self.rhs(&x, c);
            let res = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if res < tol {
                return Some(x);
            }
            let j = self.jacobian(&x, c);
            let dx = j.lu().solve(&-Vector4::from(f))?;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let mut trial = x;
                for i in 0..4 {
                    trial[i] += step * dx[i];
                }
                if trial.iter().all(|v| *v >= 0.0 && v.is_finite()) && self.residual(&trial, c) < res {
                    x = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return None;
            }
        }
        (self.residual(&x, c) < tol).then_some(x)
    }

    /// Steady state reached by integration from `x0`.
    pub fn steady_from(&self, c: &Conditions, x0: [f64; 4]) -> Result<[f64; 4], OracleError> {
        self.steady_within(c, x0, MAX_STEPS)
    }

    /// [`GrnModel::steady_from`] with an explicit step budget.
    pub fn steady_within(&self, c: &Conditions, x0: [f64; 4], max_steps: usize) -> Result<[f64; 4], OracleError> {
        let (x, res, steps) = self.integrate(c, x0, STEADY_TOL, max_steps);
        if res < RESIDUAL_LIMIT {
            Ok(x)
        } else {
            Err(OracleError::NonConvergence { residual: res, steps })
        }
    }

    pub fn baseline(&self) -> Result<[f64; 4], OracleError> {
        self.baseline_within(MAX_STEPS)
    }

    pub fn baseline_within(&self, max_steps: usize) -> Result<[f64; 4], OracleError> {
        self.steady_within(&self.conditions(&Intervention::none()), self.initial_state(), max_steps)
    }
}

/// Steady state after `iv`, integrated from the unperturbed baseline.
pub fn steady_state(
    g: &SignedGraph,
    d: &GrnDynamics,
    iv: &Intervention,
) -> Result<GrnObservation, OracleError> {
    steady_state_within(g, d, iv, MAX_STEPS)
}

/// [`steady_state`] with an explicit step budget for each integration.
pub fn steady_state_within(
    g: &SignedGraph,
    d: &GrnDynamics,
    iv: &Intervention,
    max_steps: usize,
) -> Result<GrnObservation, OracleError> {
    iv.validate()?;
    let model = GrnModel::new(g, d)?;
    let base = model.baseline_within(max_steps)?;
    if iv.actions.is_empty() {
        return Ok(GrnObservation { expression: base });
    }
    let x = model.steady_within(&model.conditions(iv), base, max_steps)?;
    Ok(GrnObservation { expression: x })
}

#[derive(Debug, Clone)]
pub struct GrnMechanism {
    graph: SignedGraph,
    dynamics: GrnDynamics,
    model: GrnModel,
    baseline: [f64; 4],
}

impl GrnMechanism {
    pub fn new(graph: SignedGraph, dynamics: GrnDynamics) -> Result<Self, OracleError> {
        let model = GrnModel::new(&graph, &dynamics)?;
        let baseline = model.baseline()?;
        Ok(GrnMechanism {
            graph,
            dynamics,
            model,
            baseline,
        })
    }

    pub fn graph(&self) -> &SignedGraph {
        &self.graph
    }

    pub fn dynamics(&self) -> &GrnDynamics {
        &self.dynamics
    }

    pub fn noiseless(&self, iv: &Intervention) -> Result<GrnObservation, OracleError> {
        iv.validate()?;
        if iv.actions.is_empty() {
            return Ok(GrnObservation {
                expression: self.baseline,
            });
        }
        let x = self.model.steady_from(&self.model.conditions(iv), self.baseline)?;
        Ok(GrnObservation { expression: x })
    }
}

impl Mechanism for GrnMechanism {
    type Input = Intervention;
    type Output = GrnObservation;

    fn respond(&self, input: &Intervention) -> Result<GrnObservation, OracleError> {
        self.noiseless(input)
    }

    fn add_noise(&self, mut out: GrnObservation, sigma: f64, rng: &mut ChaCha8Rng) -> GrnObservation {
        for v in out.expression.iter_mut() {
            *v = apply_noise(*v, sigma, rng);
        }
        out
    }
}

pub const DOMAIN_DESCRIPTION: &str = "Gene regulatory network with an external signal and genes \
A, B, C and R. C is the readout. Each experiment applies up to two actions (knock_up or \
knock_down of a gene's production, or set_signal) and observes the steady-state expression of \
A, B, C and R. Regulation is signed: activation (+1) or repression (-1).";

impl BudgetedOracle<GrnMechanism> {
    pub fn perturb(&mut self, iv: &Intervention) -> Result<GrnObservation, OracleError> {
        self.query(iv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_dynamics(g: &SignedGraph, b: f64, beta: f64, gamma: f64, k: f64, n: f64, s: f64) -> GrnDynamics {
        GrnDynamics {
            basal: [b; 4],
            degradation: [gamma; 4],
            max_production: [beta; 4],
            edges: g
                .edges()
                .iter()
                .map(|e| EdgeKinetics {
                    src: e.src,
                    dst: e.dst,
                    threshold: k,
                    hill: n,
                })
                .collect(),
            signal: s,
        }
    }

    #[test]
    fn catalog_shape() {
        let c = motif_catalog();
        assert_eq!(c.len(), 45);
        let fams: std::collections::BTreeSet<_> = c.iter().map(|d| d.family.clone()).collect();
        assert_eq!(fams.len(), 5);
        assert_eq!(motif_graph("activation_chain", 1).unwrap().canonical_key(), "signal A +;A B +;B C +");
        for d in &c {
            assert!(d.graph.has_path(Node::Signal, Node::FINAL), "{} v{}", d.family, d.variant);
        }
    }

    #[test]
    fn admissible_space_size() {
        assert_eq!(admissible_pairs().len(), 16);
        let ivs = admissible_interventions();
        assert_eq!(ivs.len(), 51);
        for iv in &ivs {
            iv.validate().unwrap();
        }
    }

    #[test]
    fn edgeless_fixed_point() {
        let g = SignedGraph::empty();
        // no regulators: production is b + beta; with beta = 0 the fixed point is b/gamma
        let d = flat_dynamics(&g, 1.0, 0.0, 0.5, 1.0, 1.0, 3.0);
        let obs = steady_state(&g, &d, &Intervention::none()).unwrap();
        for v in obs.expression {
            assert!((v - 2.0).abs() < 1e-7);
        }
    }

    #[test]
    fn saturated_activation() {
        let g = SignedGraph::from_edges(&[Edge::new(Node::Signal, Node::A, 1)]).unwrap();
        let d = flat_dynamics(&g, 0.1, 2.0, 0.5, 0.01, 1.0, 1e6);
        let obs = steady_state(&g, &d, &Intervention::none()).unwrap();
        assert!((obs.expression[0] - 4.2).abs() < 1e-4, "{:?}", obs.expression);
    }

    #[test]
    fn full_knockdown_without_basal() {
        let g = SignedGraph::from_edges(&[Edge::new(Node::Signal, Node::A, 1)]).unwrap();
        let mut d = flat_dynamics(&g, 0.1, 2.0, 0.5, 1.0, 1.0, 3.0);
        d.basal[0] = 0.0;
        let iv = Intervention::single(Node::A, Action::KnockDown(0.0));
        let obs = steady_state(&g, &d, &iv).unwrap();
        assert!(obs.expression[0].abs() < 1e-7);
    }

    #[test]
    fn three_actions_rejected() {
        let iv = Intervention {
            actions: vec![
                NodeAction { node: Node::A, action: Action::KnockUp(5.0) },
                NodeAction { node: Node::B, action: Action::KnockUp(5.0) },
                NodeAction { node: Node::C, action: Action::KnockUp(5.0) },
            ],
        };
        assert!(matches!(iv.validate(), Err(OracleError::InvalidIntervention(_))));
        let bad = Intervention::single(Node::A, Action::SetSignal(1.0));
        assert!(bad.validate().is_err());
        let bad = Intervention::single(Node::A, Action::KnockUp(0.5));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn graph_wire_round_trip() {
        let g = motif_graph("incoherent_ffl", 1).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(text, r#"["signal A +","A B +","A C +","B C -"]"#);
        let back: SignedGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn intervention_wire_format() {
        let iv = Intervention::single(Node::A, Action::KnockUp(5.0));
        let text = serde_json::to_string(&iv).unwrap();
        assert_eq!(text, r#"[{"node":"A","action":"knock_up","factor":5.0}]"#);
        assert_eq!(serde_json::from_str::<Intervention>(&text).unwrap(), iv);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (g, d) = instantiate("toggle_switch", 1, Difficulty::Hard, 4).unwrap();
        let m = GrnModel::new(&g, &d).unwrap();
        let c = m.conditions(&Intervention::none());
        let x = [0.7, 1.3, 0.4, 2.0];
        let j = m.jacobian(&x, &c);
        for col in 0..4 {
            let (mut hi, mut lo) = (x, x);
            hi[col] += 1e-6;
            lo[col] -= 1e-6;
            let (fh, fl) = (m.rhs(&hi, &c), m.rhs(&lo, &c));
            for row in 0..4 {
                let fd = (fh[row] - fl[row]) / 2e-6;
                assert!((fd - j[(row, col)]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn newton_agrees_with_integration() {
        for f in MOTIF_FAMILIES {
            let (g, d) = instantiate(f, 1, Difficulty::Medium, 9).unwrap();
            let m = GrnModel::new(&g, &d).unwrap();
            let base = m.baseline().unwrap();
            let c = m.conditions(&Intervention::none());
            let polished = m.newton(&c, base, 1e-12, 20).unwrap();
            for i in 0..4 {
                assert!((polished[i] - base[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oscillating_draws_are_redrawn() {
        // hard-tier Goodwin loops oscillate for many raw draws
        let menu = admissible_interventions();
        for seed in 0..4 {
            let (g, d) = instantiate("negative_feedback", 2, Difficulty::Hard, seed).unwrap();
            let m = GrnMechanism::new(g, d).unwrap();
            for iv in &menu {
                let obs = m.noiseless(iv).unwrap();
                let model = GrnModel::new(m.graph(), m.dynamics()).unwrap();
                assert!(model.residual(&obs.expression, &model.conditions(iv)) < RESIDUAL_LIMIT);
            }
        }
    }
}
