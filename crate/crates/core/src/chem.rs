//! Enzyme-kinetics assay simulator: 57 task classes over one seven-variable
//! assay interface.
//!
//! Every class is a substrate-response core multiplied by zero or more modifier
//! factors. The rate is computed natively in floating point, and the same
//! composition is also rendered as an expression string (used for scoring
//! symbolic recovery); the two routes are cross-checked in tests.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exprlang::ParsedHypothesis;
use crate::oracle::{
    apply_noise, BudgetedOracle, Difficulty, EquationTask, Mechanism, OracleError, VariableSpec,
};
use crate::seeding;

pub const CATALOG_VERSION: u32 = 1;

/// Assay variable names in interface order.
pub const ASSAY_VARIABLES: [&str; 7] = ["C_A", "C_I", "C_B", "C_P", "Enz", "T", "pH"];

pub fn assay_bounds() -> Vec<VariableSpec> {
    vec![
        VariableSpec::new("C_A", 0.0, 100.0),
        VariableSpec::new("C_I", 0.0, 50.0),
        VariableSpec::new("C_B", 0.0, 100.0),
        VariableSpec::new("C_P", 0.0, 50.0),
        VariableSpec::new("Enz", 0.1, 10.0),
        VariableSpec::new("T", 278.0, 333.0),
        VariableSpec::new("pH", 4.0, 10.0),
    ]
}

const T_REF: f64 = 298.15;
const GAS_CONSTANT: f64 = 8.314;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssayInput {
    pub c_a: f64,
    pub c_i: f64,
    pub c_b: f64,
    pub c_p: f64,
    pub enz: f64,
    pub t: f64,
    pub ph: f64,
}

impl AssayInput {
    pub fn from_slice(x: &[f64]) -> AssayInput {
        AssayInput {
            c_a: x[0],
            c_i: x[1],
            c_b: x[2],
            c_p: x[3],
            enz: x[4],
            t: x[5],
            ph: x[6],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.c_a, self.c_i, self.c_b, self.c_p, self.enz, self.t, self.ph]
    }

    pub fn check(&self) -> Result<(), OracleError> {
        for (spec, v) in assay_bounds().iter().zip(self.to_vec()) {
            spec.check(v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemObservation {
    pub r0: f64,
    pub aux: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Core {
    MichaelisMenten,
    Hill,
    AntiCooperativeHill,
    SubstrateInhibition,
    PingPong,
    OrderedSequential,
    Fractal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modifier {
    Competitive,
    Uncompetitive,
    Noncompetitive,
    Product,
    Arrhenius,
    AllostericActivation,
    CooperativeInhibition,
    Ph,
    MetalIon,
    ProductActivation,
}

impl Modifier {
    fn short(self) -> &'static str {
        match self {
            Modifier::Competitive => "competitive",
            Modifier::Uncompetitive => "uncompetitive",
            Modifier::Noncompetitive => "noncompetitive",
            Modifier::Product => "product",
            Modifier::Arrhenius => "arrhenius",
            Modifier::AllostericActivation => "allosteric",
            Modifier::CooperativeInhibition => "cooperative_inhibition",
            Modifier::Ph => "ph",
            Modifier::MetalIon => "metal_ion",
            Modifier::ProductActivation => "product_activation",
        }
    }
}

impl Core {
    fn short(self) -> &'static str {
        match self {
            Core::MichaelisMenten => "michaelis_menten",
            Core::Hill => "hill",
            Core::AntiCooperativeHill => "anti_cooperative_hill",
            Core::SubstrateInhibition => "substrate_inhibition",
            Core::PingPong => "ping_pong",
            Core::OrderedSequential => "ordered_sequential",
            Core::Fractal => "fractal",
        }
    }

    fn params(self) -> Vec<ParamRange> {
        let v = ParamRange::new("Vmax", 0.1, 100.0);
        let k = |n: &str| ParamRange::new(n, 0.01, 50.0);
        match self {
            Core::MichaelisMenten => vec![v, k("Km")],
            Core::Hill => vec![v, k("K"), ParamRange::new("n", 1.5, 4.0)],
            Core::AntiCooperativeHill => vec![v, k("K"), ParamRange::new("n", 0.3, 0.9)],
            Core::SubstrateInhibition => vec![v, k("Km"), k("Ksi")],
            Core::PingPong => vec![v, k("Ka"), k("Kb")],
            Core::OrderedSequential => vec![v, k("Kia"), k("Ka"), k("Kb")],
            Core::Fractal => vec![ParamRange::new("k", 0.1, 100.0), ParamRange::new("h", 0.3, 0.9)],
        }
    }

    fn variables(self) -> &'static [&'static str] {
        match self {
            Core::PingPong | Core::OrderedSequential => &["C_A", "C_B", "Enz"],
            _ => &["C_A", "Enz"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    fn new(name: &str, lo: f64, hi: f64) -> Self {
        ParamRange {
            name: name.to_string(),
            lo,
            hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyDescriptor {
    pub id: String,
    pub tier: Difficulty,
    pub core: Core,
    pub modifiers: Vec<Modifier>,
    pub params: Vec<ParamRange>,
    pub relevant_variables: Vec<String>,
    /// Rate law with parameter names in place of values.
    pub formula: String,
    /// True for classes named in the published benchmark description; false
    /// for the enumeration that completes the count.
    pub named: bool,
}

fn modifier_params(m: Modifier, mods: &[Modifier]) -> Vec<ParamRange> {
    let k = |n: &str| ParamRange::new(n, 0.01, 50.0);
    let mixed = mods.contains(&Modifier::Competitive) && mods.contains(&Modifier::Uncompetitive);
    match m {
        Modifier::Competitive => vec![k(if mixed { "Ki1" } else { "Ki" })],
        Modifier::Uncompetitive => vec![k(if mixed { "Ki2" } else { "Ki" })],
        Modifier::Noncompetitive => vec![k("Ki")],
        Modifier::Product => vec![k("Kp")],
        Modifier::Arrhenius => vec![ParamRange::new("Ea", 20.0, 80.0)],
        Modifier::AllostericActivation => vec![k("Kact")],
        Modifier::CooperativeInhibition => vec![k("Ki"), ParamRange::new("m", 1.5, 4.0)],
        Modifier::Ph => vec![ParamRange::new("pKa", 5.0, 9.0)],
        Modifier::MetalIon => vec![k("Kmet"), ParamRange::new("h", 1.5, 4.0)],
        Modifier::ProductActivation => vec![k("Kap")],
    }
}

fn modifier_variables(m: Modifier) -> &'static [&'static str] {
    match m {
        Modifier::Competitive
        | Modifier::Uncompetitive
        | Modifier::Noncompetitive
        | Modifier::CooperativeInhibition => &["C_I"],
        Modifier::Product | Modifier::ProductActivation => &["C_P"],
        Modifier::Arrhenius => &["T"],
        Modifier::AllostericActivation | Modifier::MetalIon => &["C_B"],
        Modifier::Ph => &["pH"],
    }
}

/// Renders the rate law with each parameter replaced by `name(param)`.
fn render(core: Core, mods: &[Modifier], name: &dyn Fn(&str) -> String) -> String {
    let mixed = mods.contains(&Modifier::Competitive) && mods.contains(&Modifier::Uncompetitive);
    let cs = if mods.contains(&Modifier::Competitive) {
        format!("*(1 + C_I/{})", name(if mixed { "Ki1" } else { "Ki" }))
    } else {
        String::new()
    };
    let us = if mods.contains(&Modifier::Uncompetitive) {
        format!("*(1 + C_I/{})", name(if mixed { "Ki2" } else { "Ki" }))
    } else {
        String::new()
    };
    let mut s = match core {
        Core::MichaelisMenten => format!(
            "Enz*{v}*C_A/({km}{cs} + C_A{us})",
            v = name("Vmax"),
            km = name("Km")
        ),
        Core::Hill | Core::AntiCooperativeHill => format!(
            "Enz*{v}*C_A**{n}/({k}**{n}{cs} + C_A**{n}{us})",
            v = name("Vmax"),
            k = name("K"),
            n = name("n")
        ),
        Core::SubstrateInhibition => format!(
            "Enz*{v}*C_A/({km}{cs} + C_A{us} + C_A**2/{ksi})",
            v = name("Vmax"),
            km = name("Km"),
            ksi = name("Ksi")
        ),
        Core::PingPong => format!(
            "Enz*{v}*C_A*C_B/({ka}*C_B{cs} + {kb}*C_A + C_A*C_B{us})",
            v = name("Vmax"),
            ka = name("Ka"),
            kb = name("Kb")
        ),
        Core::OrderedSequential => format!(
            "Enz*{v}*C_A*C_B/({kia}*{kb}{cs} + {kb}*C_A + {ka}*C_B + C_A*C_B{us})",
            v = name("Vmax"),
            kia = name("Kia"),
            ka = name("Ka"),
            kb = name("Kb")
        ),
        Core::Fractal => format!("Enz*{}*C_A**{}", name("k"), name("h")),
    };
    for m in mods {
        let factor = match m {
            Modifier::Competitive | Modifier::Uncompetitive => continue,
            Modifier::Noncompetitive => format!("/(1 + C_I/{})", name("Ki")),
            Modifier::Product => format!("/(1 + C_P/{})", name("Kp")),
            Modifier::Arrhenius => format!(
                "*exp({}*(1000/{T_REF} - 1000/T)/{GAS_CONSTANT})",
                name("Ea")
            ),
            Modifier::AllostericActivation => format!("*(1 + C_B/{})", name("Kact")),
            Modifier::CooperativeInhibition => {
                format!("/(1 + (C_I/{})**{})", name("Ki"), name("m"))
            }
            Modifier::Ph => format!("/(1 + 10**({} - pH))", name("pKa")),
            Modifier::MetalIon => format!(
                "*C_B**{h}/({k}**{h} + C_B**{h})",
                h = name("h"),
                k = name("Kmet")
            ),
            Modifier::ProductActivation => format!("*(1 + C_P/{})", name("Kap")),
        };
        s.push_str(&factor);
    }
    s
}

fn descriptor(id: &str, tier: Difficulty, core: Core, mods: &[Modifier], named: bool) -> FamilyDescriptor {
    let mut params = core.params();
    for m in mods {
        for p in modifier_params(*m, mods) {
            if !params.iter().any(|q| q.name == p.name) {
                params.push(p);
            }
        }
    }
    let mut vars: Vec<&str> = core.variables().to_vec();
    for m in mods {
        vars.extend_from_slice(modifier_variables(*m));
    }
    let relevant_variables = ASSAY_VARIABLES
        .iter()
        .filter(|v| vars.contains(v))
        .map(|v| v.to_string())
        .collect();
    FamilyDescriptor {
        id: id.to_string(),
        tier,
        core,
        modifiers: mods.to_vec(),
        params,
        relevant_variables,
        formula: render(core, mods, &|p| p.to_string()),
        named,
    }
}

fn composite_id(core: Core, mods: &[Modifier]) -> String {
    let mut id = core.short().to_string();
    for m in mods {
        id.push('_');
        id.push_str(m.short());
    }
    id
}

/// The full class list, in a fixed order.
pub fn catalog() -> Vec<FamilyDescriptor> {
    use Core::*;
    use Modifier::*;
    let mut out = Vec::with_capacity(57);
    let easy: [(&str, Core, &[Modifier]); 9] = [
        ("michaelis_menten", MichaelisMenten, &[]),
        ("competitive_inhibition", MichaelisMenten, &[Competitive]),
        ("uncompetitive_inhibition", MichaelisMenten, &[Uncompetitive]),
        ("noncompetitive_inhibition", MichaelisMenten, &[Noncompetitive]),
        ("product_inhibition", MichaelisMenten, &[Product]),
        ("substrate_inhibition", SubstrateInhibition, &[]),
        ("hill_cooperativity", Hill, &[]),
        ("arrhenius_temperature", MichaelisMenten, &[Arrhenius]),
        ("ping_pong_bisubstrate", PingPong, &[]),
    ];
    for (id, core, mods) in easy {
        out.push(descriptor(id, Difficulty::Easy, core, mods, true));
    }

    let singles = [Competitive, Product, Arrhenius, Noncompetitive];
    let pairs: [[Modifier; 2]; 5] = [
        [Competitive, Product],
        [Competitive, Arrhenius],
        [Product, Arrhenius],
        [Product, Noncompetitive],
        [Arrhenius, Noncompetitive],
    ];
    let published = |core: Core, mods: &[Modifier]| {
        matches!(
            (core, mods),
            (MichaelisMenten, [Competitive, Arrhenius])
                | (PingPong, [Noncompetitive])
                | (Hill, [Product])
                | (SubstrateInhibition, [Arrhenius])
        )
    };
    let mut medium: Vec<(Core, Vec<Modifier>)> = Vec::new();
    for core in [Hill, SubstrateInhibition, PingPong] {
        for m in singles {
            medium.push((core, vec![m]));
        }
    }
    for core in [MichaelisMenten, PingPong] {
        for p in pairs {
            medium.push((core, p.to_vec()));
        }
    }
    medium.push((MichaelisMenten, vec![Uncompetitive, Product]));
    medium.push((MichaelisMenten, vec![Uncompetitive, Arrhenius]));
    for (core, mods) in medium {
        let named = published(core, &mods);
        out.push(descriptor(&composite_id(core, &mods), Difficulty::Medium, core, &mods, named));
    }

    let extended: [(&str, Core, &[Modifier]); 10] = [
        ("ordered_sequential_bisubstrate", OrderedSequential, &[]),
        ("allosteric_activation", MichaelisMenten, &[AllostericActivation]),
        ("anti_cooperative_hill", AntiCooperativeHill, &[]),
        ("fractal_kinetics", Fractal, &[]),
        ("mixed_inhibition", MichaelisMenten, &[Competitive, Uncompetitive]),
        ("cooperative_inhibition", MichaelisMenten, &[CooperativeInhibition]),
        ("monotonic_ph", MichaelisMenten, &[Ph]),
        ("metal_ion_activation", MichaelisMenten, &[MetalIon]),
        ("product_activation", MichaelisMenten, &[ProductActivation]),
        ("dual_inhibition", MichaelisMenten, &[Noncompetitive, Product]),
    ];
    for (id, core, mods) in extended {
        out.push(descriptor(id, Difficulty::Hard, core, mods, true));
    }
    for core in [Hill, SubstrateInhibition] {
        for p in pairs {
            out.push(descriptor(&composite_id(core, &p), Difficulty::Hard, core, &p, false));
        }
    }
    let triples: [(Core, [Modifier; 3]); 4] = [
        (MichaelisMenten, [Competitive, Product, Arrhenius]),
        (Hill, [Competitive, Product, Arrhenius]),
        (SubstrateInhibition, [Competitive, Product, Arrhenius]),
        (PingPong, [Noncompetitive, Product, Arrhenius]),
    ];
    for (core, mods) in triples {
        out.push(descriptor(&composite_id(core, &mods), Difficulty::Hard, core, &mods, false));
    }
    out
}

/// The nine base rate laws over free constants `C0, C1, ...`, in catalog order.
pub fn base_library() -> Vec<String> {
    catalog()
        .into_iter()
        .filter(|d| d.tier == Difficulty::Easy)
        .map(|d| {
            let index: BTreeMap<&str, usize> =
                d.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
            render(d.core, &d.modifiers, &|p| format!("C{}", index[p]))
        })
        .collect()
}

pub fn find_family(id: &str) -> Option<FamilyDescriptor> {
    catalog().into_iter().find(|d| d.id == id)
}

/// Catalog as the versioned data document.
pub fn catalog_document() -> serde_json::Value {
    serde_json::json!({
        "version": CATALOG_VERSION,
        "benchmark": "chem",
        "families": catalog(),
    })
}

/// One hidden instantiation of a catalog class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub family: String,
    pub core: Core,
    pub modifiers: Vec<Modifier>,
    pub params: BTreeMap<String, f64>,
    pub relevant_variables: Vec<String>,
}

pub fn instantiate(family: &str, _difficulty: Difficulty, seed: u64) -> Result<MechanismSpec, OracleError> {
    let d = find_family(family).ok_or_else(|| OracleError::UnknownFamily(family.to_string()))?;
    let mut rng = seeding::rng_for(seed, &format!("chem/{family}"));
    let params = d
        .params
        .iter()
        .map(|p| (p.name.clone(), seeding::log_uniform(&mut rng, p.lo, p.hi)))
        .collect();
    Ok(MechanismSpec {
        family: d.id,
        core: d.core,
        modifiers: d.modifiers,
        params,
        relevant_variables: d.relevant_variables,
    })
}

impl MechanismSpec {
    fn p(&self, name: &str) -> f64 {
        self.params[name]
    }

    fn has(&self, m: Modifier) -> bool {
        self.modifiers.contains(&m)
    }

    /// Noiseless initial rate; assumes in-bounds input.
    pub fn r0(&self, x: &AssayInput) -> f64 {
        let s = x.c_a;
        let i = x.c_i;
        let mixed = self.has(Modifier::Competitive) && self.has(Modifier::Uncompetitive);
        let cs = if self.has(Modifier::Competitive) {
            1.0 + i / self.p(if mixed { "Ki1" } else { "Ki" })
        } else {
            1.0
        };
        let us = if self.has(Modifier::Uncompetitive) {
            1.0 + i / self.p(if mixed { "Ki2" } else { "Ki" })
        } else {
            1.0
        };
        let vmax = || self.p("Vmax");
        let core = match self.core {
            Core::MichaelisMenten => {
                if s == 0.0 {
                    0.0
                } else {
                    vmax() * s / (self.p("Km") * cs + s * us)
                }
            }
            Core::Hill | Core::AntiCooperativeHill => {
                let n = self.p("n");
                let sn = s.powf(n);
                if sn == 0.0 {
                    0.0
                } else {
                    vmax() * sn / (self.p("K").powf(n) * cs + sn * us)
                }
            }
            Core::SubstrateInhibition => {
                if s == 0.0 {
                    0.0
                } else {
                    vmax() * s / (self.p("Km") * cs + s * us + s * s / self.p("Ksi"))
                }
            }
            Core::PingPong => {
                let b = x.c_b;
                if s * b == 0.0 {
                    0.0
                } else {
                    vmax() * s * b / (self.p("Ka") * b * cs + self.p("Kb") * s + s * b * us)
                }
            }
            Core::OrderedSequential => {
                let b = x.c_b;
                let kb = self.p("Kb");
                if s * b == 0.0 {
                    0.0
                } else {
                    vmax() * s * b
                        / (self.p("Kia") * kb * cs + kb * s + self.p("Ka") * b + s * b * us)
                }
            }
            Core::Fractal => self.p("k") * s.powf(self.p("h")),
        };
        let mut r = x.enz * core;
        for m in &self.modifiers {
            r *= match m {
                Modifier::Competitive | Modifier::Uncompetitive => 1.0,
                Modifier::Noncompetitive => 1.0 / (1.0 + i / self.p("Ki")),
                Modifier::Product => 1.0 / (1.0 + x.c_p / self.p("Kp")),
                Modifier::Arrhenius => {
                    let ea = self.p("Ea") * 1000.0;
                    (-ea / (GAS_CONSTANT * x.t)).exp() / (-ea / (GAS_CONSTANT * T_REF)).exp()
                }
                Modifier::AllostericActivation => 1.0 + x.c_b / self.p("Kact"),
                Modifier::CooperativeInhibition => {
                    1.0 / (1.0 + (i / self.p("Ki")).powf(self.p("m")))
                }
                Modifier::Ph => 1.0 / (1.0 + 10f64.powf(self.p("pKa") - x.ph)),
                Modifier::MetalIon => {
                    let h = self.p("h");
                    let bh = x.c_b.powf(h);
                    if bh == 0.0 {
                        0.0
                    } else {
                        bh / (self.p("Kmet").powf(h) + bh)
                    }
                }
                Modifier::ProductActivation => 1.0 + x.c_p / self.p("Kap"),
            };
        }
        r
    }

    /// The rate law as an expression over free constants `C0, C1, ...`
    /// (one per parameter, in catalog order) and the values of those constants.
    pub fn truth_expression(&self) -> (ParsedHypothesis, BTreeMap<String, f64>) {
        let d = find_family(&self.family).expect("instantiated from catalog");
        let index: BTreeMap<&str, usize> =
            d.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
        let text = render(self.core, &self.modifiers, &|p| format!("C{}", index[p]));
        let constants = d
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("C{i}"), self.params[&p.name]))
            .collect();
        let parsed = ParsedHypothesis::parse(&text).expect("rendered rate laws parse");
        (parsed, constants)
    }
}

pub fn rate(spec: &MechanismSpec, x: &AssayInput) -> Result<ChemObservation, OracleError> {
    x.check()?;
    let aux = BTreeMap::from([
        ("enzyme_check".to_string(), x.enz),
        ("total_substrate_check".to_string(), x.c_a + x.c_p),
    ]);
    Ok(ChemObservation {
        r0: spec.r0(x),
        aux,
    })
}

#[derive(Debug, Clone)]
pub struct ChemMechanism {
    spec: MechanismSpec,
}

impl ChemMechanism {
    pub fn new(spec: MechanismSpec) -> Self {
        ChemMechanism { spec }
    }

    pub fn spec(&self) -> &MechanismSpec {
        &self.spec
    }
}

impl Mechanism for ChemMechanism {
    type Input = AssayInput;
    type Output = ChemObservation;

    fn respond(&self, input: &AssayInput) -> Result<ChemObservation, OracleError> {
        rate(&self.spec, input)
    }

    fn add_noise(&self, mut out: ChemObservation, sigma: f64, rng: &mut ChaCha8Rng) -> ChemObservation {
        out.r0 = apply_noise(out.r0, sigma, rng);
        out
    }
}

/// Human-readable interface description shared by every chem task.
pub const DOMAIN_DESCRIPTION: &str = "Enzyme-catalyzed reaction assay. Each experiment sets \
substrate concentration C_A (mM), inhibitor concentration C_I (mM), second-substrate \
concentration C_B (mM), product concentration C_P (mM), enzyme loading Enz, temperature T (K) \
and pH, and returns the initial rate r0. Only some of the variables affect the rate.";

impl EquationTask for BudgetedOracle<ChemMechanism> {
    fn variables(&self) -> &[VariableSpec] {
        static BOUNDS: std::sync::OnceLock<Vec<VariableSpec>> = std::sync::OnceLock::new();
        BOUNDS.get_or_init(assay_bounds)
    }

    fn query_point(&mut self, x: &[f64]) -> Result<f64, OracleError> {
        self.query(&AssayInput::from_slice(x)).map(|o| o.r0)
    }

    fn remaining(&self) -> usize {
        BudgetedOracle::remaining(self)
    }

    fn budget(&self) -> usize {
        BudgetedOracle::budget(self)
    }

    fn domain_description(&self) -> String {
        DOMAIN_DESCRIPTION.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn mid() -> AssayInput {
        AssayInput {
            c_a: 5.0,
            c_i: 2.0,
            c_b: 3.0,
            c_p: 1.0,
            enz: 1.0,
            t: 310.0,
            ph: 7.0,
        }
    }

    #[test]
    fn catalog_counts() {
        let c = catalog();
        assert_eq!(c.len(), 57);
        let tier = |t| c.iter().filter(|d| d.tier == t).count();
        assert_eq!(tier(Difficulty::Easy), 9);
        assert_eq!(tier(Difficulty::Medium), 24);
        assert_eq!(tier(Difficulty::Hard), 24);
        let ids: BTreeSet<&str> = c.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids.len(), 57);
        for d in &c {
            assert!((2..=8).contains(&d.params.len()), "{} has {}", d.id, d.params.len());
        }
    }

    #[test]
    fn hill_lists_coefficient() {
        let d = find_family("hill_cooperativity").unwrap();
        assert!(d.params.iter().any(|p| p.name == "n"));
    }

    #[test]
    fn mm_spec_shape() {
        let s = instantiate("michaelis_menten", Difficulty::Easy, 3).unwrap();
        assert_eq!(s.params.keys().collect::<Vec<_>>(), vec!["Km", "Vmax"]);
        assert_eq!(s.relevant_variables, vec!["C_A", "Enz"]);
        assert_eq!(s, instantiate("michaelis_menten", Difficulty::Easy, 3).unwrap());
    }

    #[test]
    fn mm_hand_value() {
        let s = MechanismSpec {
            family: "michaelis_menten".into(),
            core: Core::MichaelisMenten,
            modifiers: vec![],
            params: [("Vmax".to_string(), 2.0), ("Km".to_string(), 1.0)].into(),
            relevant_variables: vec!["C_A".into(), "Enz".into()],
        };
        let x = AssayInput { c_a: 1.0, ..mid() };
        let obs = rate(&s, &x).unwrap();
        assert_eq!(obs.r0, 1.0);
        assert_eq!(obs.aux["total_substrate_check"], 2.0);
        assert_eq!(obs.aux["enzyme_check"], 1.0);
    }

    #[test]
    fn unknown_family() {
        assert_eq!(
            instantiate("nope", Difficulty::Easy, 1),
            Err(OracleError::UnknownFamily("nope".into()))
        );
    }

    #[test]
    fn out_of_bounds_rejected() {
        let s = instantiate("michaelis_menten", Difficulty::Easy, 1).unwrap();
        let x = AssayInput { t: 400.0, ..mid() };
        assert!(matches!(rate(&s, &x), Err(OracleError::InputOutOfBounds { ref dimension, .. }) if dimension == "T"));
    }

    #[test]
    fn formula_variables_match_relevant_set() {
        for d in catalog() {
            let h = ParsedHypothesis::parse(&d.formula).unwrap();
            let vars: Vec<String> = h
                .variables_used
                .iter()
                .filter(|v| ASSAY_VARIABLES.contains(&v.as_str()))
                .cloned()
                .collect();
            let mut expected = d.relevant_variables.clone();
            expected.sort();
            assert_eq!(vars, expected, "{}", d.id);
        }
    }

    #[test]
    fn expression_route_matches_native_rate() {
        let names: Vec<String> = ASSAY_VARIABLES.iter().map(|s| s.to_string()).collect();
        let bounds = assay_bounds();
        for d in catalog() {
            for seed in 0..5u64 {
                let spec = instantiate(&d.id, d.tier, seed).unwrap();
                let (expr, consts) = spec.truth_expression();
                assert_eq!(expr.free_constants.len(), d.params.len());
                let compiled = expr.compile(&names).unwrap();
                let cvals: Vec<f64> = expr.free_constants.iter().map(|c| consts[c]).collect();
                let mut rng = seeding::rng_for(seed, "pts");
                for _ in 0..20 {
                    let x: Vec<f64> = bounds
                        .iter()
                        .map(|b| b.lo + (b.hi - b.lo) * rand::Rng::random::<f64>(&mut rng))
                        .collect();
                    let native = spec.r0(&AssayInput::from_slice(&x));
                    let via = compiled.eval(&x, &cvals);
                    let tol = 1e-10 * native.abs().max(1e-300);
                    assert!((native - via).abs() <= tol, "{} native {native} expr {via}", d.id);
                }
            }
        }
    }
}
