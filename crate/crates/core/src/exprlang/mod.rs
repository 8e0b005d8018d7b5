//! Arithmetic hypothesis language for equation mechanisms.
//!
//! Expressions are plain arithmetic over oracle variables and free constants
//! (`C0`, `C1`, ..., `alpha`, `beta`, `gamma`, `delta`). Power is written `**`;
//! `pow(...)` is rejected. Parsed hypotheses can be evaluated directly, compiled
//! into a slot-indexed program for repeated evaluation (with forward-mode
//! gradients over the free constants), and reduced to a structural
//! [`Skeleton`] for clustering and symbolic comparison.

mod compile;
mod parse;
mod skeleton;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use compile::CompiledExpr;
pub use skeleton::Skeleton;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unsupported function `{name}` at byte {position}")]
    UnsupportedFunction { name: String, position: usize },
    #[error("unbound name `{0}`")]
    UnboundName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "**",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Exp,
    Log,
    Log10,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Abs,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "log10" => Func::Log10,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Log10 => "log10",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
        }
    }

    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Log10 => x.log10(),
            Func::Sqrt => x.sqrt(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tanh => x.tanh(),
            Func::Abs => x.abs(),
        }
    }

    /// d f / d x at `x`, given `fx = f(x)`.
    pub(crate) fn derivative(self, x: f64, fx: f64) -> f64 {
        match self {
            Func::Exp => fx,
            Func::Log => 1.0 / x,
            Func::Log10 => 1.0 / (x * std::f64::consts::LN_10),
            Func::Sqrt => 0.5 / fx,
            Func::Sin => x.cos(),
            Func::Cos => -x.sin(),
            Func::Tanh => 1.0 - fx * fx,
            Func::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Var(String),
    Const(String),
    Num(f64),
    Neg(Box<ExprNode>),
    Binary {
        op: BinOp,
        lhs: Box<ExprNode>,
        rhs: Box<ExprNode>,
    },
    Call {
        func: Func,
        arg: Box<ExprNode>,
    },
}

/// True for names reserved for free constants: `C<digits>`, `alpha`, `beta`,
/// `gamma`, `delta`.
pub fn is_constant_name(name: &str) -> bool {
    if matches!(name, "alpha" | "beta" | "gamma" | "delta") {
        return true;
    }
    let mut chars = name.chars();
    chars.next() == Some('C') && name.len() > 1 && chars.all(|c| c.is_ascii_digit())
}

impl ExprNode {
    pub fn binary(op: BinOp, lhs: ExprNode, rhs: ExprNode) -> ExprNode {
        ExprNode::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    /// Pre-order walk.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a ExprNode)) {
        f(self);
        match self {
            ExprNode::Neg(a) | ExprNode::Call { arg: a, .. } => a.visit(f),
            ExprNode::Binary { lhs, rhs, .. } => {
                lhs.visit(f);
                rhs.visit(f);
            }
            _ => {}
        }
    }

    /// Replaces bound free constants with numeric literals.
    pub fn substitute(&self, constants: &BTreeMap<String, f64>) -> ExprNode {
        match self {
            ExprNode::Const(name) => match constants.get(name) {
                Some(v) => ExprNode::Num(*v),
                None => self.clone(),
            },
            ExprNode::Var(_) | ExprNode::Num(_) => self.clone(),
            ExprNode::Neg(a) => ExprNode::Neg(Box::new(a.substitute(constants))),
            ExprNode::Binary { op, lhs, rhs } => {
                ExprNode::binary(*op, lhs.substitute(constants), rhs.substitute(constants))
            }
            ExprNode::Call { func, arg } => ExprNode::Call {
                func: *func,
                arg: Box::new(arg.substitute(constants)),
            },
        }
    }

    fn eval_with(&self, lookup: &dyn Fn(&str, bool) -> Option<f64>) -> Result<f64, ExprError> {
        Ok(match self {
            ExprNode::Var(n) => lookup(n, false).ok_or_else(|| ExprError::UnboundName(n.clone()))?,
            ExprNode::Const(n) => {
                lookup(n, true).ok_or_else(|| ExprError::UnboundName(n.clone()))?
            }
            ExprNode::Num(v) => *v,
            ExprNode::Neg(a) => -a.eval_with(lookup)?,
            ExprNode::Binary { op, lhs, rhs } => {
                let a = lhs.eval_with(lookup)?;
                let b = rhs.eval_with(lookup)?;
                compile::apply_binary(*op, a, b)
            }
            ExprNode::Call { func, arg } => func.apply(arg.eval_with(lookup)?),
        })
    }
}

impl fmt::Display for ExprNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprNode::Var(n) | ExprNode::Const(n) => f.write_str(n),
            ExprNode::Num(v) => {
                if v.is_sign_negative() {
                    write!(f, "(-{:?})", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            ExprNode::Neg(a) => write!(f, "(-{a})"),
            ExprNode::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            ExprNode::Call { func, arg } => write!(f, "{}({arg})", func.name()),
        }
    }
}

/// A parsed equation hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedHypothesis {
    pub source_text: String,
    pub ast: ExprNode,
    /// Each free constant once, in order of first appearance.
    pub free_constants: Vec<String>,
    pub variables_used: BTreeSet<String>,
}

impl ParsedHypothesis {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let ast = parse::parse_expr(text)?;
        Ok(Self::from_ast(text.to_string(), ast))
    }

    pub fn from_ast(source_text: String, ast: ExprNode) -> Self {
        let mut free_constants: Vec<String> = Vec::new();
        let mut variables_used = BTreeSet::new();
        ast.visit(&mut |n| match n {
            ExprNode::Const(c) if !free_constants.contains(c) => free_constants.push(c.clone()),
            ExprNode::Var(v) => {
                variables_used.insert(v.clone());
            }
            _ => {}
        });
        ParsedHypothesis {
            source_text,
            ast,
            free_constants,
            variables_used,
        }
    }

    /// Explicitly parenthesized text form with `**` for power.
    pub fn canonical_text(&self) -> String {
        self.ast.to_string()
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::of(&self.ast)
    }

    /// Canonical text with fitted constants substituted as literals.
    pub fn instantiate(&self, constants: &BTreeMap<String, f64>) -> String {
        self.ast.substitute(constants).to_string()
    }

    /// Compiles against an ordered variable list; constants follow
    /// `free_constants` order.
    pub fn compile(&self, variables: &[String]) -> Result<CompiledExpr, ExprError> {
        CompiledExpr::new(&self.ast, variables, &self.free_constants)
    }

    /// Checks that every variable is among `allowed`.
    pub fn bind_check(&self, allowed: &[String]) -> Result<(), ExprError> {
        match self.variables_used.iter().find(|v| !allowed.contains(v)) {
            Some(v) => Err(ExprError::UnboundName(v.clone())),
            None => Ok(()),
        }
    }
}

/// Evaluates with name bindings. Domain violations yield a non-finite value,
/// never an error; a missing binding is [`ExprError::UnboundName`].
pub fn evaluate(
    h: &ParsedHypothesis,
    variables: &BTreeMap<String, f64>,
    constants: &BTreeMap<String, f64>,
) -> Result<f64, ExprError> {
    h.ast.eval_with(&|name, is_const| {
        if is_const {
            constants.get(name).copied()
        } else {
            variables.get(name).copied()
        }
    })
}

pub fn skeletonize(h: &ParsedHypothesis) -> Skeleton {
    h.skeleton()
}

/// Sound but incomplete: algebraically equal forms with different skeletons
/// compare unequal.
pub fn equivalent_up_to_constants(a: &ParsedHypothesis, b: &ParsedHypothesis) -> bool {
    a.skeleton() == b.skeleton()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_mm_form() {
        let h = ParsedHypothesis::parse("C0 * C_A / (C1 + C_A)").unwrap();
        assert_eq!(h.free_constants, vec!["C0", "C1"]);
        assert_eq!(h.variables_used.iter().collect::<Vec<_>>(), vec!["C_A"]);
    }

    #[test]
    fn rejects_pow() {
        let err = ParsedHypothesis::parse("pow(x, 2)").unwrap_err();
        assert!(matches!(err, ExprError::UnsupportedFunction { ref name, .. } if name == "pow"));
        assert!(matches!(
            ParsedHypothesis::parse("foo(x)").unwrap_err(),
            ExprError::UnsupportedFunction { .. }
        ));
    }

    #[test]
    fn power_binds_tighter_than_unary_minus() {
        let h = ParsedHypothesis::parse("-C0**2").unwrap();
        let expected = ExprNode::Neg(Box::new(ExprNode::binary(
            BinOp::Pow,
            ExprNode::Const("C0".into()),
            ExprNode::Num(2.0),
        )));
        assert_eq!(h.ast, expected);
    }

    #[test]
    fn power_is_right_associative_and_others_left() {
        let h = ParsedHypothesis::parse("a ** b ** c").unwrap();
        assert_eq!(h.canonical_text(), "(a ** (b ** c))");
        let h = ParsedHypothesis::parse("a - b - c").unwrap();
        assert_eq!(h.canonical_text(), "((a - b) - c)");
        let h = ParsedHypothesis::parse("a / b * c").unwrap();
        assert_eq!(h.canonical_text(), "((a / b) * c)");
        let h = ParsedHypothesis::parse("2 ** -x").unwrap();
        assert_eq!(h.canonical_text(), "(2.0 ** (-x))");
    }

    #[test]
    fn syntax_errors_carry_position() {
        for bad in ["", "C0 *", "(x", "x)", "x $ y", "1..2", "exp(x, y)", "exp x"] {
            let err = ParsedHypothesis::parse(bad).unwrap_err();
            assert!(matches!(err, ExprError::Syntax { .. }), "{bad}: {err:?}");
        }
        match ParsedHypothesis::parse("x + * y").unwrap_err() {
            ExprError::Syntax { position, .. } => assert_eq!(position, 4),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn evaluates_hand_examples() {
        let h = ParsedHypothesis::parse("C0*S/(C1+S)").unwrap();
        let v = evaluate(&h, &vars(&[("S", 1.0)]), &vars(&[("C0", 2.0), ("C1", 1.0)])).unwrap();
        assert_eq!(v, 1.0);
        let h = ParsedHypothesis::parse("S + 0").unwrap();
        assert_eq!(evaluate(&h, &vars(&[("S", 7.0)]), &BTreeMap::new()).unwrap(), 7.0);
        let h = ParsedHypothesis::parse("log(S)").unwrap();
        assert!(!evaluate(&h, &vars(&[("S", 0.0)]), &BTreeMap::new()).unwrap().is_finite());
        let h = ParsedHypothesis::parse("0 ** -1 + 1/(S-S)").unwrap();
        assert!(!evaluate(&h, &vars(&[("S", 3.0)]), &BTreeMap::new()).unwrap().is_finite());
    }

    #[test]
    fn unbound_names_are_errors() {
        let h = ParsedHypothesis::parse("C0 * S").unwrap();
        assert_eq!(
            evaluate(&h, &vars(&[("S", 1.0)]), &BTreeMap::new()),
            Err(ExprError::UnboundName("C0".into()))
        );
        assert_eq!(
            h.bind_check(&["T".to_string()]),
            Err(ExprError::UnboundName("S".into()))
        );
    }

    #[test]
    fn constant_name_rules() {
        for c in ["C0", "C12", "alpha", "beta", "gamma", "delta"] {
            assert!(is_constant_name(c), "{c}");
        }
        for v in ["C", "C_A", "Cx", "c0", "n", "Enz"] {
            assert!(!is_constant_name(v), "{v}");
        }
    }

    #[test]
    fn skeleton_examples() {
        let a = ParsedHypothesis::parse("C0*S/(C1+S)").unwrap();
        let b = ParsedHypothesis::parse("alpha*S/(S+beta)").unwrap();
        assert_eq!(a.skeleton(), b.skeleton());
        assert!(equivalent_up_to_constants(&a, &b));
        assert!(equivalent_up_to_constants(&a, &a));

        let s = ParsedHypothesis::parse("S").unwrap();
        let s_c = ParsedHypothesis::parse("S + C0").unwrap();
        assert_ne!(s.skeleton(), s_c.skeleton());

        let hill = ParsedHypothesis::parse("C0*S**n/(C1**n + S**n)").unwrap();
        assert!(!equivalent_up_to_constants(&a, &hill));

        // numeric literals are anonymized like constants
        let lit = ParsedHypothesis::parse("2.5*S/(0.1+S)").unwrap();
        assert_eq!(lit.skeleton(), a.skeleton());
    }

    #[test]
    fn skeleton_is_idempotent_under_reparse() {
        for text in [
            "C0*S/(C1+S)",
            "exp(-C2/T) * C0 * Enz * C_A / (C1*(1 + C_I/C3) + C_A)",
            "-(x + y) ** 2 - 3 / z",
        ] {
            let sk = ParsedHypothesis::parse(text).unwrap().skeleton();
            let again = ParsedHypothesis::parse(sk.as_str()).unwrap().skeleton();
            assert_eq!(sk, again, "{text}");
        }
    }

    #[test]
    fn instantiate_substitutes_constants() {
        let h = ParsedHypothesis::parse("C0*S/(C1+S)").unwrap();
        let text = h.instantiate(&vars(&[("C0", 2.0), ("C1", -1.5)]));
        assert_eq!(text, "((2.0 * S) / ((-1.5) + S))");
        let back = ParsedHypothesis::parse(&text).unwrap();
        assert!(back.free_constants.is_empty());
    }
}
