use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BinOp, ExprNode};

/// Placeholder printed for every free constant and numeric literal. It is a
/// valid constant name, so a skeleton string re-parses.
const PLACEHOLDER: &str = "C0";

/// Structural form of an expression: constants and literals anonymized,
/// `+` and `*` chains flattened with operands sorted by their canonical text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Skeleton(String);

impl Skeleton {
    pub fn of(node: &ExprNode) -> Skeleton {
        Skeleton(canon(node))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_canonical(s: impl Into<String>) -> Skeleton {
        Skeleton(s.into())
    }
}

impl fmt::Display for Skeleton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn collect_chain<'a>(node: &'a ExprNode, op: BinOp, out: &mut Vec<&'a ExprNode>) {
    match node {
        ExprNode::Binary { op: o, lhs, rhs } if *o == op => {
            collect_chain(lhs, op, out);
            collect_chain(rhs, op, out);
        }
        _ => out.push(node),
    }
}

fn canon(node: &ExprNode) -> String {
    match node {
        ExprNode::Var(n) => n.clone(),
        ExprNode::Const(_) | ExprNode::Num(_) => PLACEHOLDER.to_string(),
        ExprNode::Neg(a) => format!("(-{})", canon(a)),
        ExprNode::Call { func, arg } => format!("{}({})", func.name(), canon(arg)),
        ExprNode::Binary { op, lhs, rhs } => match op {
            BinOp::Add | BinOp::Mul => {
                let mut parts = Vec::new();
                collect_chain(node, *op, &mut parts);
                let mut texts: Vec<String> = parts.into_iter().map(canon).collect();
                texts.sort();
                format!("({})", texts.join(&format!(" {} ", op.symbol())))
            }
            BinOp::Sub | BinOp::Div | BinOp::Pow => {
                format!("({} {} {})", canon(lhs), op.symbol(), canon(rhs))
            }
        },
    }
}
