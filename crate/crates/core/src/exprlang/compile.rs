use super::{BinOp, ExprError, ExprNode, Func};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Var(usize),
    Const(usize),
    Num(f64),
    Neg,
    Bin(BinOp),
    Call(Func),
}

pub(crate) fn apply_binary(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Pow => a.powf(b),
    }
}

/// Postfix program over slot-indexed variables and constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    depth: usize,
    n_vars: usize,
    n_consts: usize,
}

impl CompiledExpr {
    pub(crate) fn new(
        ast: &ExprNode,
        variables: &[String],
        constants: &[String],
    ) -> Result<Self, ExprError> {
        let mut ops = Vec::new();
        emit(ast, variables, constants, &mut ops)?;
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Var(_) | Op::Const(_) | Op::Num(_) => depth += 1,
                Op::Bin(_) => depth -= 1,
                Op::Neg | Op::Call(_) => {}
            }
            max_depth = max_depth.max(depth);
        }
        Ok(CompiledExpr {
            ops,
            depth: max_depth,
            n_vars: variables.len(),
            n_consts: constants.len(),
        })
    }

    pub fn n_constants(&self) -> usize {
        self.n_consts
    }

    pub fn n_variables(&self) -> usize {
        self.n_vars
    }

    pub fn eval(&self, vars: &[f64], consts: &[f64]) -> f64 {
        debug_assert_eq!(vars.len(), self.n_vars);
        debug_assert_eq!(consts.len(), self.n_consts);
        let mut stack: Vec<f64> = Vec::with_capacity(self.depth);
        for op in &self.ops {
            match *op {
                Op::Var(i) => stack.push(vars[i]),
                Op::Const(i) => stack.push(consts[i]),
                Op::Num(v) => stack.push(v),
                Op::Neg => {
                    let top = stack.last_mut().expect("stack");
                    *top = -*top;
                }
                Op::Call(f) => {
                    let top = stack.last_mut().expect("stack");
                    *top = f.apply(*top);
                }
                Op::Bin(op) => {
                    let b = stack.pop().expect("stack");
                    let top = stack.last_mut().expect("stack");
                    *top = apply_binary(op, *top, b);
                }
            }
        }
        stack[0]
    }

    /// Value and gradient with respect to the constants (forward mode).
    pub fn eval_grad(&self, vars: &[f64], consts: &[f64], grad: &mut [f64]) -> f64 {
        let nc = self.n_consts;
        debug_assert_eq!(grad.len(), nc);
        let mut vals: Vec<f64> = Vec::with_capacity(self.depth);
        let mut dvs: Vec<f64> = vec![0.0; self.depth.max(1) * nc];
        // nonzero-gradient flag per stack slot, to avoid ln(a) on constant exponents
        let mut live: Vec<bool> = Vec::with_capacity(self.depth);
        for op in &self.ops {
            match *op {
                Op::Var(i) => {
                    let s = vals.len();
                    vals.push(vars[i]);
                    live.push(false);
                    dvs[s * nc..(s + 1) * nc].fill(0.0);
                }
                Op::Num(v) => {
                    let s = vals.len();
                    vals.push(v);
                    live.push(false);
                    dvs[s * nc..(s + 1) * nc].fill(0.0);
                }
                Op::Const(i) => {
                    let s = vals.len();
                    vals.push(consts[i]);
                    live.push(true);
                    let row = &mut dvs[s * nc..(s + 1) * nc];
                    row.fill(0.0);
                    row[i] = 1.0;
                }
                Op::Neg => {
                    let s = vals.len() - 1;
                    vals[s] = -vals[s];
                    if live[s] {
                        dvs[s * nc..(s + 1) * nc].iter_mut().for_each(|d| *d = -*d);
                    }
                }
                Op::Call(f) => {
                    let s = vals.len() - 1;
                    let x = vals[s];
                    let fx = f.apply(x);
                    vals[s] = fx;
                    if live[s] {
                        let k = f.derivative(x, fx);
                        dvs[s * nc..(s + 1) * nc].iter_mut().for_each(|d| *d *= k);
                    }
                }
                Op::Bin(op) => {
                    let sb = vals.len() - 1;
                    let sa = sb - 1;
                    let a = vals[sa];
                    let b = vals[sb];
                    let (la, lb) = (live[sa], live[sb]);
                    let value = apply_binary(op, a, b);
                    if la || lb {
                        let (head, tail) = dvs.split_at_mut(sb * nc);
                        let da = &mut head[sa * nc..];
                        let db = &tail[..nc];
                        match op {
                            BinOp::Add => {
                                if lb {
                                    da.iter_mut().zip(db).for_each(|(x, y)| *x += y)
                                }
                            }
                            BinOp::Sub => {
                                if lb {
                                    da.iter_mut().zip(db).for_each(|(x, y)| *x -= y)
                                }
                            }
                            BinOp::Mul => da
                                .iter_mut()
                                .zip(db)
                                .for_each(|(x, y)| *x = *x * b + a * y),
                            BinOp::Div => {
                                let inv = 1.0 / b;
                                da.iter_mut()
                                    .zip(db)
                                    .for_each(|(x, y)| *x = (*x - value * y) * inv)
                            }
                            BinOp::Pow => {
                                let ka = if la { b * a.powf(b - 1.0) } else { 0.0 };
                                let kb = if lb { value * a.ln() } else { 0.0 };
                                da.iter_mut().zip(db).for_each(|(x, y)| {
                                    let ta = if la { ka * *x } else { 0.0 };
                                    let tb = if lb { kb * y } else { 0.0 };
                                    *x = ta + tb;
                                })
                            }
                        }
                    }
                    vals.pop();
                    live.pop();
                    vals[sa] = value;
                    live[sa] = la || lb;
                }
            }
        }
        if live[0] {
            grad.copy_from_slice(&dvs[..nc]);
        } else {
            grad.fill(0.0);
        }
        vals[0]
    }
}

fn emit(
    node: &ExprNode,
    variables: &[String],
    constants: &[String],
    ops: &mut Vec<Op>,
) -> Result<(), ExprError> {
    match node {
        ExprNode::Var(n) => {
            let i = variables
                .iter()
                .position(|v| v == n)
                .ok_or_else(|| ExprError::UnboundName(n.clone()))?;
            ops.push(Op::Var(i));
        }
        ExprNode::Const(n) => {
            let i = constants
                .iter()
                .position(|v| v == n)
                .ok_or_else(|| ExprError::UnboundName(n.clone()))?;
            ops.push(Op::Const(i));
        }
        ExprNode::Num(v) => ops.push(Op::Num(*v)),
        ExprNode::Neg(a) => {
            emit(a, variables, constants, ops)?;
            ops.push(Op::Neg);
        }
        ExprNode::Binary { op, lhs, rhs } => {
            emit(lhs, variables, constants, ops)?;
            emit(rhs, variables, constants, ops)?;
            ops.push(Op::Bin(*op));
        }
        ExprNode::Call { func, arg } => {
            emit(arg, variables, constants, ops)?;
            ops.push(Op::Call(*func));
        }
    }
    Ok(())
}
