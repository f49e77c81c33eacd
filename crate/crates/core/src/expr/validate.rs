use std::fmt;

use super::{param_in_range, Expr, ExprLimits, Operator};

/// A limit or contract breach found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DepthExceeded { depth: usize, max: usize },
    TooManyNodes { nodes: usize, max: usize },
    WindowTooLarge { op: Operator, window: usize, max: usize },
    /// The window is below what the operator needs to yield any value
    /// (e.g. `Std` needs two observations).
    WindowTooSmall { op: Operator, window: usize, min: usize },
    OperatorNotAllowed(Operator),
    Malformed(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DepthExceeded { depth, max } => {
                write!(f, "depth {depth} exceeds the maximum of {max}")
            }
            Violation::TooManyNodes { nodes, max } => {
                write!(f, "{nodes} nodes exceed the maximum of {max}")
            }
            Violation::WindowTooLarge { op, window, max } => {
                write!(f, "{op} window {window} exceeds the maximum of {max}")
            }
            Violation::WindowTooSmall { op, window, min } => {
                write!(f, "{op} window {window} is below the minimum of {min}")
            }
            Violation::OperatorNotAllowed(op) => write!(f, "operator {op} is not allowed"),
            Violation::Malformed(msg) => write!(f, "malformed expression: {msg}"),
        }
    }
}

/// Checks an expression against the limits. Returns every violation found;
/// an empty list means the expression is acceptable.
pub fn validate(expr: &Expr, limits: &ExprLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    let depth = expr.depth();
    if depth > limits.max_depth {
        out.push(Violation::DepthExceeded {
            depth,
            max: limits.max_depth,
        });
    }
    let nodes = expr.node_count();
    if nodes > limits.max_nodes {
        out.push(Violation::TooManyNodes {
            nodes,
            max: limits.max_nodes,
        });
    }
    expr.visit(&mut |e| match e {
        Expr::Node(n) => {
            if !limits.allows(n.op) && !out.contains(&Violation::OperatorNotAllowed(n.op)) {
                out.push(Violation::OperatorNotAllowed(n.op));
            }
            if n.children.len() != n.op.arity()
                || n.windows.len() != n.op.window_params()
                || n.reals.len() != n.op.extra_params()
            {
                out.push(Violation::Malformed(format!(
                    "{} has the wrong number of arguments",
                    n.op
                )));
            }
            for &w in &n.windows {
                if w > limits.max_window {
                    out.push(Violation::WindowTooLarge {
                        op: n.op,
                        window: w,
                        max: limits.max_window,
                    });
                }
                if w < n.op.min_window() {
                    out.push(Violation::WindowTooSmall {
                        op: n.op,
                        window: w,
                        min: n.op.min_window(),
                    });
                }
            }
            for &r in &n.reals {
                if !param_in_range(n.op, r) {
                    out.push(Violation::Malformed(format!("{} parameter {r} out of range", n.op)));
                }
            }
        }
        Expr::Const(v) if !v.is_finite() => {
            out.push(Violation::Malformed("non-finite constant".into()));
        }
        _ => {}
    });
    out
}
