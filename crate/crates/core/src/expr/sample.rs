use rand::seq::IndexedRandom;
use rand::Rng;

use super::{Expr, ExprLimits, Field, Node, Operator};

/// Random expression generator over a configurable grammar.
///
/// Used by the mock model backend and by property tests. Every sample obeys
/// the size limits, the operator whitelist and per-operator minimum windows.
#[derive(Debug, Clone)]
pub struct ExprSampler {
    pub limits: ExprLimits,
    pub operators: Vec<Operator>,
    pub fields: Vec<Field>,
    pub windows: Vec<usize>,
    /// Literal leaves, used as the second operand of binary operators.
    pub constants: Vec<f64>,
    pub power_exponents: Vec<f64>,
    pub quantile_levels: Vec<f64>,
    /// Probability that a child position becomes a leaf before the depth limit.
    pub leaf_prob: f64,
    pub const_prob: f64,
}

impl ExprSampler {
    pub fn new(limits: ExprLimits) -> Self {
        let operators = limits.allowed_operators();
        Self {
            limits,
            operators,
            fields: Field::ALL.to_vec(),
            windows: vec![2, 3, 5, 10, 20],
            constants: vec![1.0, 2.0, 5.0],
            power_exponents: vec![2.0, 3.0, 0.5],
            quantile_levels: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            leaf_prob: 0.3,
            const_prob: 0.15,
        }
    }

    /// Restricts the operator set (intersected with the whitelist).
    pub fn with_operators(mut self, ops: &[Operator]) -> Self {
        self.operators = ops
            .iter()
            .copied()
            .filter(|op| self.limits.allows(*op))
            .collect();
        self
    }

    pub fn with_max_depth(mut self, depth: usize) -> Self {
        self.limits.max_depth = depth;
        self
    }

    fn usable_windows(&self, op: Operator) -> Vec<usize> {
        self.windows
            .iter()
            .copied()
            .filter(|w| *w >= op.min_window() && *w <= self.limits.max_window)
            .collect()
    }

    fn usable_ops(&self) -> Vec<Operator> {
        self.operators
            .iter()
            .copied()
            .filter(|op| op.window_params() == 0 || !self.usable_windows(*op).is_empty())
            .collect()
    }

    /// Draws one expression. Samples exceeding `max_nodes` are redrawn.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Expr {
        let ops = self.usable_ops();
        let max_depth = self.limits.max_depth.max(1);
        for _ in 0..1000 {
            let e = self.grow(rng, &ops, max_depth, true);
            if e.node_count() <= self.limits.max_nodes {
                return e;
            }
        }
        Expr::Field(*self.fields.first().unwrap_or(&Field::Close))
    }

    fn leaf<R: Rng + ?Sized>(&self, rng: &mut R) -> Expr {
        Expr::Field(*self.fields.choose(rng).unwrap_or(&Field::Close))
    }

    fn grow<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        ops: &[Operator],
        depth_left: usize,
        root: bool,
    ) -> Expr {
        if depth_left <= 1 || ops.is_empty() || (!root && rng.random_bool(self.leaf_prob)) {
            return self.leaf(rng);
        }
        let op = *ops.choose(rng).unwrap();
        let mut children = Vec::with_capacity(op.arity());
        for i in 0..op.arity() {
            let binary_rhs = op.arity() == 2 && i == 1 && op.window_params() == 0;
            if binary_rhs
                && !self.constants.is_empty()
                && !matches!(children.first(), Some(Expr::Const(_)))
                && rng.random_bool(self.const_prob)
            {
                children.push(Expr::Const(*self.constants.choose(rng).unwrap()));
            } else {
                children.push(self.grow(rng, ops, depth_left - 1, false));
            }
        }
        let windows = match op.window_params() {
            0 => vec![],
            _ => vec![*self.usable_windows(op).choose(rng).unwrap()],
        };
        let reals = match op {
            Operator::Power => vec![*self.power_exponents.choose(rng).unwrap_or(&2.0)],
            Operator::Quantile => vec![*self.quantile_levels.choose(rng).unwrap_or(&0.5)],
            _ => vec![],
        };
        Expr::Node(Node {
            op,
            children,
            windows,
            reals,
        })
    }
}
