//! Alpha expression language.
//!
//! Expressions are written in a functional syntax such as
//! `Div(Sub($close, Mean($vwap, 2)), Std($amount, 5))`. Fields carry a `$`
//! prefix, operator names are case-sensitive, window arguments are positive
//! integer literals and plain numeric literals are allowed as leaves.

mod parse;
mod sample;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use parse::{parse, ParseError, ParseErrorKind};
pub use sample::ExprSampler;
pub use validate::{validate, Violation};

/// One of the eight market data fields an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Open,
    High,
    Low,
    Close,
    Volume,
    Amount,
    Change,
    Vwap,
}

impl Field {
    pub const ALL: [Field; 8] = [
        Field::Open,
        Field::High,
        Field::Low,
        Field::Close,
        Field::Volume,
        Field::Amount,
        Field::Change,
        Field::Vwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Open => "open",
            Field::High => "high",
            Field::Low => "low",
            Field::Close => "close",
            Field::Volume => "volume",
            Field::Amount => "amount",
            Field::Change => "change",
            Field::Vwap => "vwap",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn description(self) -> &'static str {
        match self {
            Field::Open => "Opening price of the stock",
            Field::High => "Highest price of the stock",
            Field::Low => "Lowest price of the stock",
            Field::Close => "Closing price of the stock",
            Field::Volume => "Trading volume of the stock",
            Field::Amount => "Trading amount of the stock",
            Field::Change => "Price change of the stock",
            Field::Vwap => "Volume-weighted average price of the stock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Mathematical,
    TimeSeries,
    Regression,
    Statistical,
    Conditional,
    Logical,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::Mathematical => "Mathematical",
            Category::TimeSeries => "Time Series (rolling)",
            Category::Regression => "Regression (rolling)",
            Category::Statistical => "Statistical (rolling)",
            Category::Conditional => "Conditional",
            Category::Logical => "Logical",
        }
    }
}

/// The operator catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    // mathematical
    Add,
    Sub,
    Mul,
    Div,
    Log,
    Abs,
    Power,
    Sign,
    // rolling time series
    Mean,
    Std,
    Var,
    Sum,
    Max,
    Min,
    Med,
    Mad,
    Rank,
    Quantile,
    Count,
    Ref,
    Delta,
    IdxMax,
    IdxMin,
    // rolling regression
    Resi,
    Slope,
    Rsquare,
    // rolling statistics
    Skew,
    Kurt,
    Corr,
    Cov,
    // conditional
    If,
    Gt,
    Lt,
    Ge,
    Le,
    Eq,
    Ne,
    // logical
    And,
    Or,
    Not,
}

impl Operator {
    pub const ALL: [Operator; 40] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Log,
        Operator::Abs,
        Operator::Power,
        Operator::Sign,
        Operator::Mean,
        Operator::Std,
        Operator::Var,
        Operator::Sum,
        Operator::Max,
        Operator::Min,
        Operator::Med,
        Operator::Mad,
        Operator::Rank,
        Operator::Quantile,
        Operator::Count,
        Operator::Ref,
        Operator::Delta,
        Operator::IdxMax,
        Operator::IdxMin,
        Operator::Resi,
        Operator::Slope,
        Operator::Rsquare,
        Operator::Skew,
        Operator::Kurt,
        Operator::Corr,
        Operator::Cov,
        Operator::If,
        Operator::Gt,
        Operator::Lt,
        Operator::Ge,
        Operator::Le,
        Operator::Eq,
        Operator::Ne,
        Operator::And,
        Operator::Or,
        Operator::Not,
    ];

    pub fn name(self) -> &'static str {
        use Operator::*;
        match self {
            Add => "Add",
            Sub => "Sub",
            Mul => "Mul",
            Div => "Div",
            Log => "Log",
            Abs => "Abs",
            Power => "Power",
            Sign => "Sign",
            Mean => "Mean",
            Std => "Std",
            Var => "Var",
            Sum => "Sum",
            Max => "Max",
            Min => "Min",
            Med => "Med",
            Mad => "Mad",
            Rank => "Rank",
            Quantile => "Quantile",
            Count => "Count",
            Ref => "Ref",
            Delta => "Delta",
            IdxMax => "IdxMax",
            IdxMin => "IdxMin",
            Resi => "Resi",
            Slope => "Slope",
            Rsquare => "Rsquare",
            Skew => "Skew",
            Kurt => "Kurt",
            Corr => "Corr",
            Cov => "Cov",
            If => "If",
            Gt => "Gt",
            Lt => "Lt",
            Ge => "Ge",
            Le => "Le",
            Eq => "Eq",
            Ne => "Ne",
            And => "And",
            Or => "Or",
            Not => "Not",
        }
    }

    pub fn from_name(name: &str) -> Option<Operator> {
        Operator::ALL.into_iter().find(|op| op.name() == name)
    }

    pub fn category(self) -> Category {
        use Operator::*;
        match self {
            Add | Sub | Mul | Div | Log | Abs | Power | Sign => Category::Mathematical,
            Mean | Std | Var | Sum | Max | Min | Med | Mad | Rank | Quantile | Count | Ref
            | Delta | IdxMax | IdxMin => Category::TimeSeries,
            Resi | Slope | Rsquare => Category::Regression,
            Skew | Kurt | Corr | Cov => Category::Statistical,
            If | Gt | Lt | Ge | Le | Eq | Ne => Category::Conditional,
            And | Or | Not => Category::Logical,
        }
    }

    /// Number of expression arguments.
    pub fn arity(self) -> usize {
        use Operator::*;
        match self {
            Log | Abs | Power | Sign | Not => 1,
            Add | Sub | Mul | Div | Gt | Lt | Ge | Le | Eq | Ne | And | Or | Corr | Cov => 2,
            If => 3,
            _ => 1,
        }
    }

    /// Number of integer window arguments (following the expression arguments).
    pub fn window_params(self) -> usize {
        match self.category() {
            Category::TimeSeries | Category::Regression | Category::Statistical => 1,
            _ => 0,
        }
    }

    /// Number of real-valued literal parameters (following the windows).
    pub fn extra_params(self) -> usize {
        match self {
            Operator::Quantile | Operator::Power => 1,
            _ => 0,
        }
    }

    pub fn total_args(self) -> usize {
        self.arity() + self.window_params() + self.extra_params()
    }

    /// Smallest window for which the operator can produce a finite value.
    pub fn min_window(self) -> usize {
        use Operator::*;
        match self {
            Std | Var | Cov | Corr | Resi | Slope | Rsquare => 2,
            Skew => 3,
            Kurt => 4,
            _ => 1,
        }
    }

    /// Operators whose first two operands commute.
    pub fn is_symmetric(self) -> bool {
        use Operator::*;
        matches!(self, Add | Mul | And | Or | Eq | Ne | Corr | Cov)
    }

    /// Signature as shown to the model, e.g. `Quantile(x, N, q)`.
    pub fn signature(self) -> &'static str {
        use Operator::*;
        match self {
            Add => "Add(x, y)",
            Sub => "Sub(x, y)",
            Mul => "Mul(x, y)",
            Div => "Div(x, y)",
            Log => "Log(x)",
            Abs => "Abs(x)",
            Power => "Power(x, n)",
            Sign => "Sign(x)",
            Mean => "Mean(x, N)",
            Std => "Std(x, N)",
            Var => "Var(x, N)",
            Sum => "Sum(x, N)",
            Max => "Max(x, N)",
            Min => "Min(x, N)",
            Med => "Med(x, N)",
            Mad => "Mad(x, N)",
            Rank => "Rank(x, N)",
            Quantile => "Quantile(x, N, q)",
            Count => "Count(x, N)",
            Ref => "Ref(x, N)",
            Delta => "Delta(x, N)",
            IdxMax => "IdxMax(x, N)",
            IdxMin => "IdxMin(x, N)",
            Resi => "Resi(x, N)",
            Slope => "Slope(x, N)",
            Rsquare => "Rsquare(x, N)",
            Skew => "Skew(x, N)",
            Kurt => "Kurt(x, N)",
            Corr => "Corr(x, y, N)",
            Cov => "Cov(x, y, N)",
            If => "If(cond, x, y)",
            Gt => "Gt(x, y)",
            Lt => "Lt(x, y)",
            Ge => "Ge(x, y)",
            Le => "Le(x, y)",
            Eq => "Eq(x, y)",
            Ne => "Ne(x, y)",
            And => "And(x, y)",
            Or => "Or(x, y)",
            Not => "Not(x)",
        }
    }

    pub fn description(self) -> &'static str {
        use Operator::*;
        match self {
            Add => "Element-wise addition of x and y",
            Sub => "Element-wise subtraction of y from x",
            Mul => "Element-wise multiplication of x and y",
            Div => "Element-wise division of x by y",
            Log => "Natural logarithm of x",
            Abs => "Absolute value of x",
            Power => "Raise x to the power of n",
            Sign => "Sign of x (+1, -1, or 0)",
            Mean => "Mean of x over past N days",
            Std => "Standard deviation over N days",
            Var => "Variance over N days",
            Sum => "Sum over N days",
            Max => "Maximum value over N days",
            Min => "Minimum value over N days",
            Med => "Median over N days",
            Mad => "Mean absolute deviation over N days",
            Rank => "Percentile rank in N-day window",
            Quantile => "q-quantile over N days",
            Count => "Number of valid values in N days",
            Ref => "Value N days ago",
            Delta => "Difference from N days ago",
            IdxMax => "Position of max value in window",
            IdxMin => "Position of min value in window",
            Resi => "Residual of regression of x over N days",
            Slope => "Regression slope over N days",
            Rsquare => "Coefficient of determination",
            Skew => "Skewness over N days",
            Kurt => "Kurtosis over N days",
            Corr => "Correlation between x and y",
            Cov => "Covariance between x and y",
            If => "If condition is true, return x, else y",
            Gt => "1 if x > y, else 0",
            Lt => "1 if x < y, else 0",
            Ge => "1 if x >= y, else 0",
            Le => "1 if x <= y, else 0",
            Eq => "1 if x = y, else 0",
            Ne => "1 if x != y, else 0",
            And => "Logical AND between x and y",
            Or => "Logical OR between x and y",
            Not => "Logical NOT of x",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Interior node of an expression tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Operator,
    pub children: Vec<Expr>,
    pub windows: Vec<usize>,
    pub reals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Field(Field),
    Const(f64),
    Node(Node),
}

/// Structural problems when building a node programmatically.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildError {
    #[error("{op} expects {expected} expression argument(s), got {found}")]
    Arity {
        op: Operator,
        expected: usize,
        found: usize,
    },
    #[error("{op} expects {expected} window argument(s), got {found}")]
    Windows {
        op: Operator,
        expected: usize,
        found: usize,
    },
    #[error("{op} expects {expected} real parameter(s), got {found}")]
    Reals {
        op: Operator,
        expected: usize,
        found: usize,
    },
    #[error("window must be a positive integer")]
    ZeroWindow,
    #[error("parameter {value} out of range for {op}")]
    ParamOutOfRange { op: Operator, value: f64 },
}

impl Expr {
    pub fn field(f: Field) -> Expr {
        Expr::Field(f)
    }

    /// Builds a node, checking argument counts against the catalog.
    pub fn node(
        op: Operator,
        children: Vec<Expr>,
        windows: Vec<usize>,
        reals: Vec<f64>,
    ) -> Result<Expr, BuildError> {
        if children.len() != op.arity() {
            return Err(BuildError::Arity {
                op,
                expected: op.arity(),
                found: children.len(),
            });
        }
        if windows.len() != op.window_params() {
            return Err(BuildError::Windows {
                op,
                expected: op.window_params(),
                found: windows.len(),
            });
        }
        if reals.len() != op.extra_params() {
            return Err(BuildError::Reals {
                op,
                expected: op.extra_params(),
                found: reals.len(),
            });
        }
        if windows.contains(&0) {
            return Err(BuildError::ZeroWindow);
        }
        for &r in &reals {
            if !param_in_range(op, r) {
                return Err(BuildError::ParamOutOfRange { op, value: r });
            }
        }
        Ok(Expr::Node(Node {
            op,
            children,
            windows,
            reals,
        }))
    }

    /// Shorthand for operators with only expression arguments.
    pub fn call(op: Operator, children: Vec<Expr>) -> Result<Expr, BuildError> {
        Expr::node(op, children, vec![], vec![])
    }

    /// Shorthand for single-window operators.
    pub fn rolling(op: Operator, children: Vec<Expr>, window: usize) -> Result<Expr, BuildError> {
        Expr::node(op, children, vec![window], vec![])
    }

    /// Depth of the tree; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Field(_) | Expr::Const(_) => 1,
            Expr::Node(n) => 1 + n.children.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Field(_) | Expr::Const(_) => 1,
            Expr::Node(n) => 1 + n.children.iter().map(Expr::node_count).sum::<usize>(),
        }
    }

    /// Fields referenced anywhere in the tree, sorted and deduplicated.
    pub fn fields(&self) -> Vec<Field> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Field(f) = e {
                out.push(*f);
            }
        });
        out.sort();
        out.dedup();
        out
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        if let Expr::Node(n) = self {
            for c in &n.children {
                c.visit(f);
            }
        }
    }

    /// Number of leading rows that are undefined when the expression is
    /// evaluated on a panel with no missing values.
    pub fn warmup_rows(&self) -> usize {
        match self {
            Expr::Field(_) | Expr::Const(_) => 0,
            Expr::Node(n) => {
                let child = n.children.iter().map(Expr::warmup_rows).max().unwrap_or(0);
                match (n.op, n.windows.first()) {
                    // Count only needs the window to lie inside the panel.
                    (Operator::Count, Some(&w)) => w - 1,
                    (Operator::Ref | Operator::Delta, Some(&w)) => child + w,
                    (_, Some(&w)) => child + w - 1,
                    (_, None) => child,
                }
            }
        }
    }

    /// Text used for commutativity-normalized hashing: operands of symmetric
    /// operators are sorted by their own canonical text.
    pub fn canonical_text(&self) -> String {
        match self {
            Expr::Field(_) | Expr::Const(_) => self.to_string(),
            Expr::Node(n) => {
                let mut parts: Vec<String> = n.children.iter().map(Expr::canonical_text).collect();
                if n.op.is_symmetric() && parts.len() >= 2 && parts[0] > parts[1] {
                    parts.swap(0, 1);
                }
                parts.extend(n.windows.iter().map(|w| w.to_string()));
                parts.extend(n.reals.iter().map(|r| format_number(*r)));
                format!("{}({})", n.op.name(), parts.join(", "))
            }
        }
    }

    /// 64-bit structural digest; commuted operands of symmetric operators collide.
    pub fn canonical_hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(bytes)
    }
}

pub(crate) fn param_in_range(op: Operator, value: f64) -> bool {
    match op {
        Operator::Quantile => (0.0..=1.0).contains(&value),
        _ => value.is_finite(),
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub(crate) fn format_number(v: f64) -> String {
    format!("{v}")
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Field(field) => write!(f, "${}", field.name()),
            Expr::Const(v) => f.write_str(&format_number(*v)),
            Expr::Node(n) => {
                write!(f, "{}(", n.op.name())?;
                let mut first = true;
                let mut sep = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
                    if !first {
                        f.write_str(", ")?;
                    }
                    first = false;
                    Ok(())
                };
                for c in &n.children {
                    sep(f)?;
                    write!(f, "{c}")?;
                }
                for w in &n.windows {
                    sep(f)?;
                    write!(f, "{w}")?;
                }
                for r in &n.reals {
                    sep(f)?;
                    f.write_str(&format_number(*r))?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Canonical text of an expression; `parse(&format(e))` reproduces `e`.
pub fn format(expr: &Expr) -> String {
    expr.to_string()
}

/// Size, lookback and operator restrictions applied to candidate expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExprLimits {
    pub max_depth: usize,
    pub max_nodes: usize,
    pub max_window: usize,
    #[serde(skip)]
    pub operator_whitelist: Option<Vec<Operator>>,
}

impl Default for ExprLimits {
    fn default() -> Self {
        Self {
            max_depth: 8,
            max_nodes: 40,
            max_window: 250,
            operator_whitelist: None,
        }
    }
}

impl ExprLimits {
    pub fn allows(&self, op: Operator) -> bool {
        self.operator_whitelist
            .as_ref()
            .is_none_or(|list| list.contains(&op))
    }

    /// Operators permitted by the whitelist, in catalog order.
    pub fn allowed_operators(&self) -> Vec<Operator> {
        Operator::ALL
            .into_iter()
            .filter(|op| self.allows(*op))
            .collect()
    }
}
