//! Expression evaluation over a panel.
//!
//! Every instrument column is computed independently and causally: the value
//! at row `t` depends only on rows `..=t` of the same column. Undefined
//! results (insufficient history, division by zero, NaN inputs, zero-variance
//! windows, ...) are NaN.

mod rolling;

use std::sync::Arc;

use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::expr::{Expr, Operator};
use crate::panel::{Panel, TradingCalendar, Universe};

/// Factor output or composite score: one value per (day, instrument).
///
/// Equality is bitwise on the values, so NaN cells compare equal to NaN.
#[derive(Debug, Clone)]
pub struct SignalMatrix {
    pub calendar: Arc<TradingCalendar>,
    pub universe: Arc<Universe>,
    pub values: Array2<f64>,
}

impl SignalMatrix {
    pub fn new(calendar: Arc<TradingCalendar>, universe: Arc<Universe>, values: Array2<f64>) -> Self {
        debug_assert_eq!(values.dim(), (calendar.len(), universe.len()));
        Self {
            calendar,
            universe,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn slice_rows(&self, rows: std::ops::Range<usize>) -> SignalMatrix {
        SignalMatrix {
            calendar: Arc::new(
                TradingCalendar::new(self.calendar.dates()[rows.clone()].to_vec())
                    .expect("sub-calendar stays sorted"),
            ),
            universe: Arc::clone(&self.universe),
            values: self.values.slice(ndarray::s![rows, ..]).to_owned(),
        }
    }

    /// Index of the first row without any NaN, if one exists.
    pub fn first_complete_row(&self) -> Option<usize> {
        self.values
            .outer_iter()
            .position(|row| row.iter().all(|v| !v.is_nan()))
    }

    pub fn is_all_nan(&self) -> bool {
        self.values.iter().all(|v| v.is_nan())
    }
}

impl PartialEq for SignalMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.calendar == other.calendar
            && self.universe == other.universe
            && crate::panel::bitwise_eq(&self.values, &other.values)
    }
}

/// Evaluates `expr` on `panel`.
pub fn evaluate(expr: &Expr, panel: &Panel) -> SignalMatrix {
    SignalMatrix::new(
        Arc::clone(panel.calendar()),
        Arc::clone(panel.universe()),
        eval_values(expr, panel),
    )
}

/// Evaluates several expressions in parallel; output order follows input order.
pub fn evaluate_batch(exprs: &[Expr], panel: &Panel) -> Vec<SignalMatrix> {
    exprs.par_iter().map(|e| evaluate(e, panel)).collect()
}

fn finite(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

fn bool_val(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Scalar semantics of the element-wise operators with one or two operands.
pub(crate) fn apply_unary(op: Operator, a: f64, param: f64) -> f64 {
    if a.is_nan() {
        return f64::NAN;
    }
    match op {
        Operator::Log => {
            if a <= 0.0 {
                f64::NAN
            } else {
                finite(a.ln())
            }
        }
        Operator::Abs => a.abs(),
        Operator::Sign => {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Operator::Power => power(a, param),
        Operator::Not => bool_val(a == 0.0),
        _ => unreachable!("{op} is not unary"),
    }
}

fn power(base: f64, exp: f64) -> f64 {
    if base < 0.0 && exp.fract() != 0.0 {
        return f64::NAN;
    }
    if base == 0.0 && exp < 0.0 {
        return f64::NAN;
    }
    finite(base.powf(exp))
}

pub(crate) fn apply_binary(op: Operator, a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        return f64::NAN;
    }
    match op {
        Operator::Add => finite(a + b),
        Operator::Sub => finite(a - b),
        Operator::Mul => finite(a * b),
        Operator::Div => {
            if b == 0.0 {
                f64::NAN
            } else {
                finite(a / b)
            }
        }
        Operator::Gt => bool_val(a > b),
        Operator::Lt => bool_val(a < b),
        Operator::Ge => bool_val(a >= b),
        Operator::Le => bool_val(a <= b),
        Operator::Eq => bool_val(a == b),
        Operator::Ne => bool_val(a != b),
        Operator::And => bool_val(a != 0.0 && b != 0.0),
        Operator::Or => bool_val(a != 0.0 || b != 0.0),
        _ => unreachable!("{op} is not binary"),
    }
}

fn eval_values(expr: &Expr, panel: &Panel) -> Array2<f64> {
    let shape = (panel.rows(), panel.cols());
    match expr {
        Expr::Field(f) => panel.field(*f).clone(),
        Expr::Const(v) => Array2::from_elem(shape, *v),
        Expr::Node(node) => {
            let args: Vec<Array2<f64>> = node.children.iter().map(|c| eval_values(c, panel)).collect();
            let op = node.op;
            let window = node.windows.first().copied();
            match (op.arity(), window) {
                (1, None) => {
                    let param = node.reals.first().copied().unwrap_or(0.0);
                    args[0].mapv(|a| apply_unary(op, a, param))
                }
                (2, None) => Zip::from(&args[0])
                    .and(&args[1])
                    .map_collect(|a, b| apply_binary(op, *a, *b)),
                (3, None) => Zip::from(&args[0])
                    .and(&args[1])
                    .and(&args[2])
                    .map_collect(|c, x, y| {
                        if c.is_nan() || x.is_nan() || y.is_nan() {
                            f64::NAN
                        } else if *c != 0.0 {
                            *x
                        } else {
                            *y
                        }
                    }),
                (1, Some(w)) => {
                    let q = node.reals.first().copied().unwrap_or(0.5);
                    rolling::unary(op, &args[0], w, q)
                }
                (2, Some(w)) => rolling::pairwise(op, &args[0], &args[1], w),
                _ => unreachable!("operator {op} with unexpected shape"),
            }
        }
    }
}
