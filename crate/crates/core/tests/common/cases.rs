//! Shared case generators and engine-vs-oracle comparison harnesses.

#![allow(dead_code)]

use std::sync::Arc;

use alphachain_core::expr::{Expr, Operator};
use alphachain_core::panel::{TradingCalendar, Universe};
use alphachain_core::{evaluate, ForwardReturns, Panel, SignalMatrix};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{close_enough, naive_node};

const TOL: f64 = 1e-9;

pub fn representative(op: Operator) -> Vec<&'static str> {
    use Operator::*;
    match op {
        Add => vec!["Add($close, $open)", "Add($volume, 2)"],
        Sub => vec!["Sub($high, $low)"],
        Mul => vec!["Mul($change, $volume)"],
        Div => vec!["Div($amount, $volume)", "Div($close, Sub($close, $close))"],
        Log => vec!["Log($volume)", "Log($change)"],
        Abs => vec!["Abs($change)"],
        Sign => vec!["Sign($change)", "Sign(Sub($close, $close))"],
        Power => vec!["Power($change, 2)", "Power($change, 0.5)", "Power($close, 3)"],
        Ref => vec!["Ref($close, 1)", "Ref($vwap, 7)"],
        Mean => vec!["Mean($close, 1)", "Mean($close, 5)", "Mean($change, 20)"],
        Sum => vec!["Sum($volume, 3)"],
        Std => vec!["Std($change, 2)", "Std($close, 10)"],
        Var => vec!["Var($change, 20)"],
        Max => vec!["Max($volume, 5)", "Max($high, 10)"],
        Min => vec!["Min($volume, 5)", "Min($low, 10)"],
        IdxMax => vec!["IdxMax($volume, 5)", "IdxMax($close, 10)"],
        IdxMin => vec!["IdxMin($volume, 5)", "IdxMin($close, 10)"],
        Med => vec!["Med($close, 5)", "Med($volume, 4)"],
        Mad => vec!["Mad($change, 10)"],
        Rank => vec!["Rank($volume, 5)", "Rank($close, 10)"],
        Count => vec!["Count($close, 5)", "Count(Log($change), 10)"],
        Delta => vec!["Delta($close, 1)", "Delta($volume, 5)"],
        Quantile => vec!["Quantile($close, 10, 0.25)", "Quantile($volume, 5, 0.9)"],
        Slope => vec!["Slope($close, 10)", "Slope($volume, 5)"],
        Resi => vec!["Resi($close, 10)"],
        Rsquare => vec!["Rsquare($close, 10)", "Rsquare($volume, 3)"],
        Skew => vec!["Skew($change, 10)", "Skew($volume, 5)"],
        Kurt => vec!["Kurt($change, 20)", "Kurt($volume, 6)"],
        Corr => vec!["Corr($close, $volume, 10)", "Corr($volume, $amount, 5)"],
        Cov => vec!["Cov($close, $open, 10)"],
        If => vec!["If(Gt($change, 0), $close, $open)"],
        Gt => vec!["Gt($close, $open)", "Gt($volume, 200000)"],
        Lt => vec!["Lt($close, $open)"],
        Ge => vec!["Ge($volume, 200000)"],
        Le => vec!["Le($volume, 200000)"],
        Eq => vec!["Eq($volume, 200000)"],
        Ne => vec!["Ne($volume, 200000)"],
        And => vec!["And(Gt($change, 0), Gt($volume, 150000))"],
        Or => vec!["Or(Gt($change, 0), Gt($volume, 150000))"],
        Not => vec!["Not(Gt($change, 0))"],
    }
}

pub fn calendar(t: usize) -> Arc<TradingCalendar> {
    let start = chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
    Arc::new(TradingCalendar::new((0..t).map(|i| start + chrono::Days::new(i as u64)).collect()).unwrap())
}

pub fn universe(n: usize) -> Arc<Universe> {
    Arc::new(Universe::new((0..n).map(|j| format!("S{j:03}")).collect()).unwrap())
}

pub fn signal(values: Array2<f64>) -> SignalMatrix {
    let (t, n) = values.dim();
    SignalMatrix::new(calendar(t), universe(n), values)
}

pub fn returns(values: Array2<f64>) -> ForwardReturns {
    let (t, n) = values.dim();
    ForwardReturns {
        horizon: 1,
        calendar: calendar(t),
        universe: universe(n),
        values,
    }
}

/// Random matrix with occasional NaNs, coarse ties and constant rows.
pub fn random_case(rng: &mut ChaCha8Rng, t: usize, n: usize) -> (Array2<f64>, Array2<f64>) {
    let mut s = Array2::from_shape_fn((t, n), |_| rng.random_range(-1.0..1.0));
    let mut r = Array2::from_shape_fn((t, n), |_| rng.random_range(-0.1..0.1));
    for row in 0..t {
        match rng.random_range(0..10) {
            0 => s.row_mut(row).fill(0.5),
            1 => s.row_mut(row).mapv_inplace(|v: f64| (v * 3.0).round()),
            2 => r.row_mut(row).mapv_inplace(|v: f64| (v * 20.0).round()),
            3 => {
                for j in 0..n.saturating_sub(2) {
                    s[[row, j]] = f64::NAN;
                }
            }
            _ => {}
        }
        for j in 0..n {
            if rng.random_bool(0.05) {
                s[[row, j]] = f64::NAN;
            }
            if rng.random_bool(0.05) {
                r[[row, j]] = f64::NAN;
            }
        }
    }
    (s, r)
}

pub fn to_rows(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Checks every operator node of `expr` against the oracle, feeding the
/// oracle the engine's own child values.
pub fn node_mismatch(expr: &Expr, panel: &Panel) -> Option<String> {
    let Expr::Node(node) = expr else {
        return None;
    };
    for c in &node.children {
        if let Some(m) = node_mismatch(c, panel) {
            return Some(m);
        }
    }
    let kids: Vec<Vec<Vec<f64>>> = node
        .children
        .iter()
        .map(|c| to_rows(&evaluate(c, panel).values))
        .collect();
    let want = naive_node(
        node.op,
        &kids,
        node.windows.first().copied().unwrap_or(0),
        node.reals.first().copied().unwrap_or(0.0),
    );
    let got = evaluate(expr, panel).values;
    for t in 0..panel.rows() {
        for j in 0..panel.cols() {
            if !close_enough(got[[t, j]], want[t][j], TOL) {
                return Some(format!("{expr} at ({t}, {j}): {} vs {}", got[[t, j]], want[t][j]));
            }
        }
    }
    None
}
