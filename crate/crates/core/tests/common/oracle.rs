//! Naive reference implementations used as test oracles.
//!
//! Everything here is written from the textbook definitions, one output cell
//! at a time, and shares no code with the library's evaluation or metric paths.

#![allow(dead_code)]

use std::collections::BTreeSet;

use alphachain_core::expr::{Expr, Field, Operator};
use alphachain_core::panel::Panel;
use ndarray::Array2;

/// Per-column naive evaluation of an expression. Returns `values[t][j]`.
pub fn naive_eval(expr: &Expr, panel: &Panel) -> Vec<Vec<f64>> {
    let t_len = panel.rows();
    let n = panel.cols();
    let mut out = vec![vec![f64::NAN; n]; t_len];
    for j in 0..n {
        let col = naive_column(expr, panel, j);
        for t in 0..t_len {
            out[t][j] = col[t];
        }
    }
    out
}

fn clean(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

fn naive_column(expr: &Expr, panel: &Panel, j: usize) -> Vec<f64> {
    let t_len = panel.rows();
    match expr {
        Expr::Field(f) => (0..t_len).map(|t| panel.field(*f)[[t, j]]).collect(),
        Expr::Const(c) => vec![*c; t_len],
        Expr::Node(node) => {
            let kids: Vec<Vec<f64>> = node
                .children
                .iter()
                .map(|c| naive_column(c, panel, j))
                .collect();
            let w = node.windows.first().copied().unwrap_or(0);
            let real = node.reals.first().copied().unwrap_or(0.0);
            (0..t_len)
                .map(|t| naive_cell(node.op, &kids, w, real, t))
                .collect()
        }
    }
}

/// Naive evaluation of a single operator node given its children's values
/// (`kids[c][t][j]`). Returns `values[t][j]`.
pub fn naive_node(
    op: Operator,
    kids: &[Vec<Vec<f64>>],
    w: usize,
    real: f64,
) -> Vec<Vec<f64>> {
    let t_len = kids[0].len();
    let n = kids[0].first().map_or(0, |r| r.len());
    let mut out = vec![vec![f64::NAN; n]; t_len];
    for j in 0..n {
        let cols: Vec<Vec<f64>> = kids
            .iter()
            .map(|k| (0..t_len).map(|t| k[t][j]).collect())
            .collect();
        for t in 0..t_len {
            out[t][j] = naive_cell(op, &cols, w, real, t);
        }
    }
    out
}

/// Window of `x` ending at row `t` (inclusive) or None if incomplete.
fn window(x: &[f64], t: usize, w: usize) -> Option<&[f64]> {
    if t + 1 < w {
        None
    } else {
        Some(&x[t + 1 - w..=t])
    }
}

fn naive_cell(op: Operator, k: &[Vec<f64>], w: usize, real: f64, t: usize) -> f64 {
    use Operator::*;
    let nan = f64::NAN;
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    match op {
        Add | Sub | Mul | Div | Gt | Lt | Ge | Le | Eq | Ne | And | Or => {
            let (x, y) = (k[0][t], k[1][t]);
            if x.is_nan() || y.is_nan() {
                return nan;
            }
            match op {
                Add => clean(x + y),
                Sub => clean(x - y),
                Mul => clean(x * y),
                Div => {
                    if y == 0.0 {
                        nan
                    } else {
                        clean(x / y)
                    }
                }
                Gt => b(x > y),
                Lt => b(x < y),
                Ge => b(x >= y),
                Le => b(x <= y),
                Eq => b(x == y),
                Ne => b(x != y),
                And => b(x != 0.0 && y != 0.0),
                Or => b(x != 0.0 || y != 0.0),
                _ => unreachable!(),
            }
        }
        Log | Abs | Sign | Power | Not => {
            let x = k[0][t];
            if x.is_nan() {
                return nan;
            }
            match op {
                Log => {
                    if x > 0.0 {
                        clean(x.ln())
                    } else {
                        nan
                    }
                }
                Abs => x.abs(),
                Sign => {
                    if x == 0.0 {
                        0.0
                    } else {
                        x.signum()
                    }
                }
                Power => {
                    let undefined = (x < 0.0 && real.trunc() != real) || (x == 0.0 && real < 0.0);
                    if undefined {
                        nan
                    } else {
                        clean(x.powf(real))
                    }
                }
                Not => b(x == 0.0),
                _ => unreachable!(),
            }
        }
        If => {
            let (c, x, y) = (k[0][t], k[1][t], k[2][t]);
            if c.is_nan() || x.is_nan() || y.is_nan() {
                nan
            } else if c != 0.0 {
                x
            } else {
                y
            }
        }
        Ref | Delta => {
            if t < w {
                return nan;
            }
            let past = k[0][t - w];
            let v = if op == Ref { past } else { k[0][t] - past };
            clean(v)
        }
        Count => match window(&k[0], t, w) {
            None => nan,
            Some(s) => s.iter().filter(|v| !v.is_nan()).count() as f64,
        },
        Corr | Cov => {
            let (Some(xs), Some(ys)) = (window(&k[0], t, w), window(&k[1], t, w)) else {
                return nan;
            };
            if xs.iter().chain(ys).any(|v| v.is_nan()) || w < 2 {
                return nan;
            }
            let cov = naive_cov(xs, ys);
            if op == Cov {
                return cov;
            }
            if constant(xs) || constant(ys) {
                return nan;
            }
            cov / (naive_cov(xs, xs).sqrt() * naive_cov(ys, ys).sqrt())
        }
        _ => {
            let Some(s) = window(&k[0], t, w) else {
                return nan;
            };
            if s.iter().any(|v| v.is_nan()) {
                return nan;
            }
            naive_window(op, s, real)
        }
    }
}

fn constant(s: &[f64]) -> bool {
    s.iter().all(|v| *v == s[0])
}

fn mean(s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in s {
        acc += v;
    }
    acc / s.len() as f64
}

fn naive_cov(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += (x[i] - mx) * (y[i] - my);
    }
    acc / (x.len() - 1) as f64
}

fn sorted(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn naive_window(op: Operator, s: &[f64], real: f64) -> f64 {
    use Operator::*;
    let n = s.len();
    let nf = n as f64;
    match op {
        Mean => mean(s),
        Sum => s.iter().fold(0.0, |a, v| a + v),
        Var | Std => {
            if n < 2 {
                return f64::NAN;
            }
            let v = naive_cov(s, s);
            if op == Std {
                v.sqrt()
            } else {
                v
            }
        }
        Max => s.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Min => s.iter().cloned().fold(f64::INFINITY, f64::min),
        IdxMax | IdxMin => {
            // scan from today backwards; strict comparison keeps the most recent tie
            let mut best = n - 1;
            for i in (0..n).rev() {
                let better = if op == IdxMax {
                    s[i] > s[best]
                } else {
                    s[i] < s[best]
                };
                if better {
                    best = i;
                }
            }
            (n - 1 - best) as f64
        }
        Med => {
            let v = sorted(s);
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        }
        Mad => {
            let m = mean(s);
            mean(&s.iter().map(|v| (v - m).abs()).collect::<Vec<_>>())
        }
        Rank => {
            // average 1-based rank of today's value among the sorted window
            let v = sorted(s);
            let cur = s[n - 1];
            let positions: Vec<usize> = (0..n).filter(|i| v[*i] == cur).map(|i| i + 1).collect();
            let avg = positions.iter().sum::<usize>() as f64 / positions.len() as f64;
            avg / nf
        }
        Quantile => {
            let v = sorted(s);
            let h = real * (nf - 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        }
        Slope | Resi | Rsquare => {
            if n < 2 {
                return f64::NAN;
            }
            let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let slope = naive_cov(&times, s) / naive_cov(&times, &times);
            let intercept = mean(s) - slope * mean(&times);
            match op {
                Slope => slope,
                Resi => s[n - 1] - (intercept + slope * (nf - 1.0)),
                _ => {
                    if constant(s) {
                        return f64::NAN;
                    }
                    let r = naive_cov(&times, s)
                        / (naive_cov(&times, &times).sqrt() * naive_cov(s, s).sqrt());
                    r * r
                }
            }
        }
        Skew => {
            if n < 3 || constant(s) {
                return f64::NAN;
            }
            let m = mean(s);
            let sd = naive_cov(s, s).sqrt();
            let sum3: f64 = s.iter().map(|v| ((v - m) / sd).powi(3)).sum();
            nf / ((nf - 1.0) * (nf - 2.0)) * sum3
        }
        Kurt => {
            if n < 4 || constant(s) {
                return f64::NAN;
            }
            let m = mean(s);
            let sd = naive_cov(s, s).sqrt();
            let sum4: f64 = s.iter().map(|v| ((v - m) / sd).powi(4)).sum();
            nf * (nf + 1.0) / ((nf - 1.0) * (nf - 2.0) * (nf - 3.0)) * sum4
                - 3.0 * (nf - 1.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0))
        }
        _ => unreachable!("{op} handled elsewhere"),
    }
}

/// `|a - b| <= tol * max(1, |a|, |b|)`, with NaN matching NaN only.
pub fn close_enough(a: f64, b: f64, tol: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Pearson correlation of paired samples, straight from the definition.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let dx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let dy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    num / (dx * dy).sqrt()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|o| *o < v).count() as f64;
            let equal = x.iter().filter(|o| *o == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Random panel for the operator oracle. Volume takes few distinct values so
/// ties occur; optionally a sprinkling of cells is NaN.
pub fn oracle_panel(seed: u64, t: usize, n: usize, with_nans: bool) -> Panel {
    use alphachain_core::panel::{TradingCalendar, Universe};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fields = vec![Array2::<f64>::zeros((t, n)); 8];
    for j in 0..n {
        let mut close: f64 = rng.random_range(5.0..50.0);
        for row in 0..t {
            let prev = close;
            close *= 1.0 + rng.random_range(-0.04..0.04);
            let open = prev * (1.0 + rng.random_range(-0.01..0.01));
            let high = open.max(close) * (1.0 + rng.random_range(0.0..0.01));
            let low = open.min(close) * (1.0 - rng.random_range(0.0..0.01));
            let vwap = low + (high - low) * rng.random_range(0.2..0.8);
            let volume = [1e5, 2e5, 3e5][rng.random_range(0..3)];
            let vals = [open, high, low, close, volume, volume * vwap, close / prev - 1.0, vwap];
            for (k, v) in vals.into_iter().enumerate() {
                fields[k][[row, j]] = v;
            }
        }
    }
    if with_nans {
        for m in fields.iter_mut() {
            for v in m.iter_mut() {
                if rng.random_bool(0.01) {
                    *v = f64::NAN;
                }
            }
        }
    }
    let start = chrono::NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
    let dates = (0..t).map(|i| start + chrono::Days::new(i as u64)).collect();
    Panel::new(
        TradingCalendar::new(dates).unwrap(),
        Universe::new((0..n).map(|j| format!("I{j:02}")).collect()).unwrap(),
        fields,
    )
    .unwrap()
}

pub fn all_fields() -> [Field; 8] {
    Field::ALL
}

/// Per-day statistic computed straight from the definitions; None when the
/// day should be skipped.
pub fn oracle_day(s: &[f64], r: &[f64], ranked: bool, min_pairs: usize) -> Option<f64> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for j in 0..s.len() {
        if !s[j].is_nan() && !r[j].is_nan() {
            x.push(s[j]);
            y.push(r[j]);
        }
    }
    if x.len() < min_pairs || x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return None;
    }
    if ranked {
        x = average_ranks(&x);
        y = average_ranks(&y);
    }
    Some(pearson(&x, &y))
}

/// Top-k sets by explicit selection: repeatedly take the largest remaining
/// value, preferring the smaller identifier on ties.
pub fn oracle_turnover(s: &Array2<f64>, ids: &[String], k: usize) -> Option<f64> {
    let mut sets: Vec<BTreeSet<String>> = Vec::new();
    for row in s.outer_iter() {
        let mut remaining: Vec<usize> = (0..row.len()).filter(|j| !row[*j].is_nan()).collect();
        if remaining.len() < k {
            continue;
        }
        let mut chosen = BTreeSet::new();
        for _ in 0..k {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (a, b) = (remaining[i], remaining[best]);
                if row[a] > row[b] || (row[a] == row[b] && ids[a] < ids[b]) {
                    best = i;
                }
            }
            chosen.insert(ids[remaining.remove(best)].clone());
        }
        sets.push(chosen);
    }
    if sets.len() < 2 {
        return None;
    }
    let total: f64 = sets
        .windows(2)
        .map(|w| w[0].symmetric_difference(&w[1]).count() as f64 / k as f64)
        .sum();
    Some(total / (sets.len() - 1) as f64)
}
